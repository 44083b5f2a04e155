#pragma once

#include <cmath>
#include <vector>

#include "odmt/parameter.hpp"

namespace odmt {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam without weight decay. Moment buffers are keyed by position in the
/// store, so the store must not grow after the optimizer is created.
class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions opts) : store_(&store), opts_(opts) {
    if (!(opts_.lr > 0.0)) throw Error("adam: learning rate must be positive");
    for (const auto& p : store.all()) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  /// Applies one update from the accumulated gradients, then zeroes them.
  void step() {
    auto& params = store_->all();
    if (params.size() != m_.size()) throw Error("adam: parameter store changed size");
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = params[i];
      if (!p.grad.all_finite()) throw Error("adam: non-finite gradient in '" + p.name + "'");
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.value.size(); ++j) {
        const double g = p.grad.data[j];
        m[j] = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g;
        v[j] = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g * g;
        p.value.data[j] -= opts_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + opts_.eps);
      }
      p.zero_grad();
    }
  }

  long steps() const { return t_; }
  const AdamOptions& options() const { return opts_; }

 private:
  ParameterStore* store_;
  AdamOptions opts_;
  long t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace odmt

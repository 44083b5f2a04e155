#pragma once

#include <cmath>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "odmt/tensor.hpp"

namespace odmt {

using Rng = std::mt19937_64;

/// A learnable tensor with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape) {}

  void zero_grad() { grad.zero(); }
};

/// Owns every parameter of a model under a stable, unique name.
/// Addresses stay valid for the lifetime of the store.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  Parameter& create(const std::string& name, Tensor init) {
    if (index_.contains(name)) throw Error("parameter '" + name + "' already exists");
    params_.emplace_back(name, std::move(init));
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  Parameter& zeros(const std::string& name, Shape shape) { return create(name, Tensor(std::move(shape))); }

  Parameter& filled(const std::string& name, Shape shape, double v) {
    return create(name, Tensor(std::move(shape), v));
  }

  // Glorot-uniform over a [fan_in, fan_out] matrix.
  Parameter& xavier(const std::string& name, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::uniform_real_distribution<double> dist(-limit, limit);
    Tensor t = Tensor::matrix(fan_in, fan_out);
    for (double& v : t.data) v = dist(rng);
    return create(name, std::move(t));
  }

  Parameter& normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Tensor t(std::move(shape));
    for (double& v : t.data) v = dist(rng);
    return create(name, std::move(t));
  }

  Parameter* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter& at(const std::string& name) {
    if (auto* p = find(name)) return *p;
    throw Error("unknown parameter '" + name + "'");
  }

  std::deque<Parameter>& all() { return params_; }
  const std::deque<Parameter>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Copies values (not gradients) from another store with identical names and shapes.
  void copy_values_from(const ParameterStore& other) {
    for (auto& p : params_) {
      const Parameter* src = other.find(p.name);
      if (!src || src->value.shape != p.value.shape)
        throw Error("parameter '" + p.name + "' missing or mis-shaped in source store");
      p.value = src->value;
    }
  }

  std::vector<Tensor> snapshot() const {
    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.value);
    return out;
  }

  void restore(const std::vector<Tensor>& values) {
    if (values.size() != params_.size()) throw Error("snapshot size mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = values[i];
  }

 private:
  std::deque<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace odmt

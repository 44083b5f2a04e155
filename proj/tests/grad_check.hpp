#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>

#include "odmt/autodiff.hpp"

namespace odmt::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::string worst;  // "param[index]"
  std::size_t checked = 0;
  double roundoff = 0.0;  // differences below this count as agreement
  double max_abs_diff = 0.0;
};

/// |a - n| / max(|a|, |n|, floor)
inline double rel_error(double analytic, double numeric, double floor = 1e-6) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central differences against reverse-mode gradients for every entry of
/// every parameter in `store`. `loss` must record a scalar on the given tape
/// and be deterministic across calls. Entries whose analytic and numeric
/// values differ by less than the difference quotient's own rounding error
/// (8 eps |L| / h) are counted as exact; this matters for structurally zero
/// gradients such as attention key biases.
inline GradCheck check_gradients(ParameterStore& store, const std::function<Var(Tape&)>& loss, double h = 1e-5,
                                 double floor = 1e-6) {
  store.zero_grad();
  GradCheck out;
  {
    Tape tape;
    Var l = loss(tape);
    out.roundoff = 8.0 * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(l.value().item())) / h;
    tape.backward(l);
  }
  for (auto& p : store.all()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double x0 = p.value.data[i];
      auto eval = [&](double x) {
        p.value.data[i] = x;
        Tape tape(false);
        return loss(tape).value().item();
      };
      const double numeric = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
      p.value.data[i] = x0;
      out.max_abs_diff = std::max(out.max_abs_diff, std::abs(p.grad.data[i] - numeric));
      const double err =
          std::abs(p.grad.data[i] - numeric) <= out.roundoff ? 0.0 : rel_error(p.grad.data[i], numeric, floor);
      ++out.checked;
      if (err > out.max_rel_error) {
        out.max_rel_error = err;
        out.worst = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  store.zero_grad();
  return out;
}

/// Sum of x * w for fixed random weights w, so every output entry matters.
inline Var probe(Var x, std::uint64_t seed = 7) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Tensor w(x.value().shape);
  for (double& v : w.data) v = n(rng);
  return sum(mul(x, x.tape().constant(std::move(w))));
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Tensor t(std::move(shape));
  for (double& v : t.data) v = n(rng);
  return t;
}

}  // namespace odmt::testing

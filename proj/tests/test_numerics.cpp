#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "grad_check.hpp"
#include "odmt/checkpoint.hpp"
#include "odmt/optim.hpp"

using namespace odmt;
using odmt::testing::check_gradients;
using odmt::testing::probe;
using odmt::testing::random_tensor;

namespace {

constexpr double kTol = 1e-6;

ParameterStore store_with(std::initializer_list<std::pair<const char*, Tensor>> items) {
  ParameterStore s;
  for (const auto& [name, t] : items) s.create(name, t);
  return s;
}

}  // namespace

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor(Shape{2, 3}, std::vector<double>(5)), Error);
  const Tensor s = Tensor::scalar(3.5);
  EXPECT_TRUE(s.is_scalar());
  EXPECT_EQ(s.item(), 3.5);
  const Tensor m = Tensor::matrix(2, 3, 1.0);
  EXPECT_EQ(m.rows(), 2u);
  EXPECT_EQ(m.cols(), 3u);
}

TEST(Kernels, GemmVariantsMatchNaiveLoops) {
  const std::size_t m = 5, n = 4, k = 3;
  const Tensor a = random_tensor({m, k}, 1), b = random_tensor({k, n}, 2);
  const Tensor at = random_tensor({k, m}, 3), bt = random_tensor({n, k}, 4);
  std::vector<double> nn(m * n), tn(m * n), nt(m * n);
  kernels::gemm_nn(m, n, k, a.data.data(), b.data.data(), nn.data(), false);
  kernels::gemm_tn(m, n, k, at.data.data(), b.data.data(), tn.data(), false);
  kernels::gemm_nt(m, n, k, a.data.data(), bt.data.data(), nt.data(), false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double e_nn = 0, e_tn = 0, e_nt = 0;
      for (std::size_t p = 0; p < k; ++p) {
        e_nn += a(i, p) * b(p, j);
        e_tn += at(p, i) * b(p, j);
        e_nt += a(i, p) * bt(j, p);
      }
      EXPECT_NEAR(nn[i * n + j], e_nn, 1e-12);
      EXPECT_NEAR(tn[i * n + j], e_tn, 1e-12);
      EXPECT_NEAR(nt[i * n + j], e_nt, 1e-12);
    }
  const std::vector<double> once = nn;
  kernels::gemm_nn(m, n, k, a.data.data(), b.data.data(), nn.data(), true);
  for (std::size_t i = 0; i < nn.size(); ++i) EXPECT_NEAR(nn[i], 2.0 * once[i], 1e-12);
}

// Finite-difference checks, one per primitive.

TEST(GradCheck, CatchesASlightlyWrongDerivative) {
  auto s = store_with({{"x", random_tensor({2, 3}, 4)}});
  // tanh with its derivative scaled by 1.001
  auto r = check_gradients(s, [&](Tape& t) {
    return probe(detail::unary(
        t.parameter(s.at("x")), "bad_tanh", [](double v) { return std::tanh(v); },
        [](double v) { return 1.001 * (1.0 - std::tanh(v) * std::tanh(v)); }));
  });
  EXPECT_GT(r.max_rel_error, 5e-4);
  EXPECT_LT(r.roundoff, 1e-9);
}

TEST(GradCheck, Matmul) {
  auto s = store_with({{"a", random_tensor({3, 4}, 1)}, {"b", random_tensor({4, 2}, 2)}});
  auto r = check_gradients(s, [&](Tape& t) { return probe(matmul(t.parameter(s.at("a")), t.parameter(s.at("b")))); });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, MatmulTransposed) {
  auto s = store_with({{"a", random_tensor({3, 4}, 1)}, {"b", random_tensor({5, 4}, 2)}});
  auto r = check_gradients(s, [&](Tape& t) { return probe(matmul_nt(t.parameter(s.at("a")), t.parameter(s.at("b")))); });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, ElementwiseArithmetic) {
  auto s = store_with({{"a", random_tensor({3, 3}, 1)}, {"b", random_tensor({3, 3}, 2)}});
  auto r = check_gradients(s, [&](Tape& t) {
    Var a = t.parameter(s.at("a")), b = t.parameter(s.at("b"));
    return probe(add_scalar(scale(add(mul(a, b), sub(a, b)), 1.7), 0.3));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, AddRowSumMean) {
  auto s = store_with({{"a", random_tensor({4, 3}, 1)}, {"bias", random_tensor({3}, 2)}});
  auto r = check_gradients(s, [&](Tape& t) {
    Var x = add_row(t.parameter(s.at("a")), t.parameter(s.at("bias")));
    return add(probe(x), scale(mean(mul(x, x)), 2.0));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, LogExp) {
  Tensor pos = random_tensor({2, 3}, 1);
  for (double& v : pos.data) v = std::abs(v) + 0.5;
  auto s = store_with({{"a", pos}});
  auto r = check_gradients(s, [&](Tape& t) {
    Var a = t.parameter(s.at("a"));
    return probe(add(log(a), exp(scale(a, 0.3))));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, Activations) {
  Tensor x = random_tensor({4, 5}, 3);
  for (double& v : x.data)
    if (std::abs(v) < 0.05) v += 0.2;  // keep away from the LeakyReLU kink
  auto s = store_with({{"x", x}});
  for (int which = 0; which < 4; ++which) {
    auto r = check_gradients(s, [&](Tape& t) {
      Var a = t.parameter(s.at("x"));
      switch (which) {
        case 0: return probe(leaky_relu(a, 0.01));
        case 1: return probe(gelu(a));
        case 2: return probe(sigmoid(a));
        default: return probe(tanh(a));
      }
    });
    EXPECT_LT(r.max_rel_error, kTol) << "activation " << which << " " << r.worst;
  }
}

TEST(GradCheck, LayerNorm) {
  auto s = store_with({{"x", random_tensor({3, 6}, 1)}, {"g", random_tensor({6}, 2)}, {"b", random_tensor({6}, 3)}});
  auto r = check_gradients(s, [&](Tape& t) {
    return probe(layer_norm(t.parameter(s.at("x")), t.parameter(s.at("g")), t.parameter(s.at("b"))));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, SoftmaxRows) {
  auto s = store_with({{"x", random_tensor({3, 5}, 1)}});
  auto r = check_gradients(s, [&](Tape& t) { return probe(softmax_rows(t.parameter(s.at("x")))); });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, MaskedAttentionWithBlockedEntries) {
  const std::size_t L = 4, D = 6;
  AttentionMask mask = AttentionMask::open(L);
  mask.additive[0 * L + 2] = kBlocked;
  mask.additive[1 * L + 3] = kBlocked;
  mask.additive[3 * L + 0] = -0.7;  // finite additive bias
  auto s = store_with(
      {{"q", random_tensor({2 * L, D}, 1)}, {"k", random_tensor({2 * L, D}, 2)}, {"v", random_tensor({2 * L, D}, 3)}});
  auto r = check_gradients(s, [&](Tape& t) {
    return probe(masked_attention(t.parameter(s.at("q")), t.parameter(s.at("k")), t.parameter(s.at("v")), mask, 2));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, GatherConcatBlend) {
  auto s = store_with({{"a", random_tensor({3, 4}, 1)}, {"b", random_tensor({2, 4}, 2)}});
  auto r = check_gradients(s, [&](Tape& t) {
    Var a = t.parameter(s.at("a")), b = t.parameter(s.at("b"));
    Var cat = concat_rows({a, b});
    Var g = gather_rows(cat, {4, -1, 0, 0, 2});
    Var other = gather_rows(a, {1, 1, 2, 0, -1});
    return probe(blend_rows(g, other, {1, 0, 1, 0, 1}));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, DropoutWithFixedMask) {
  auto s = store_with({{"x", random_tensor({4, 4}, 1)}});
  auto r = check_gradients(s, [&](Tape& t) {
    Rng rng(99);
    return probe(dropout(t.parameter(s.at("x")), 0.3, rng));
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, CrossEntropyOverVisibleEntries) {
  auto s = store_with({{"z", random_tensor({3, 4}, 5)}});
  std::vector<char> blocked(12, 0);
  blocked[1] = blocked[7] = 1;
  auto r = check_gradients(s, [&](Tape& t) {
    return softmax_cross_entropy(block_entries(t.parameter(s.at("z")), blocked), {0, 2, 3});
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(GradCheck, AverageAndDistillation) {
  auto s = store_with({{"a", random_tensor({2, 4}, 1)}, {"b", random_tensor({2, 4}, 2)}});
  const Tensor teacher = random_tensor({2, 4}, 3);
  auto r = check_gradients(s, [&](Tape& t) {
    Var avg = average({t.parameter(s.at("a")), t.parameter(s.at("b"))});
    return distill_kl(teacher, avg, 0.7);
  });
  EXPECT_LT(r.max_rel_error, kTol) << r.worst;
}

TEST(Autodiff, BlockedAttentionKeysContributeNothing) {
  const std::size_t L = 3, D = 2;
  AttentionMask mask = AttentionMask::open(L);
  for (std::size_t i = 0; i < L; ++i) mask.additive[i * L + 1] = kBlocked;
  ParameterStore s;
  Parameter& q = s.create("q", random_tensor({L, D}, 1));
  Parameter& k = s.create("k", random_tensor({L, D}, 2));
  Parameter& v = s.create("v", random_tensor({L, D}, 3));
  Tape t1;
  Var o1 = masked_attention(t1.parameter(q), t1.parameter(k), t1.parameter(v), mask, 1);
  t1.backward(probe(o1));
  for (std::size_t c = 0; c < D; ++c) {
    EXPECT_EQ(k.grad(1, c), 0.0);
    EXPECT_EQ(v.grad(1, c), 0.0);
  }
  v.value(1, 0) += 100.0;
  k.value(1, 1) -= 50.0;
  Tape t2;
  Var o2 = masked_attention(t2.parameter(q), t2.parameter(k), t2.parameter(v), mask, 1);
  EXPECT_EQ(o1.value(), o2.value());
}

TEST(Autodiff, FullyMaskedRowOutputsZero) {
  AttentionMask mask = AttentionMask::open(2);
  mask.additive[0] = mask.additive[1] = kBlocked;
  Tape t;
  Var x = t.constant(random_tensor({2, 2}, 1));
  const Tensor& out = masked_attention(x, x, x, mask, 1).value();
  EXPECT_EQ(out(0, 0), 0.0);
  EXPECT_EQ(out(0, 1), 0.0);
}

TEST(Autodiff, ParameterLeafIsSharedAndGradientsAccumulate) {
  ParameterStore s;
  Parameter& p = s.create("p", Tensor(Shape{2}, std::vector<double>{1.0, 2.0}));
  Tape t;
  Var a = t.parameter(p), b = t.parameter(p);
  EXPECT_EQ(a.id(), b.id());
  const auto touched = t.backward(sum(mul(a, b)));  // d/dp sum(p^2) = 2p
  ASSERT_EQ(touched.size(), 1u);
  EXPECT_EQ(p.grad.data, (std::vector<double>{2.0, 4.0}));
  Tape t2;
  t2.backward(sum(t2.parameter(p)));
  EXPECT_EQ(p.grad.data, (std::vector<double>{3.0, 5.0}));
}

TEST(Autodiff, GradientSetIsSortedAndSkipsUntouched) {
  ParameterStore s;
  Parameter& z = s.create("zeta", Tensor::scalar(1.0));
  Parameter& a = s.create("alpha", Tensor::scalar(2.0));
  s.create("unused", Tensor::scalar(3.0));
  Tape t;
  const auto touched = t.backward(mul(t.parameter(z), t.parameter(a)));
  ASSERT_EQ(touched.size(), 2u);
  EXPECT_EQ(touched[0]->name, "alpha");
  EXPECT_EQ(touched[1]->name, "zeta");
}

TEST(Autodiff, DetachStopsGradient) {
  ParameterStore s;
  Parameter& p = s.create("p", Tensor::scalar(3.0));
  Tape t;
  Var x = t.parameter(p);
  t.backward(mul(x, detach(x)));  // d/dp (p * const(p)) = p
  EXPECT_EQ(p.grad.item(), 3.0);
}

TEST(Autodiff, Errors) {
  Tape t;
  Var m = t.constant(Tensor::matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(m), Error);
  EXPECT_THROW(log(t.constant(Tensor::scalar(-1.0))), Error);
  EXPECT_THROW(exp(t.constant(Tensor::scalar(1000.0))), Error);
  EXPECT_THROW(matmul(m, t.constant(Tensor::matrix(3, 2))), Error);
  Tape other;
  EXPECT_THROW(add(m, other.constant(Tensor::matrix(2, 2))), Error);
  Tape frozen(false);
  EXPECT_THROW(frozen.backward(frozen.constant(Tensor::scalar(1.0))), Error);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradientSign) {
  ParameterStore s;
  Parameter& p = s.create("p", Tensor(Shape{3}, std::vector<double>{0.0, 1.0, -2.0}));
  Adam adam(s, {0.1});
  p.grad.data = {0.5, -3.0, 1e-3};
  adam.step();
  // With bias correction the first update is lr * g / (|g| + eps).
  EXPECT_NEAR(p.value.data[0], 0.0 - 0.1 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value.data[1], 1.0 + 0.1 * 3.0 / (3.0 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value.data[2], -2.0 - 0.1 * 1e-3 / (1e-3 + 1e-8), 1e-12);
  EXPECT_EQ(p.grad.data, (std::vector<double>{0.0, 0.0, 0.0}));
  EXPECT_EQ(adam.steps(), 1);
}

TEST(Adam, SecondStepMatchesHandComputation) {
  ParameterStore s;
  Parameter& p = s.create("p", Tensor::scalar(0.0));
  AdamOptions o{0.01};
  Adam adam(s, o);
  p.grad.data = {1.0};
  adam.step();
  p.grad.data = {-2.0};
  adam.step();
  const double m = o.beta1 * (1 - o.beta1) * 1.0 + (1 - o.beta1) * -2.0;
  const double v = o.beta2 * (1 - o.beta2) * 1.0 + (1 - o.beta2) * 4.0;
  const double mh = m / (1 - o.beta1 * o.beta1), vh = v / (1 - o.beta2 * o.beta2);
  const double expected = -0.01 * 1.0 / (1.0 + 1e-8) - 0.01 * mh / (std::sqrt(vh) + 1e-8);
  EXPECT_NEAR(p.value.item(), expected, 1e-12);
}

TEST(Adam, MinimizesAQuadratic) {
  ParameterStore s;
  Parameter& p = s.create("p", Tensor(Shape{2}, std::vector<double>{3.0, -4.0}));
  Adam adam(s, {0.05});
  for (int i = 0; i < 2000; ++i) {
    Tape t;
    Var x = t.parameter(p);
    t.backward(sum(mul(x, x)));
    adam.step();
  }
  EXPECT_LT(std::abs(p.value.data[0]), 1e-2);
  EXPECT_LT(std::abs(p.value.data[1]), 1e-2);
}

TEST(Adam, RejectsBadInput) {
  ParameterStore s;
  Parameter& p = s.create("p", Tensor::scalar(0.0));
  EXPECT_THROW(Adam(s, {0.0}), Error);
  Adam adam(s, {0.1});
  p.grad.data = {std::nan("")};
  EXPECT_THROW(adam.step(), Error);
}

TEST(Checkpoint, RoundTripAndValidation) {
  const auto dir = std::filesystem::temp_directory_path() / "odmt_ckpt_test";
  std::filesystem::create_directories(dir);
  ParameterStore a;
  Rng rng(3);
  a.xavier("w", 3, 2, rng);
  a.normal("e", {4}, 1.0, rng);
  save_parameters(dir / "a.odmt", a);

  ParameterStore b;
  b.zeros("w", {3, 2});
  b.zeros("e", {4});
  load_parameters(dir / "a.odmt", b);
  EXPECT_EQ(b.at("w").value, a.at("w").value);
  EXPECT_EQ(b.at("e").value, a.at("e").value);

  ParameterStore wrong;
  wrong.zeros("w", {2, 3});
  wrong.zeros("e", {4});
  EXPECT_THROW(load_parameters(dir / "a.odmt", wrong), Error);

  std::ofstream(dir / "bad.odmt") << "NOTACKPT";
  EXPECT_THROW(read_checkpoint(dir / "bad.odmt"), Error);
  EXPECT_THROW(read_checkpoint(dir / "missing.odmt"), Error);
  std::filesystem::remove_all(dir);
}

TEST(ParameterStore, DuplicateNamesAndSnapshots) {
  ParameterStore s;
  s.zeros("x", {2});
  EXPECT_THROW(s.zeros("x", {2}), Error);
  auto snap = s.snapshot();
  s.at("x").value.data[0] = 5.0;
  s.restore(snap);
  EXPECT_EQ(s.at("x").value.data[0], 0.0);
}

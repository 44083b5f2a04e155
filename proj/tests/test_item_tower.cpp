#include <gtest/gtest.h>

#include <set>

#include "grad_check.hpp"
#include "odmt/item_tower.hpp"

using namespace odmt;
using odmt::testing::check_gradients;
using odmt::testing::probe;
using odmt::testing::random_tensor;

namespace {

std::set<std::pair<std::size_t, std::size_t>> blocked_cells(const AttentionMask& m) {
  std::set<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t i = 0; i < m.seq_len; ++i)
    for (std::size_t j = 0; j < m.seq_len; ++j)
      if (m.blocked(0, i, j)) out.emplace(i, j);
  return out;
}

Catalog toy_catalog(std::size_t n_items, std::size_t n_v, std::size_t n_t, std::size_t d_v, std::size_t d_t,
                    std::uint64_t seed) {
  Catalog c;
  c.n_items = n_items;
  c.n_v = n_v;
  c.n_t = n_t;
  c.d_v = d_v;
  c.d_t = d_t;
  c.visual = random_tensor({n_items * (n_v + 1) * d_v}, seed).data;
  c.textual = random_tensor({n_items * (n_t + 1) * d_t}, seed + 1).data;
  c.validate();
  return c;
}

ItemTowerConfig tower_config(FstKind fst = FstKind::imt) {
  ItemTowerConfig c;
  c.fst = fst;
  c.dim = 8;
  c.heads = 2;
  c.dropout = 0.0;
  return c;
}

struct Built {
  ParameterStore store;
  std::unique_ptr<ItemTower> tower;
};

Built build(const ItemTowerConfig& cfg, const Catalog& cat, std::uint64_t seed = 1) {
  Built b;
  Rng rng(seed);
  b.tower = std::make_unique<ItemTower>(b.store, cfg, cat, rng);
  return b;
}

void expect_bit_identical(const Tensor& a, const Tensor& b) {
  ASSERT_EQ(a.shape, b.shape);
  for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(a.data[i], b.data[i]) << "entry " << i;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

}  // namespace

TEST(ImtMask, SinglePatchSingleToken) {
  const auto m = build_imt_mask(1, 1);
  EXPECT_EQ(m.seq_len, 5u);
  const std::set<std::pair<std::size_t, std::size_t>> want{{0, 2}, {1, 2}, {3, 2}, {4, 2}};
  EXPECT_EQ(blocked_cells(m), want);
}

TEST(ImtMask, TwoPatchesThreeTokens) {
  const auto m = build_imt_mask(2, 3);
  EXPECT_EQ(m.seq_len, 8u);
  std::set<std::pair<std::size_t, std::size_t>> want;
  for (std::size_t r : {0, 1, 2, 4, 5, 6, 7}) want.emplace(r, 3);
  EXPECT_EQ(blocked_cells(m), want);
}

TEST(ImtMask, BlockedCountAndOpenIdRow) {
  for (std::size_t nv = 1; nv <= 5; ++nv)
    for (std::size_t nt = 1; nt <= 5; ++nt) {
      const auto m = build_imt_mask(nv, nt);
      EXPECT_EQ(m.blocked_count(), (nv + 1) + (nt + 1));
      for (std::size_t j = 0; j < m.seq_len; ++j) EXPECT_FALSE(m.blocked(0, nv + 1, j));
    }
  EXPECT_EQ(build_imt_mask(2, 2, false).blocked_count(), 0u);
  EXPECT_THROW(build_imt_mask(0, 2), Error);
  EXPECT_THROW(build_imt_mask(2, 0), Error);
}

namespace {

struct ProbeResult {
  Tensor visual, text, id;
};

ProbeResult imt_with_id(const Built& b, const Catalog& cat, const std::vector<std::size_t>& items, const Tensor& ids) {
  Tape tape(false);
  ForwardContext ctx{tape};
  const auto enc = b.tower->imt_forward(ctx, cat, items, tape.constant(ids));
  return {enc.visual_cls.value(), enc.text_cls.value(), enc.id.value()};
}

}  // namespace

TEST(ImtForward, IdNoiseInvisibleToModalityOutputsUnderMask) {
  const auto cat = toy_catalog(5, 3, 4, 6, 6, 10);
  const auto b = build(tower_config(), cat);
  const std::vector<std::size_t> items{0, 2, 4};
  const Tensor clean = b.tower->id_table()->value;
  Tensor ids = Tensor::matrix(3, 6);
  for (std::size_t g = 0; g < 3; ++g) std::ranges::copy(clean.row(items[g]), ids.row(g).begin());
  const auto a = imt_with_id(b, cat, items, ids);
  const auto n = imt_with_id(b, cat, items, random_tensor({3, 6}, 99, 5.0));
  expect_bit_identical(a.visual, n.visual);
  expect_bit_identical(a.text, n.text);
  EXPECT_GT(max_abs_diff(a.id, n.id), 1e-3);
}

TEST(ImtForward, IdNoiseLeaksWithoutMask) {
  const auto cat = toy_catalog(5, 3, 4, 6, 6, 10);
  auto cfg = tower_config();
  cfg.id_mask = false;
  const auto b = build(cfg, cat);
  const std::vector<std::size_t> items{0, 2, 4};
  const auto a = imt_with_id(b, cat, items, random_tensor({3, 6}, 98));
  const auto n = imt_with_id(b, cat, items, random_tensor({3, 6}, 99, 5.0));
  EXPECT_GT(max_abs_diff(a.visual, n.visual), 1e-6);
  EXPECT_GT(max_abs_diff(a.text, n.text), 1e-6);
}

namespace {

// Gradient of probes on the modality outputs with respect to the ID input.
Tensor id_input_gradient(bool id_mask) {
  const auto cat = toy_catalog(4, 2, 3, 6, 6, 20);
  auto cfg = tower_config();
  cfg.id_mask = id_mask;
  const auto b = build(cfg, cat);
  ParameterStore extra;
  Parameter& ids = extra.create("ids", random_tensor({2, 6}, 5));
  Tape tape;
  ForwardContext ctx{tape};
  const std::vector<std::size_t> items{1, 3};
  const auto enc = b.tower->imt_forward(ctx, cat, items, tape.parameter(ids));
  tape.backward(add(probe(enc.visual_cls, 1), probe(enc.text_cls, 2)));
  return ids.grad;
}

}  // namespace

TEST(ImtForward, AnalyticGradientThroughMaskIsExactlyZero) {
  const Tensor masked = id_input_gradient(true);
  for (double g : masked.data) EXPECT_EQ(g, 0.0);
  const Tensor open = id_input_gradient(false);
  double norm = 0.0;
  for (double g : open.data) norm += g * g;
  EXPECT_GT(norm, 1e-12);
}

TEST(ImtForward, RejectsTokenCountMismatch) {
  const auto cat = toy_catalog(3, 2, 3, 4, 4, 1);
  const auto other = toy_catalog(3, 3, 3, 4, 4, 1);
  const auto b = build(tower_config(), cat);
  Tape tape(false);
  ForwardContext ctx{tape};
  const std::vector<std::size_t> items{0};
  EXPECT_THROW(b.tower->imt_forward(ctx, other, items, tape.constant(Tensor::matrix(1, 4))), Error);
}

TEST(ImtForward, PatchOrderDoesNotMatter) {
  auto cat = toy_catalog(3, 3, 2, 4, 4, 30);
  const auto b = build(tower_config(), cat);
  const std::vector<std::size_t> items{0, 1, 2};
  auto run = [&](const Catalog& c) {
    Tape tape(false);
    ForwardContext ctx{tape};
    const auto out = b.tower->encode(ctx, c, items);
    return std::array<Tensor, 3>{out[Branch::visual].value(), out[Branch::text].value(), out[Branch::id].value()};
  };
  const auto before = run(cat);
  // swap patch rows 0 and 2 of every item; the cls row stays last
  for (std::size_t i = 0; i < cat.n_items; ++i) {
    double* base = cat.visual.data() + i * cat.visual_rows() * cat.d_v;
    std::swap_ranges(base, base + cat.d_v, base + 2 * cat.d_v);
  }
  const auto after = run(cat);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_LT(max_abs_diff(before[k], after[k]), 1e-12);
}

TEST(ItemTower, HeadOutputsHaveModelWidth) {
  for (auto [nv, nt] : {std::pair<std::size_t, std::size_t>{1, 1}, {2, 5}, {4, 8}}) {
    for (FstKind fst : {FstKind::imt, FstKind::separate, FstKind::dnn}) {
      const auto cat = toy_catalog(6, nv, nt, 5, 7, 3);
      auto cfg = tower_config(fst);
      cfg.id_init = IdInit::text;
      const auto b = build(cfg, cat);
      Tape tape(false);
      ForwardContext ctx{tape};
      const std::vector<std::size_t> items{5, 0, 3, 3};
      const auto out = b.tower->encode(ctx, cat, items);
      for (Branch br : kBranches) {
        ASSERT_TRUE(out[br].valid());
        EXPECT_EQ(out[br].value().shape, (Shape{4, 8}));
      }
    }
  }
}

TEST(ItemTower, BranchSetFollowsInputs) {
  const auto cat = toy_catalog(4, 2, 2, 4, 4, 3);
  auto cfg = tower_config();
  cfg.include_id = false;
  auto b = build(cfg, cat);
  EXPECT_EQ(b.tower->branches(), (std::vector<Branch>{Branch::visual, Branch::text}));
  EXPECT_EQ(b.store.find("item.id_table"), nullptr);
  {
    Tape tape(false);
    ForwardContext ctx{tape};
    const std::vector<std::size_t> items{0, 1};
    const auto out = b.tower->encode(ctx, cat, items);
    EXPECT_FALSE(out[Branch::id].valid());
    EXPECT_EQ(out[Branch::visual].value().shape, (Shape{2, 8}));
  }
  cfg = tower_config();
  cfg.include_modalities = false;
  b = build(cfg, cat);
  EXPECT_EQ(b.tower->branches(), (std::vector<Branch>{Branch::id}));
  EXPECT_EQ(b.store.find("item.proj.visual.weight"), nullptr);
  cfg.include_id = false;
  EXPECT_THROW(build(cfg, cat), Error);
}

TEST(Heads, IdentityWeightsPassPositiveInputThrough) {
  ParameterStore store;
  Rng rng(1);
  MlpHead head(store, "h", 3, 0.01, rng);
  for (Parameter* w : {head.fc1().weight, head.fc2().weight}) {
    w->value.zero();
    for (std::size_t i = 0; i < 3; ++i) w->value.data[i * 3 + i] = 1.0;
  }
  Tape tape(false);
  ForwardContext ctx{tape};
  const Tensor x(Shape{2, 3}, {0.5, 1.0, 2.0, 3.0, 0.25, 7.0});
  expect_bit_identical(head(ctx, tape.constant(x)).value(), x);
  // negative entries come out scaled by the slope
  const Tensor neg(Shape{1, 3}, {-2.0, 1.0, -0.5});
  const Tensor y = head(ctx, tape.constant(neg)).value();
  EXPECT_DOUBLE_EQ(y.data[0], -0.02);
  EXPECT_DOUBLE_EQ(y.data[1], 1.0);
  EXPECT_DOUBLE_EQ(y.data[2], -0.005);
}

TEST(Heads, BranchesOwnDistinctParameters) {
  const auto cat = toy_catalog(3, 1, 1, 4, 4, 3);
  const auto b = build(tower_config(), cat);
  for (const char* name : {"item.head.v.fc1.weight", "item.head.t.fc1.weight", "item.head.id.fc1.weight",
                           "item.head.v.fc2.weight", "item.head.t.fc2.weight", "item.head.id.fc2.weight"})
    EXPECT_NE(b.store.find(name), nullptr) << name;
}

TEST(Heads, GradientMatchesFiniteDifferences) {
  ParameterStore store;
  Rng rng(4);
  MlpHead head(store, "h", 4, 0.01, rng);
  const Tensor x = random_tensor({3, 4}, 8);
  const auto r = check_gradients(store, [&](Tape& tape) {
    ForwardContext ctx{tape};
    return probe(head(ctx, tape.constant(x)));
  });
  EXPECT_EQ(r.checked, 2u * (16 + 4));
  EXPECT_LT(r.max_rel_error, 1e-6) << r.worst;
}

TEST(ItemTower, FullTowerGradientMatchesFiniteDifferences) {
  const auto cat = toy_catalog(3, 1, 2, 3, 3, 12);
  auto cfg = tower_config();
  cfg.dim = 4;
  auto b = build(cfg, cat);
  const std::vector<std::size_t> items{0, 2};
  const auto r = check_gradients(b.store, [&](Tape& tape) {
    ForwardContext ctx{tape};
    const auto out = b.tower->encode(ctx, cat, items);
    return add(add(probe(out[Branch::visual], 1), probe(out[Branch::text], 2)), probe(out[Branch::id], 3));
  });
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
}

TEST(IdInit, AverageOfClsRows) {
  Catalog c;
  c.n_items = 1;
  c.n_v = 1;
  c.n_t = 1;
  c.d_v = c.d_t = 2;
  c.visual = {9.0, 9.0, 2.0, 0.0};   // patch, then cls
  c.textual = {0.0, 2.0, 7.0, 7.0};  // cls, then token
  Rng rng(0);
  const Tensor t = init_id_table(c, IdInit::avg_modal, rng);
  EXPECT_EQ(t.data, (std::vector<double>{1.0, 1.0}));
}

TEST(IdInit, SingleModalityCopiesAndRandomIsSeeded) {
  const auto cat = toy_catalog(4, 2, 3, 5, 6, 2);
  Rng rng(0);
  const Tensor text = init_id_table(cat, IdInit::text, rng);
  const Tensor image = init_id_table(cat, IdInit::image, rng);
  ASSERT_EQ(text.shape, (Shape{4, 6}));
  ASSERT_EQ(image.shape, (Shape{4, 5}));
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_TRUE(std::ranges::equal(text.row(i), cat.textual_cls(i)));
    EXPECT_TRUE(std::ranges::equal(image.row(i), cat.visual_cls(i)));
  }
  Rng r1(77), r2(77);
  EXPECT_EQ(init_id_table(cat, IdInit::random, r1).data, init_id_table(cat, IdInit::random, r2).data);
}

TEST(IdInit, AverageNeedsMatchingWidths) {
  const auto cat = toy_catalog(2, 1, 1, 4, 5, 2);
  Rng rng(0);
  EXPECT_THROW(init_id_table(cat, IdInit::avg_modal, rng), Error);
  EXPECT_THROW(build(tower_config(), cat), Error);
}

TEST(SeparateFst, DepthPerModality) {
  const auto cat = toy_catalog(3, 2, 2, 4, 4, 3);
  for (std::size_t depth : {1u, 2u}) {
    auto cfg = tower_config(FstKind::separate);
    cfg.separate_layers = depth;
    const auto b = build(cfg, cat);
    for (const char* stack : {"item.fst_visual", "item.fst_text"}) {
      for (std::size_t l = 0; l < 3; ++l) {
        const std::string name = std::string(stack) + ".layer" + std::to_string(l) + ".attn.query.weight";
        EXPECT_EQ(b.store.find(name) != nullptr, l < depth) << name;
      }
    }
    EXPECT_EQ(b.store.find("item.imt.layer0.attn.query.weight"), nullptr);
  }
}

TEST(SeparateFst, ModalityOutputsIgnoreIdTable) {
  const auto cat = toy_catalog(4, 2, 2, 4, 4, 3);
  const auto b = build(tower_config(FstKind::separate), cat);
  const std::vector<std::size_t> items{0, 1, 3};
  auto run = [&] {
    Tape tape(false);
    ForwardContext ctx{tape};
    const auto out = b.tower->encode(ctx, cat, items);
    return std::array<Tensor, 3>{out[Branch::visual].value(), out[Branch::text].value(), out[Branch::id].value()};
  };
  const auto before = run();
  b.tower->id_table()->value = random_tensor(b.tower->id_table()->value.shape, 55, 3.0);
  const auto after = run();
  expect_bit_identical(before[0], after[0]);
  expect_bit_identical(before[1], after[1]);
  EXPECT_GT(max_abs_diff(before[2], after[2]), 1e-6);
}

#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "odmt/autodiff.hpp"
#include "odmt/datagen.hpp"
#include "odmt/nn.hpp"

namespace odmt {

enum class Branch : std::size_t { visual = 0, text = 1, id = 2 };
inline constexpr std::array<Branch, 3> kBranches = {Branch::visual, Branch::text, Branch::id};

inline const char* branch_name(Branch b) {
  switch (b) {
    case Branch::visual: return "v";
    case Branch::text: return "t";
    case Branch::id: return "id";
  }
  return "?";
}

/// One optional value per branch.
template <class T>
struct PerBranch {
  std::array<T, 3> slot{};
  T& operator[](Branch b) { return slot[static_cast<std::size_t>(b)]; }
  const T& operator[](Branch b) const { return slot[static_cast<std::size_t>(b)]; }
};

enum class FstKind { imt, separate, dnn };
enum class IdInit { avg_modal, text, image, random };

struct ItemTowerConfig {
  FstKind fst = FstKind::imt;
  std::size_t dim = 32;
  std::size_t layers = 2;           // IMT depth
  std::size_t separate_layers = 2;  // per-modality depth for FstKind::separate
  std::size_t heads = 2;
  double dropout = 0.1;
  bool id_mask = true;
  IdInit id_init = IdInit::avg_modal;
  bool include_id = true;
  bool include_modalities = true;
  double leaky_slope = 0.01;
  double random_init_std = 0.02;
};

/// Additive IMT mask over the token layout [visual 0..n_v | ID n_v+1 | text n_v+2..n_v+n_t+2].
/// With the ID mask on, every modality row is barred from the ID column;
/// the ID row itself sees everything.
inline AttentionMask build_imt_mask(std::size_t n_v, std::size_t n_t, bool id_mask = true) {
  if (n_v == 0 || n_t == 0) throw Error("build_imt_mask: patch and token counts must be positive");
  const std::size_t side = n_v + n_t + 3;
  AttentionMask mask = AttentionMask::open(side);
  if (!id_mask) return mask;
  const std::size_t id_col = n_v + 1;
  for (std::size_t r = 0; r < side; ++r)
    if (r != id_col) mask.additive[r * side + id_col] = kBlocked;
  return mask;
}

/// Width of the ID table for a given init mode.
inline std::size_t id_table_dim(const Catalog& cat, IdInit mode) {
  switch (mode) {
    case IdInit::avg_modal:
      if (cat.d_v != cat.d_t)
        throw Error("init_id_table: averaging cls features needs d_v == d_t (got " + std::to_string(cat.d_v) + " vs " +
                    std::to_string(cat.d_t) + "); choose id_init = text or image");
      return cat.d_v;
    case IdInit::text: return cat.d_t;
    case IdInit::image:
    case IdInit::random: return cat.d_v;
  }
  return cat.d_v;
}

inline Tensor init_id_table(const Catalog& cat, IdInit mode, Rng& rng, double random_std = 0.02) {
  const std::size_t dim = id_table_dim(cat, mode);
  Tensor table = Tensor::matrix(cat.n_items, dim);
  std::normal_distribution<double> normal(0.0, random_std);
  for (std::size_t i = 0; i < cat.n_items; ++i) {
    auto row = table.row(i);
    switch (mode) {
      case IdInit::avg_modal: {
        const auto v = cat.visual_cls(i);
        const auto t = cat.textual_cls(i);
        for (std::size_t k = 0; k < dim; ++k) row[k] = (v[k] + t[k]) / 2.0;
        break;
      }
      case IdInit::text: std::ranges::copy(cat.textual_cls(i), row.begin()); break;
      case IdInit::image: std::ranges::copy(cat.visual_cls(i), row.begin()); break;
      case IdInit::random:
        for (double& x : row) x = normal(rng);
        break;
    }
  }
  return table;
}

/// Raw feature rows for a list of items, as constants: [N*(n_v+1), d_v] and [N*(n_t+1), d_t].
inline Tensor gather_visual(const Catalog& cat, std::span<const std::size_t> items, bool cls_only = false) {
  const std::size_t rows = cls_only ? 1 : cat.visual_rows();
  Tensor out = Tensor::matrix(items.size() * rows, cat.d_v);
  for (std::size_t g = 0; g < items.size(); ++g) {
    auto src = cls_only ? cat.visual_cls(items[g]) : cat.visual_of(items[g]);
    std::ranges::copy(src, out.data.begin() + static_cast<std::ptrdiff_t>(g * rows * cat.d_v));
  }
  return out;
}

inline Tensor gather_textual(const Catalog& cat, std::span<const std::size_t> items, bool cls_only = false) {
  const std::size_t rows = cls_only ? 1 : cat.textual_rows();
  Tensor out = Tensor::matrix(items.size() * rows, cat.d_t);
  for (std::size_t g = 0; g < items.size(); ++g) {
    auto src = cls_only ? cat.textual_cls(items[g]) : cat.textual_of(items[g]);
    std::ranges::copy(src, out.data.begin() + static_cast<std::ptrdiff_t>(g * rows * cat.d_t));
  }
  return out;
}

/// Outputs of the fusion encoder before the per-branch heads; invalid Vars
/// mark branches the variant does not produce.
struct EncodedItems {
  Var visual_cls, id, text_cls;
};

/// Maps raw item features to final per-branch item vectors D^v, D^t, D^id.
class ItemTower {
 public:
  ItemTower(ParameterStore& store, const ItemTowerConfig& cfg, const Catalog& cat, Rng& rng) : cfg_(cfg) {
    if (!cfg.include_id && !cfg.include_modalities) throw Error("item tower: no input branch enabled");
    n_v_ = cat.n_v;
    n_t_ = cat.n_t;
    const TransformerOptions topts{cfg.dim, cfg.heads, 4, cfg.dropout};
    if (cfg.include_modalities) {
      proj_v_ = Linear(store, "item.proj.visual", cat.d_v, cfg.dim, rng);
      proj_t_ = Linear(store, "item.proj.text", cat.d_t, cfg.dim, rng);
    }
    if (cfg.include_id) {
      id_table_ = &store.create("item.id_table", init_id_table(cat, cfg.id_init, rng, cfg.random_init_std));
      proj_id_ = Linear(store, "item.proj.id", id_table_->value.cols(), cfg.dim, rng);
    }
    if (cfg.include_modalities) {
      switch (cfg.fst) {
        case FstKind::imt:
          imt_ = TransformerStack(store, "item.imt", cfg.layers, topts, rng);
          mask_ = cfg.include_id ? build_imt_mask(n_v_, n_t_, cfg.id_mask) : AttentionMask::open(n_v_ + n_t_ + 2);
          break;
        case FstKind::separate:
          fst_v_ = TransformerStack(store, "item.fst_visual", cfg.separate_layers, topts, rng);
          fst_t_ = TransformerStack(store, "item.fst_text", cfg.separate_layers, topts, rng);
          break;
        case FstKind::dnn: break;
      }
      head_v_ = MlpHead(store, "item.head.v", cfg.dim, cfg.leaky_slope, rng);
      head_t_ = MlpHead(store, "item.head.t", cfg.dim, cfg.leaky_slope, rng);
    }
    if (cfg.include_id) head_id_ = MlpHead(store, "item.head.id", cfg.dim, cfg.leaky_slope, rng);
  }

  const ItemTowerConfig& config() const { return cfg_; }
  const AttentionMask& mask() const { return mask_; }
  Parameter* id_table() const { return id_table_; }

  std::vector<Branch> branches() const {
    std::vector<Branch> out;
    if (cfg_.include_modalities) out.insert(out.end(), {Branch::visual, Branch::text});
    if (cfg_.include_id) out.push_back(Branch::id);
    return out;
  }

  /// Raw ID vectors [N, d_id] for the given items.
  Var id_inputs(const ForwardContext& ctx, std::span<const std::size_t> items) const {
    return gather_rows(ctx.param(id_table_), {items.begin(), items.end()});
  }

  /// Projection plus the joint masked Transformer. `id_vectors` replaces the
  /// table lookup so callers can probe the ID path directly.
  EncodedItems imt_forward(const ForwardContext& ctx, const Catalog& cat, std::span<const std::size_t> items,
                           Var id_vectors) const {
    const std::size_t n = items.size();
    check_layout(cat, "imt_forward");
    const std::size_t vr = n_v_ + 1, tr = n_t_ + 1;
    Var pv = proj_v_(ctx, ctx.tape.constant(gather_visual(cat, items)));
    Var pt = proj_t_(ctx, ctx.tape.constant(gather_textual(cat, items)));
    const bool with_id = id_vectors.valid();
    const std::size_t side = vr + tr + (with_id ? 1 : 0);
    if (side != mask_.seq_len) throw Error("imt_forward: token count does not match mask side");
    std::vector<Var> parts{pv};
    if (with_id) parts.push_back(proj_id_(ctx, id_vectors));
    parts.push_back(pt);
    Var pool = concat_rows(parts);
    const std::size_t id_base = n * vr;
    const std::size_t text_base = id_base + (with_id ? n : 0);
    std::vector<std::ptrdiff_t> order;
    order.reserve(n * side);
    for (std::size_t g = 0; g < n; ++g) {
      for (std::size_t r = 0; r < vr; ++r) order.push_back(static_cast<std::ptrdiff_t>(g * vr + r));
      if (with_id) order.push_back(static_cast<std::ptrdiff_t>(id_base + g));
      for (std::size_t r = 0; r < tr; ++r) order.push_back(static_cast<std::ptrdiff_t>(text_base + g * tr + r));
    }
    Var encoded = imt_(ctx, gather_rows(pool, std::move(order)), mask_);
    auto pick = [&](std::size_t offset) {
      std::vector<std::ptrdiff_t> idx(n);
      for (std::size_t g = 0; g < n; ++g) idx[g] = static_cast<std::ptrdiff_t>(g * side + offset);
      return gather_rows(encoded, std::move(idx));
    };
    EncodedItems out;
    out.visual_cls = pick(n_v_);
    if (with_id) out.id = pick(n_v_ + 1);
    out.text_cls = pick(vr + (with_id ? 1 : 0));
    return out;
  }

  /// Per-modality Transformers with no ID participation; ID goes straight to its head.
  EncodedItems separate_forward(const ForwardContext& ctx, const Catalog& cat, std::span<const std::size_t> items) const {
    const std::size_t n = items.size();
    check_layout(cat, "separate_forward");
    const std::size_t vr = n_v_ + 1, tr = n_t_ + 1;
    Var hv = fst_v_(ctx, proj_v_(ctx, ctx.tape.constant(gather_visual(cat, items))), AttentionMask::open(vr));
    Var ht = fst_t_(ctx, proj_t_(ctx, ctx.tape.constant(gather_textual(cat, items))), AttentionMask::open(tr));
    std::vector<std::ptrdiff_t> vi(n), ti(n);
    for (std::size_t g = 0; g < n; ++g) {
      vi[g] = static_cast<std::ptrdiff_t>(g * vr + n_v_);
      ti[g] = static_cast<std::ptrdiff_t>(g * tr);
    }
    EncodedItems out;
    out.visual_cls = gather_rows(hv, std::move(vi));
    out.text_cls = gather_rows(ht, std::move(ti));
    if (cfg_.include_id) out.id = proj_id_(ctx, id_inputs(ctx, items));
    return out;
  }

  EncodedItems dnn_forward(const ForwardContext& ctx, const Catalog& cat, std::span<const std::size_t> items) const {
    EncodedItems out;
    out.visual_cls = proj_v_(ctx, ctx.tape.constant(gather_visual(cat, items, true)));
    out.text_cls = proj_t_(ctx, ctx.tape.constant(gather_textual(cat, items, true)));
    if (cfg_.include_id) out.id = proj_id_(ctx, id_inputs(ctx, items));
    return out;
  }

  EncodedItems encode_raw(const ForwardContext& ctx, const Catalog& cat, std::span<const std::size_t> items) const {
    if (!cfg_.include_modalities) {
      EncodedItems out;
      out.id = proj_id_(ctx, id_inputs(ctx, items));
      return out;
    }
    switch (cfg_.fst) {
      case FstKind::imt: return imt_forward(ctx, cat, items, cfg_.include_id ? id_inputs(ctx, items) : Var{});
      case FstKind::separate: return separate_forward(ctx, cat, items);
      case FstKind::dnn: return dnn_forward(ctx, cat, items);
    }
    throw Error("item tower: unknown FST variant");
  }

  PerBranch<Var> heads(const ForwardContext& ctx, const EncodedItems& enc) const {
    PerBranch<Var> out;
    if (enc.visual_cls.valid()) out[Branch::visual] = head_v_(ctx, enc.visual_cls);
    if (enc.text_cls.valid()) out[Branch::text] = head_t_(ctx, enc.text_cls);
    if (enc.id.valid()) out[Branch::id] = head_id_(ctx, enc.id);
    return out;
  }

  /// Final item embeddings [N, d] per active branch.
  PerBranch<Var> encode(const ForwardContext& ctx, const Catalog& cat, std::span<const std::size_t> items) const {
    return heads(ctx, encode_raw(ctx, cat, items));
  }

 private:
  ItemTowerConfig cfg_;
  void check_layout(const Catalog& cat, const char* who) const {
    if (cat.n_v != n_v_ || cat.n_t != n_t_)
      throw Error(std::string(who) + ": token count does not match the tower's catalog");
  }

  std::size_t n_v_ = 0, n_t_ = 0;
  Linear proj_v_, proj_t_, proj_id_;
  Parameter* id_table_ = nullptr;
  TransformerStack imt_, fst_v_, fst_t_;
  AttentionMask mask_;
  MlpHead head_v_, head_t_, head_id_;
};

}  // namespace odmt

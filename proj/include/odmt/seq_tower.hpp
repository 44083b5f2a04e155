#pragma once

#include <string>
#include <vector>

#include "odmt/autodiff.hpp"
#include "odmt/nn.hpp"

namespace odmt {

enum class Backbone { self_attention, recurrent };

struct SeqTowerConfig {
  Backbone backbone = Backbone::self_attention;
  std::size_t dim = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t max_len = 15;
  double dropout = 0.1;
};

/// Rows of item indices, left-padded to a common length P. Items sit at the
/// right so the last real position is always P-1.
struct PaddedRows {
  std::size_t width = 0;
  std::vector<std::size_t> offset;  // leading pad count per row

  static PaddedRows of(const std::vector<std::vector<std::size_t>>& rows) {
    PaddedRows p;
    for (const auto& r : rows) p.width = std::max(p.width, r.size());
    for (const auto& r : rows) p.offset.push_back(p.width - r.size());
    return p;
  }
};

/// User-sequence encoder: causal self-attention (SASRec-style, learned
/// positions, user vector = last position) or a stacked GRU (final state).
class SeqTower {
 public:
  SeqTower() = default;
  SeqTower(ParameterStore& store, const std::string& name, const SeqTowerConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.max_len == 0) throw Error("seq tower: max_len must be positive");
    if (cfg.backbone == Backbone::self_attention) {
      positions_ = &store.normal(name + ".positions", {cfg.max_len, cfg.dim}, 0.02, rng);
      stack_ = TransformerStack(store, name + ".sasrec", cfg.layers, {cfg.dim, cfg.heads, 4, cfg.dropout}, rng);
    } else {
      for (std::size_t l = 0; l < cfg.layers; ++l)
        gru_.emplace_back(store, name + ".gru.layer" + std::to_string(l), cfg.dim, cfg.dim, rng);
    }
  }

  const SeqTowerConfig& config() const { return cfg_; }

  /// Keeps the most recent max_len entries of each row.
  std::vector<std::vector<std::size_t>> truncate(const std::vector<std::vector<std::size_t>>& rows) const {
    std::vector<std::vector<std::size_t>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) {
      if (r.empty()) throw Error("seq tower: empty sequence");
      const std::size_t keep = std::min(r.size(), cfg_.max_len);
      out.emplace_back(r.end() - static_cast<std::ptrdiff_t>(keep), r.end());
    }
    return out;
  }

  /// User vectors [B, d]. Row entries index into the rows of `items`.
  Var encode_batch(const ForwardContext& ctx, Var items, const std::vector<std::vector<std::size_t>>& rows) const {
    const auto trimmed = truncate(rows);
    const PaddedRows pad = PaddedRows::of(trimmed);
    if (cfg_.backbone == Backbone::recurrent) return run_gru(ctx, items, trimmed, pad);
    Var states = run_attention(ctx, items, trimmed, pad);
    std::vector<std::ptrdiff_t> last(trimmed.size());
    for (std::size_t b = 0; b < trimmed.size(); ++b) last[b] = static_cast<std::ptrdiff_t>(b * pad.width + pad.width - 1);
    return gather_rows(states, std::move(last));
  }

  Var encode_sequence(const ForwardContext& ctx, Var items, const std::vector<std::size_t>& row) const {
    return encode_batch(ctx, items, {row});
  }

  /// All final-layer positions [B*P, d] of the self-attention backbone.
  Var encode_states(const ForwardContext& ctx, Var items, const std::vector<std::vector<std::size_t>>& rows,
                    std::size_t* width = nullptr) const {
    if (cfg_.backbone != Backbone::self_attention) throw Error("encode_states: self-attention backbone only");
    const auto trimmed = truncate(rows);
    const PaddedRows pad = PaddedRows::of(trimmed);
    if (width) *width = pad.width;
    return run_attention(ctx, items, trimmed, pad);
  }

 private:
  Var run_attention(const ForwardContext& ctx, Var items, const std::vector<std::vector<std::size_t>>& rows,
                    const PaddedRows& pad) const {
    const std::size_t B = rows.size(), P = pad.width;
    std::vector<std::ptrdiff_t> item_idx(B * P, -1), pos_idx(B * P, -1);
    AttentionMask mask{P, B, std::vector<double>(B * P * P, 0.0)};
    for (std::size_t b = 0; b < B; ++b) {
      const std::size_t off = pad.offset[b];
      for (std::size_t p = off; p < P; ++p) {
        item_idx[b * P + p] = static_cast<std::ptrdiff_t>(rows[b][p - off]);
        pos_idx[b * P + p] = static_cast<std::ptrdiff_t>(cfg_.max_len - (P - p));
      }
      for (std::size_t i = 0; i < P; ++i)
        for (std::size_t j = 0; j < P; ++j)
          if (j > i || j < off) mask.additive[(b * P + i) * P + j] = kBlocked;
    }
    Var x = add(gather_rows(items, std::move(item_idx)), gather_rows(ctx.param(positions_), std::move(pos_idx)));
    return stack_(ctx, ctx.drop(x, cfg_.dropout), mask);
  }

  Var run_gru(const ForwardContext& ctx, Var items, const std::vector<std::vector<std::size_t>>& rows,
              const PaddedRows& pad) const {
    const std::size_t B = rows.size(), P = pad.width;
    std::vector<Var> inputs;
    std::vector<std::vector<char>> live(P, std::vector<char>(B, 0));
    for (std::size_t p = 0; p < P; ++p) {
      std::vector<std::ptrdiff_t> idx(B, -1);
      for (std::size_t b = 0; b < B; ++b) {
        if (p < pad.offset[b]) continue;
        idx[b] = static_cast<std::ptrdiff_t>(rows[b][p - pad.offset[b]]);
        live[p][b] = 1;
      }
      inputs.push_back(gather_rows(items, std::move(idx)));
    }
    const std::size_t d = items.value().cols();
    Var h;
    for (const GruCell& cell : gru_) {
      h = ctx.tape.constant(Tensor::matrix(B, d));
      std::vector<Var> outputs;
      for (std::size_t p = 0; p < P; ++p) {
        h = blend_rows(cell(ctx, inputs[p], h), h, live[p]);
        outputs.push_back(h);
      }
      for (auto& o : outputs) o = ctx.drop(o, cfg_.dropout);
      inputs = std::move(outputs);
    }
    return h;
  }

  SeqTowerConfig cfg_;
  Parameter* positions_ = nullptr;
  TransformerStack stack_;
  std::vector<GruCell> gru_;
};

}  // namespace odmt

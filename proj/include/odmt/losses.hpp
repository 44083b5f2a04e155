#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "odmt/autodiff.hpp"
#include "odmt/item_tower.hpp"

namespace odmt {

/// score[b,c] = <H_b, D_c> - ln(max(pop_c, 1)).
inline Var debiased_scores(Var users, Var items, std::span<const std::size_t> pop) {
  if (pop.size() != items.value().rows())
    throw Error("debiased_scores: " + std::to_string(pop.size()) + " popularity counts for " +
                std::to_string(items.value().rows()) + " candidates");
  Tensor correction(Shape{pop.size()});
  for (std::size_t c = 0; c < pop.size(); ++c)
    correction.data[c] = -std::log(static_cast<double>(std::max<std::size_t>(pop[c], 1)));
  return add_row(matmul_nt(users, items), users.tape().constant(std::move(correction)));
}

/// Row-major [B, C] flags: true where column c is a false negative for row b.
/// Target columns are never flagged.
inline std::vector<char> exclusion_mask(std::size_t rows, std::size_t cols,
                                        const std::vector<std::vector<std::size_t>>& excluded_cols,
                                        std::span<const std::size_t> target_cols) {
  if (excluded_cols.size() != rows || target_cols.size() != rows) throw Error("exclusion_mask: row count mismatch");
  std::vector<char> mask(rows * cols, 0);
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t c : excluded_cols[b]) {
      if (c >= cols) throw Error("exclusion_mask: column out of range");
      if (c != target_cols[b]) mask[b * cols + c] = 1;
    }
  return mask;
}

/// Summed in-batch softmax cross-entropy with false negatives removed from
/// each row's denominator. Rows left with only the target contribute 0.
inline Var inbatch_ce(Var scores, std::span<const std::size_t> target_cols, const std::vector<char>& excluded) {
  return softmax_cross_entropy(block_entries(scores, excluded), {target_cols.begin(), target_cols.end()});
}

/// Number of rows whose candidate set collapses to the target alone.
inline std::size_t degenerate_rows(std::size_t rows, std::size_t cols, const std::vector<char>& excluded) {
  std::size_t n = 0;
  for (std::size_t b = 0; b < rows; ++b) {
    std::size_t visible = 0;
    for (std::size_t c = 0; c < cols; ++c) visible += excluded[b * cols + c] ? 0 : 1;
    n += visible <= 1 ? 1 : 0;
  }
  return n;
}

/// Per-branch masked logits z^m and their mean z^e.
struct BranchLogits {
  PerBranch<Var> z;
  Var ensemble;
  std::vector<Branch> active;
};

inline BranchLogits make_branch_logits(const PerBranch<Var>& masked, const std::vector<Branch>& active) {
  BranchLogits out;
  out.active = active;
  std::vector<Var> parts;
  for (Branch b : active) {
    out.z[b] = masked[b];
    parts.push_back(masked[b]);
  }
  out.ensemble = parts.size() == 1 ? parts.front() : average(parts);
  return out;
}

inline PerBranch<Var> collaborative_ce(const BranchLogits& logits, std::span<const std::size_t> target_cols) {
  PerBranch<Var> out;
  for (Branch b : logits.active)
    out[b] = softmax_cross_entropy(logits.z[b], {target_cols.begin(), target_cols.end()});
  return out;
}

/// Teacher values used by distill_bundle. Normally read off the live logits;
/// a gradient check can pin them to fixed tensors instead.
struct TeacherValues {
  Tensor id;
  Tensor ensemble;
};

inline Tensor mean_of(const std::vector<const Tensor*>& parts) {
  Tensor out(parts.front()->shape);
  for (const Tensor* p : parts)
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += p->data[i];
  for (double& x : out.data) x /= static_cast<double>(parts.size());
  return out;
}

inline TeacherValues current_teachers(const BranchLogits& logits) {
  TeacherValues t;
  std::vector<const Tensor*> parts;
  for (Branch b : logits.active) parts.push_back(&logits.z[b].value());
  t.ensemble = mean_of(parts);
  if (logits.z[Branch::id].valid()) t.id = logits.z[Branch::id].value();
  return t;
}

/// Online distillation terms. Modality students learn from z^id (or from z^e
/// when no ID branch exists); the ID student learns from z^e. Teachers are
/// constants. A single branch has nobody to learn from and yields nothing.
inline PerBranch<Var> distill_bundle(const BranchLogits& logits, double temperature,
                                     const TeacherValues* pinned = nullptr) {
  PerBranch<Var> out;
  if (!(temperature > 0.0)) throw Error("distill_bundle: temperature must be positive");
  if (logits.active.size() < 2) return out;
  const TeacherValues live = pinned ? TeacherValues{} : current_teachers(logits);
  const TeacherValues& t = pinned ? *pinned : live;
  const bool has_id = logits.z[Branch::id].valid();
  for (Branch b : logits.active) {
    const Tensor& teacher = (b == Branch::id || !has_id) ? t.ensemble : t.id;
    out[b] = distill_kl(teacher, logits.z[b], temperature);
  }
  return out;
}

/// Distillation weight: 0 at epoch 0, exp(-5 (1 - e/alpha)^2) in between, 1 from alpha on.
inline double ramp_weight(double epoch, double alpha) {
  if (epoch < 0.0) throw Error("ramp_weight: negative epoch");
  if (!(alpha >= 1.0)) throw Error("ramp_weight: alpha must be >= 1");
  if (epoch == 0.0) return 0.0;
  if (epoch >= alpha) return 1.0;
  const double phase = 1.0 - epoch / alpha;
  return std::exp(-5.0 * phase * phase);
}

struct LossReport {
  PerBranch<double> ce{};
  PerBranch<double> kl{};
  double ce_fused = 0.0;  // single CE on fused scores (early / late fusion)
  double ramp = 0.0;
  double total = 0.0;
  std::size_t rows = 0;

  double ce_sum() const { return ce.slot[0] + ce.slot[1] + ce.slot[2] + ce_fused; }
  double kl_sum() const { return kl.slot[0] + kl.slot[1] + kl.slot[2]; }
};

/// L_ce + w * L_kl over whichever branch terms are present.
inline Var total_loss(Tape& tape, const PerBranch<Var>& ce, const PerBranch<Var>& kl, double w) {
  Var acc;
  auto accumulate = [&](Var term) { acc = acc.valid() ? add(acc, term) : term; };
  for (Branch b : kBranches)
    if (ce[b].valid()) accumulate(ce[b]);
  Var kl_sum;
  for (Branch b : kBranches)
    if (kl[b].valid()) kl_sum = kl_sum.valid() ? add(kl_sum, kl[b]) : kl[b];
  if (kl_sum.valid() && w != 0.0) accumulate(scale(kl_sum, w));
  return acc.valid() ? acc : tape.constant(Tensor::scalar(0.0));
}

inline LossReport summarize(const PerBranch<Var>& ce, const PerBranch<Var>& kl, double w, Var total,
                            std::size_t rows) {
  LossReport r;
  for (Branch b : kBranches) {
    if (ce[b].valid()) r.ce[b] = ce[b].value().item();
    if (kl[b].valid()) r.kl[b] = kl[b].value().item();
  }
  r.ramp = w;
  r.total = total.value().item();
  r.rows = rows;
  return r;
}

}  // namespace odmt

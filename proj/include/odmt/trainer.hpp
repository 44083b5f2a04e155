#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "odmt/config.hpp"
#include "odmt/datagen.hpp"
#include "odmt/item_tower.hpp"
#include "odmt/losses.hpp"
#include "odmt/metrics.hpp"
#include "odmt/optim.hpp"
#include "odmt/seq_tower.hpp"

namespace odmt {

/// splitmix64 step; derives independent RNG streams from the experiment seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

struct ExperimentData {
  Catalog catalog;
  InteractionDataset dataset;
  std::vector<char> cold_item;  // known only for generated data
};

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData out;
  if (cfg.data_source == "synthetic") {
    SyntheticConfig sc = cfg.synth;
    sc.seed = cfg.seed;
    auto synth = generate_synthetic(sc);
    out.catalog = std::move(synth.catalog);
    out.cold_item = std::move(synth.cold_item);
    out.dataset = split_leave_one_out(synth.sequences, out.catalog.n_items, cfg.split);
  } else {
    out.catalog = load_features(cfg.data_source);
    out.dataset = split_leave_one_out(load_interactions(cfg.data_source, out.catalog.n_items), out.catalog.n_items,
                                      cfg.split);
  }
  if (out.dataset.n_users() < 2) throw Error("dataset: fewer than two users survive the split");
  return out;
}

/// Everything one training step produces.
struct StepOutput {
  Var total;
  LossReport report;
  BranchLogits logits;        // per-branch masked scores (collaborative / late)
  Var fused;                  // masked scores of the single early-fusion tower
  std::size_t degenerate = 0; // rows whose candidate set is the target alone
};

/// Item tower plus one sequence tower per branch (or one fused tower for
/// early fusion). Holds raw pointers into its own parameter store, so it is
/// neither copied nor moved.
class Recommender {
 public:
  Recommender(const ExperimentConfig& cfg, const Catalog& cat) : cfg_(cfg), cat_(&cat) {
    Rng rng(derive_seed(cfg.seed, 1));
    item_ = std::make_unique<ItemTower>(store_, cfg.item, cat, rng);
    if (cfg.fusion == Fusion::early) {
      fused_ = SeqTower(store_, "seq.fused", cfg.seq, rng);
    } else {
      for (Branch b : item_->branches())
        towers_[b] = SeqTower(store_, std::string("seq.") + branch_name(b), cfg.seq, rng);
    }
  }
  Recommender(const Recommender&) = delete;
  Recommender& operator=(const Recommender&) = delete;

  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const ItemTower& item_tower() const { return *item_; }
  const ExperimentConfig& config() const { return cfg_; }
  std::vector<Branch> branches() const { return item_->branches(); }

  /// Names under which evaluation reports scores.
  std::vector<std::string> report_keys() const {
    std::vector<std::string> keys;
    if (cfg_.fusion != Fusion::early)
      for (Branch b : branches()) keys.push_back(branch_name(b));
    keys.push_back("ensemble");
    return keys;
  }

  /// Forward pass over one batch. Candidates are the batch's distinct targets
  /// followed by `extra_negatives`; `w` weights the distillation terms.
  StepOutput forward_batch(Tape& tape, const Batch& batch, std::span<const std::size_t> pop, double w,
                           Rng* dropout_rng = nullptr, const TeacherValues* pinned = nullptr,
                           std::span<const std::size_t> extra_negatives = {}) const {
    const std::size_t B = batch.rows.size();
    if (B == 0 || batch.targets.size() != B || batch.exclusions.size() != B)
      throw Error("forward_batch: malformed batch");
    const ForwardContext ctx{tape, dropout_rng != nullptr, dropout_rng};

    // Local item pool: candidates first, then history items.
    std::vector<std::ptrdiff_t> local(cat_->n_items, -1);
    std::vector<std::size_t> pool;
    auto intern = [&](std::size_t item) {
      if (item >= cat_->n_items) throw Error("forward_batch: item " + std::to_string(item) + " outside catalog");
      if (local[item] < 0) {
        local[item] = static_cast<std::ptrdiff_t>(pool.size());
        pool.push_back(item);
      }
      return static_cast<std::size_t>(local[item]);
    };
    for (std::size_t t : batch.targets) intern(t);
    for (std::size_t t : extra_negatives) intern(t);
    const std::size_t C = pool.size();
    if (C < 2) throw Error("forward_batch: fewer than two candidates");
    std::vector<std::vector<std::size_t>> rows(B);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t it : batch.rows[b]) rows[b].push_back(intern(it));

    std::vector<std::size_t> target_cols(B), cand_pop(C);
    std::vector<std::vector<std::size_t>> excluded(B);
    for (std::size_t b = 0; b < B; ++b) {
      target_cols[b] = static_cast<std::size_t>(local[batch.targets[b]]);
      for (std::size_t it : batch.exclusions[b])
        if (local[it] >= 0 && static_cast<std::size_t>(local[it]) < C) excluded[b].push_back(static_cast<std::size_t>(local[it]));
    }
    for (std::size_t c = 0; c < C; ++c) cand_pop[c] = pool[c] < pop.size() ? pop[pool[c]] : 0;
    const auto mask = exclusion_mask(B, C, excluded, target_cols);

    std::vector<std::ptrdiff_t> cand_idx(C);
    for (std::size_t c = 0; c < C; ++c) cand_idx[c] = static_cast<std::ptrdiff_t>(c);
    auto score = [&](const SeqTower& tower, Var items) {
      Var users = tower.encode_batch(ctx, items, rows);
      return block_entries(debiased_scores(users, gather_rows(items, cand_idx), cand_pop), mask);
    };

    StepOutput out;
    out.degenerate = degenerate_rows(B, C, mask);
    const PerBranch<Var> item_vecs = item_->encode(ctx, *cat_, pool);
    const auto active = branches();

    if (cfg_.fusion == Fusion::early) {
      std::vector<Var> parts;
      for (Branch b : active) parts.push_back(item_vecs[b]);
      out.fused = score(fused_, parts.size() == 1 ? parts.front() : average(parts));
      Var ce = softmax_cross_entropy(out.fused, target_cols);
      out.total = ce;
      out.report.ce_fused = ce.value().item();
      out.report.total = out.report.ce_fused;
      out.report.rows = B;
      return out;
    }

    PerBranch<Var> z;
    for (Branch b : active) z[b] = score(towers_[b], item_vecs[b]);
    out.logits = make_branch_logits(z, active);

    if (cfg_.fusion == Fusion::late) {
      Var ce = softmax_cross_entropy(out.logits.ensemble, target_cols);
      out.total = ce;
      out.report.ce_fused = ce.value().item();
      out.report.total = out.report.ce_fused;
      out.report.rows = B;
      return out;
    }

    const PerBranch<Var> ce = collaborative_ce(out.logits, target_cols);
    const PerBranch<Var> kl = cfg_.distill ? distill_bundle(out.logits, cfg_.temperature, pinned) : PerBranch<Var>{};
    const double weight = cfg_.distill ? w : 0.0;
    out.total = total_loss(tape, ce, kl, weight);
    out.report = summarize(ce, kl, weight, out.total, B);
    return out;
  }

  /// Final item vectors for the whole catalog, keyed by branch name or "fused".
  std::map<std::string, Tensor> embed_catalog(std::size_t chunk = 256) const {
    std::map<std::string, Tensor> out;
    const std::size_t n = cat_->n_items, d = cfg_.item.dim;
    const auto active = branches();
    const std::string fused_key = "fused";
    auto put = [&](const std::string& key, std::size_t start, const Tensor& rows) {
      auto [it, fresh] = out.try_emplace(key, Tensor::matrix(n, d));
      std::copy(rows.data.begin(), rows.data.end(), it->second.data.begin() + static_cast<std::ptrdiff_t>(start * d));
    };
    for (std::size_t start = 0; start < n; start += chunk) {
      std::vector<std::size_t> items;
      for (std::size_t i = start; i < std::min(n, start + chunk); ++i) items.push_back(i);
      Tape tape(false);
      const ForwardContext ctx{tape, false, nullptr};
      const PerBranch<Var> vecs = item_->encode(ctx, *cat_, items);
      if (cfg_.fusion == Fusion::early) {
        std::vector<Var> parts;
        for (Branch b : active) parts.push_back(vecs[b]);
        put(fused_key, start, (parts.size() == 1 ? parts.front() : average(parts)).value());
      } else {
        for (Branch b : active) put(branch_name(b), start, vecs[b].value());
      }
    }
    return out;
  }

  /// User vectors [U, d] from precomputed catalog item vectors.
  Tensor user_vectors(const std::string& key, const Tensor& item_table,
                      const std::vector<std::vector<std::size_t>>& rows) const {
    Tape tape(false);
    const ForwardContext ctx{tape, false, nullptr};
    return tower_for(key).encode_batch(ctx, tape.constant(item_table), rows).value();
  }

  const SeqTower& tower_for(const std::string& key) const {
    if (key == "fused") {
      if (cfg_.fusion != Fusion::early) throw Error("no fused tower outside early fusion");
      return fused_;
    }
    for (Branch b : branches())
      if (key == branch_name(b) && cfg_.fusion != Fusion::early) return towers_[b];
    throw Error("no sequence tower named '" + key + "'");
  }

 private:
  ExperimentConfig cfg_;
  const Catalog* cat_;
  ParameterStore store_;
  std::unique_ptr<ItemTower> item_;
  PerBranch<SeqTower> towers_;
  SeqTower fused_;
};

enum class EvalSplit { valid, test };

/// Full-catalog ranking of each user's held-out item. Validation feeds the
/// train prefix and excludes its items; test also feeds and excludes the
/// validation item. No popularity correction is applied here.
inline MetricsReport evaluate(const Recommender& model, const InteractionDataset& ds, EvalSplit split,
                              const std::vector<std::size_t>& k_list, std::size_t groups,
                              std::size_t user_chunk = 256) {
  MetricsReport report;
  report.k_list = k_list;
  const auto keys = model.report_keys();
  const auto group_of = popularity_groups(ds.pop, groups);
  report.by_group.resize(groups + 1);
  report.group_users.assign(groups + 1, 0);
  report.group_items.assign(groups + 1, 0);
  for (std::size_t g : group_of) ++report.group_items[g];
  for (const auto& key : keys) {
    report.overall[key];
    for (auto& gm : report.by_group) gm[key];
  }

  const auto tables = model.embed_catalog();
  const std::size_t n = ds.n_items;
  const std::size_t d = tables.begin()->second.cols();
  const bool early = model.config().fusion == Fusion::early;

  for (std::size_t start = 0; start < ds.n_users(); start += user_chunk) {
    const std::size_t stop = std::min(ds.n_users(), start + user_chunk);
    const std::size_t U = stop - start;
    std::vector<std::vector<std::size_t>> rows;
    std::vector<std::size_t> targets;
    for (std::size_t u = start; u < stop; ++u) {
      const auto& s = ds.split[u];
      rows.push_back(s.train);
      if (split == EvalSplit::test) rows.back().push_back(s.valid);
      targets.push_back(split == EvalSplit::test ? s.test : s.valid);
    }

    std::map<std::string, std::vector<double>> scores;
    for (const auto& [key, table] : tables) {
      const Tensor users = model.user_vectors(key, table, rows);
      auto& sc = scores[early ? "ensemble" : key];
      sc.assign(U * n, 0.0);
      kernels::gemm_nt(U, n, d, users.data.data(), table.data.data(), sc.data(), false);
    }
    if (!early) {
      auto& ens = scores["ensemble"];
      ens.assign(U * n, 0.0);
      const double inv = 1.0 / static_cast<double>(tables.size());
      for (const auto& [key, table] : tables)
        for (std::size_t i = 0; i < U * n; ++i) ens[i] += scores[key][i] * inv;
    }

    std::vector<char> skip(n, 0);
    for (std::size_t r = 0; r < U; ++r) {
      for (std::size_t it : rows[r]) skip[it] = 1;
      skip[targets[r]] = 0;
      const std::size_t g = group_of[targets[r]];
      ++report.group_users[g];
      for (const auto& key : keys) {
        std::span<const double> row(scores[key].data() + r * n, n);
        const std::size_t rank = rank_of_target(row, targets[r], skip);
        report.overall[key].add(rank, k_list);
        report.by_group[g][key].add(rank, k_list);
      }
      for (std::size_t it : rows[r]) skip[it] = 0;
    }
  }
  for (auto& [key, m] : report.overall) m.finish(k_list);
  for (auto& gm : report.by_group)
    for (auto& [key, m] : gm) m.finish(k_list);
  return report;
}

struct LossLogRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossReport loss;
};

struct EpochSummary {
  std::size_t epoch = 0;
  double mean_loss_per_row = 0.0;
  double valid_recall = 0.0;  // ensemble Recall@select_k
  double valid_ndcg = 0.0;
};

struct TrainResult {
  std::unique_ptr<Recommender> model;
  std::vector<LossLogRow> log;
  std::vector<EpochSummary> epochs;
  std::optional<std::size_t> best_epoch;
  MetricsReport valid;
  MetricsReport test;
};

/// Raised when a step produces a non-finite value.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t step, std::size_t epoch, const std::string& what)
      : Error("training diverged at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + "): " + what),
        step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Adam on the summed objective, one pass over the users per epoch, model
/// selection on validation Recall@select_k of the ensemble, early stopping
/// after `patience` epochs without improvement, then a test evaluation of
/// the selected parameters.
inline TrainResult train(ExperimentConfig cfg, const ExperimentData& data, const ProgressFn& progress = {}) {
  validate(cfg);
  TrainResult res;
  res.model = std::make_unique<Recommender>(cfg, data.catalog);
  Recommender& model = *res.model;
  const auto& ds = data.dataset;
  Adam adam(model.store(), {cfg.lr});
  Rng dropout_rng(derive_seed(cfg.seed, 2));
  const std::uint64_t batch_seed = derive_seed(cfg.seed, 3);

  std::vector<Tensor> best;
  double best_recall = -1.0;
  std::size_t since_best = 0, step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double w = ramp_weight(static_cast<double>(epoch), cfg.alpha);
    double loss_sum = 0.0;
    std::size_t row_sum = 0;
    for (const Batch& batch : make_batches(ds, cfg.batch_size, batch_seed, epoch)) {
      if (batch.rows.size() < 2) continue;
      ++step;
      try {
        Tape tape;
        StepOutput out = model.forward_batch(tape, batch, ds.pop, w, &dropout_rng);
        if (!std::isfinite(out.report.total)) throw Error("non-finite loss");
        tape.backward(out.total);
        adam.step();
        res.log.push_back({step, epoch, out.report});
        loss_sum += out.report.total;
        row_sum += out.report.rows;
      } catch (const TrainingDiverged&) {
        throw;
      } catch (const Error& e) {
        throw TrainingDiverged(step, epoch, e.what());
      }
    }
    const MetricsReport valid = evaluate(model, ds, EvalSplit::valid, cfg.k_list, cfg.groups);
    EpochSummary summary{epoch, row_sum ? loss_sum / static_cast<double>(row_sum) : 0.0,
                         valid.recall("ensemble", cfg.select_k), valid.ndcg("ensemble", cfg.select_k)};
    res.epochs.push_back(summary);
    if (progress) {
      std::ostringstream os;
      os.precision(5);
      os << "epoch " << epoch << " loss/row " << summary.mean_loss_per_row << " valid recall@" << cfg.select_k << " "
         << summary.valid_recall << " w " << w;
      progress(os.str());
    }
    if (summary.valid_recall > best_recall) {
      best_recall = summary.valid_recall;
      best = model.store().snapshot();
      res.best_epoch = epoch;
      res.valid = valid;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  if (!best.empty()) model.store().restore(best);
  if (!res.best_epoch) res.valid = evaluate(model, ds, EvalSplit::valid, cfg.k_list, cfg.groups);
  res.test = evaluate(model, ds, EvalSplit::test, cfg.k_list, cfg.groups);
  return res;
}

}  // namespace odmt

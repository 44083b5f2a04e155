#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "odmt/trainer.hpp"

namespace odmt {

/// A named configuration delta applied on top of a base config.
struct Variant {
  std::string name;
  std::vector<std::string> overrides;
};

/// The eight ablation rows followed by the full model.
inline std::vector<Variant> ablation_variants() {
  return {
      {"Text Initialization", {"model.id_init=text"}},
      {"Image Initialization", {"model.id_init=image"}},
      {"w/o Initialization", {"model.id_init=random"}},
      {"w/o ID mask", {"model.id_mask=false"}},
      {"w/o IMT (1)", {"model.fst=separate", "model.separate_layers=2"}},
      {"w/o IMT (2)", {"model.fst=separate", "model.separate_layers=1"}},
      {"w/o Online Distillation", {"train.fusion=late", "distill.enabled=false"}},
      {"w/o ID", {"model.include_id=false"}},
      {"ODMT", {}},
  };
}

/// Comparison models built from the same parts.
inline std::vector<Variant> baseline_variants() {
  const std::vector<std::string> id_only{"model.include_modalities=false", "model.id_init=random",
                                         "distill.enabled=false", "train.fusion=collaborative"};
  auto with = [](std::vector<std::string> base, std::initializer_list<std::string> more) {
    base.insert(base.end(), more);
    return base;
  };
  const std::vector<std::string> multi{"model.fst=separate", "model.separate_layers=2", "model.id_init=random",
                                       "distill.enabled=false"};
  return {
      {"GRU4Rec", with(id_only, {"model.backbone=recurrent"})},
      {"SASRec", id_only},
      {"SASRec+EF", with(multi, {"train.fusion=early"})},
      {"SASRec+LF", with(multi, {"train.fusion=late"})},
      {"ODMT", {}},
  };
}

inline Variant find_variant(const std::vector<Variant>& list, const std::string& name) {
  for (const auto& v : list)
    if (v.name == name) return v;
  throw Error("unknown variant '" + name + "'");
}

inline ExperimentConfig apply_variant(ExperimentConfig cfg, const Variant& v) {
  for (const auto& o : v.overrides) apply_override(cfg, o);
  validate(cfg);
  return cfg;
}

/// Result of one training run with the model dropped.
struct RunRecord {
  std::string name;
  std::vector<std::string> overrides;
  ExperimentConfig config;
  std::vector<LossLogRow> log;
  std::vector<EpochSummary> epochs;
  std::optional<std::size_t> best_epoch;
  MetricsReport valid;
  MetricsReport test;
};

inline RunRecord record_of(const Variant& v, const ExperimentConfig& cfg, TrainResult&& r) {
  return {v.name, v.overrides, cfg, std::move(r.log), std::move(r.epochs), r.best_epoch, std::move(r.valid),
          std::move(r.test)};
}

inline RunRecord run_variant(const ExperimentConfig& base, const Variant& v, const ExperimentData& data,
                             const ProgressFn& progress = {}) {
  const ExperimentConfig cfg = apply_variant(base, v);
  ProgressFn tagged;
  if (progress) tagged = [&](const std::string& s) { progress("[" + v.name + "] " + s); };
  return record_of(v, cfg, train(cfg, data, tagged));
}

/// Directory-safe form of a variant name.
inline std::string slug(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c)))
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    else if (c == '+')
      s += "_plus_";
    else if (!s.empty() && s.back() != '_')
      s += '_';
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

namespace csv_detail {

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

inline std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::ofstream open(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write '" + path.string() + "'");
  return os;
}

inline std::string metric_header(const std::vector<std::size_t>& ks) {
  std::string h;
  for (std::size_t k : ks) h += ",recall@" + std::to_string(k);
  for (std::size_t k : ks) h += ",ndcg@" + std::to_string(k);
  return h;
}

inline std::string metric_cells(const RankingMetrics& m, const std::vector<std::size_t>& ks) {
  std::string s;
  for (std::size_t k : ks) s += "," + num(m.recall.at(k));
  for (std::size_t k : ks) s += "," + num(m.ndcg.at(k));
  return s;
}

}  // namespace csv_detail

/// One row per optimizer step; CE is summed over rows, KL averaged over rows.
inline void write_losscurve_csv(const std::filesystem::path& path, const std::vector<LossLogRow>& log) {
  using csv_detail::num;
  auto os = csv_detail::open(path);
  os << "step,epoch,ce_v,ce_t,ce_id,ce_fused,kl_v,kl_t,kl_id,w,total,total_per_row\n";
  for (const auto& r : log) {
    const LossReport& l = r.loss;
    os << r.step << ',' << r.epoch;
    for (Branch b : kBranches) os << ',' << num(l.ce[b]);
    os << ',' << num(l.ce_fused);
    for (Branch b : kBranches) os << ',' << num(l.kl[b]);
    os << ',' << num(l.ramp) << ',' << num(l.total) << ',' << num(l.rows ? l.total / static_cast<double>(l.rows) : 0.0)
       << '\n';
  }
}

/// Method rows, test metrics of the ensemble.
inline void write_ablation_csv(const std::filesystem::path& path, const std::vector<RunRecord>& runs) {
  if (runs.empty()) throw Error("write_ablation_csv: no runs");
  const auto& ks = runs.front().test.k_list;
  auto os = csv_detail::open(path);
  os << "method,best_epoch" << csv_detail::metric_header(ks) << '\n';
  for (const auto& r : runs)
    os << csv_detail::quote(r.name) << ',' << (r.best_epoch ? std::to_string(*r.best_epoch) : "")
       << csv_detail::metric_cells(r.test.overall.at("ensemble"), ks) << '\n';
}

/// Test metrics per popularity group, one row per (method, group, branch).
inline void write_popularity_csv(const std::filesystem::path& path, const std::vector<RunRecord>& runs) {
  if (runs.empty()) throw Error("write_popularity_csv: no runs");
  const auto& ks = runs.front().test.k_list;
  auto os = csv_detail::open(path);
  os << "method,group,items,users,branch" << csv_detail::metric_header(ks) << '\n';
  for (const auto& r : runs)
    for (std::size_t g = 0; g < r.test.by_group.size(); ++g)
      for (const auto& [branch, m] : r.test.by_group[g])
        os << csv_detail::quote(r.name) << ',' << g << ',' << r.test.group_items[g] << ',' << r.test.group_users[g]
           << ',' << branch << csv_detail::metric_cells(m, ks) << '\n';
}

inline nlohmann::ordered_json to_json(const RunRecord& r) {
  nlohmann::ordered_json j;
  j["name"] = r.name;
  j["overrides"] = r.overrides;
  j["seed"] = r.config.seed;
  j["best_epoch"] = r.best_epoch ? nlohmann::ordered_json(*r.best_epoch) : nlohmann::ordered_json(nullptr);
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch},
                      {"loss_per_row", e.mean_loss_per_row},
                      {"valid_recall", e.valid_recall},
                      {"valid_ndcg", e.valid_ndcg}});
  j["epochs"] = epochs;
  j["valid"] = to_json(r.valid);
  j["test"] = to_json(r.test);
  return j;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  auto os = csv_detail::open(path);
  os << j.dump(2) << '\n';
}

/// One cell of a distillation or depth sweep.
struct SweepCell {
  std::string axis;     // "T", "alpha" or "layers"
  std::string setting;  // printed value, or "None" for the no-distillation control
  Variant variant;
};

/// Temperature and ramp-length grids, each with a no-distillation control row.
inline std::vector<SweepCell> distill_sweep(const ExperimentConfig& base) {
  std::vector<SweepCell> cells;
  const Variant none{"None", {"distill.enabled=false"}};
  cells.push_back({"T", "None", none});
  for (const char* t : {"0.1", "0.2", "0.3", "0.4", "0.5", "0.6"})
    cells.push_back({"T", t, {std::string("T=") + t, {std::string("distill.T=") + t}}});
  cells.push_back({"alpha", "None", none});
  for (const char* a : {"10", "20", "30", "40", "50", "60"})
    cells.push_back({"alpha", a, {std::string("alpha=") + a, {std::string("distill.alpha=") + a}}});
  (void)base;
  return cells;
}

/// Largest head count <= layers that divides the model width.
inline std::size_t heads_for_depth(std::size_t layers, std::size_t dim) {
  for (std::size_t h = layers; h > 1; --h)
    if (dim % h == 0) return h;
  return 1;
}

/// IMT depth 1..4 against the late-fusion baseline at the same depth.
inline std::vector<SweepCell> layer_sweep(const ExperimentConfig& base) {
  std::vector<SweepCell> cells;
  const auto lf = find_variant(baseline_variants(), "SASRec+LF");
  for (std::size_t l = 1; l <= 4; ++l) {
    const std::string L = std::to_string(l), H = std::to_string(heads_for_depth(l, base.item.dim));
    cells.push_back({"layers", L, {"ODMT layers=" + L, {"model.imt_layers=" + L, "model.heads=" + H}}});
    Variant v{"SASRec+LF layers=" + L, lf.overrides};
    v.overrides.push_back("model.separate_layers=" + L);
    v.overrides.push_back("model.heads=" + H);
    cells.push_back({"layers", L, v});
  }
  return cells;
}

inline void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepCell>& cells,
                            const std::vector<RunRecord>& runs) {
  if (runs.empty() || runs.size() != cells.size()) throw Error("write_sweep_csv: cell/run count mismatch");
  const auto& ks = runs.front().test.k_list;
  auto os = csv_detail::open(path);
  os << "axis,setting,method,T,alpha,layers" << csv_detail::metric_header(ks) << '\n';
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = runs[i].config;
    os << cells[i].axis << ',' << cells[i].setting << ',' << csv_detail::quote(runs[i].name) << ','
       << (c.distill ? csv_detail::num(c.temperature) : "") << ',' << (c.distill ? csv_detail::num(c.alpha) : "")
       << ',' << (c.item.fst == FstKind::separate ? c.item.separate_layers : c.item.layers)
       << csv_detail::metric_cells(runs[i].test.overall.at("ensemble"), ks) << '\n';
  }
}

}  // namespace odmt

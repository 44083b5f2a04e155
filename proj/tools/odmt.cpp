// Command-line driver: gen, train, eval, ablate, sweep.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "odmt/checkpoint.hpp"
#include "odmt/experiments.hpp"

namespace fs = std::filesystem;
using odmt::ExperimentConfig;
using json = nlohmann::ordered_json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  bool dry_run = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("-c,--config", args.config_path, "Key-value config file");
  cmd->add_option("-s,--set", args.overrides, "Override, key=value (repeatable)");
  cmd->add_option("-o,--out", args.out, "Output directory (default: $ODMT_OUTPUT_ROOT/<command>)");
  cmd->add_flag("--dry-run", args.dry_run, "Validate and print the plan without running");
  cmd->add_flag("-q,--quiet", args.quiet, "Suppress per-epoch progress");
}

ExperimentConfig resolve_config(const CommonArgs& args) {
  ExperimentConfig cfg = args.config_path.empty() ? ExperimentConfig{} : odmt::load_config(args.config_path);
  for (const auto& o : args.overrides) odmt::apply_override(cfg, o);
  odmt::validate(cfg);
  return cfg;
}

fs::path output_dir(const CommonArgs& args, const std::string& command) {
  if (!args.out.empty()) return args.out;
  const char* root = std::getenv("ODMT_OUTPUT_ROOT");
  return fs::path(root && *root ? root : "runs") / command;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json config_json(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const auto& f : odmt::config_fields()) j[f.key] = f.get(cfg);
  return j;
}

/// Records inputs, timestamps and every file a command wrote.
class Manifest {
 public:
  Manifest(std::string command, const ExperimentConfig& cfg, const CommonArgs& args, fs::path dir)
      : dir_(std::move(dir)) {
    j_["tool"] = "odmt";
    j_["version"] = ODMT_VERSION;
    j_["command"] = std::move(command);
    j_["seed"] = cfg.seed;
    j_["config_file"] = args.config_path;
    j_["overrides"] = args.overrides;
    j_["config"] = config_json(cfg);
    j_["started"] = utc_now();
  }

  fs::path file(const fs::path& rel) {
    outputs_.push_back(rel.generic_string());
    const fs::path p = dir_ / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    return p;
  }

  void finish(const std::string& status, const std::vector<std::string>& failures = {}) {
    j_["finished"] = utc_now();
    j_["status"] = status;
    j_["failures"] = failures;
    j_["outputs"] = outputs_;
    odmt::write_json(dir_ / "run_manifest.json", j_);
  }

 private:
  fs::path dir_;
  json j_;
  std::vector<std::string> outputs_;
};

odmt::ProgressFn progress_for(const CommonArgs& args) {
  if (args.quiet) return {};
  return [](const std::string& s) { std::cerr << s << '\n'; };
}

void print_plan(const std::string& command, const ExperimentConfig& cfg, const fs::path& out,
                const std::vector<odmt::Variant>& runs) {
  std::cout << "# " << command << " -> " << out.string() << "\n" << odmt::config_to_text(cfg);
  for (const auto& v : runs) {
    std::cout << "run: " << v.name;
    for (const auto& o : v.overrides) std::cout << ' ' << o;
    std::cout << '\n';
    odmt::apply_variant(cfg, v);  // surfaces invalid combinations before any training
  }
}

int cmd_gen(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  const fs::path out = output_dir(args, "gen");
  if (args.dry_run) {
    print_plan("gen", cfg, out, {});
    return 0;
  }
  odmt::SyntheticConfig sc = cfg.synth;
  sc.seed = cfg.seed;
  const auto data = odmt::generate_synthetic(sc);
  Manifest m("gen", cfg, args, out);
  odmt::save_catalog(out, data.catalog, data.sequences);
  for (const char* f : {"manifest.json", "visual.f64", "textual.f64", "interactions.csv"}) m.file(f);
  json meta;
  meta["item_cluster"] = data.item_cluster;
  std::vector<std::size_t> cold;
  for (std::size_t i = 0; i < data.cold_item.size(); ++i)
    if (data.cold_item[i]) cold.push_back(i);
  meta["cold_items"] = cold;
  odmt::write_json(m.file("generator.json"), meta);
  m.finish("ok");
  std::cout << "catalog: " << data.catalog.n_items << " items, " << data.sequences.size() << " users -> "
            << out.string() << '\n';
  return 0;
}

/// Trains a list of variants, writing per-run artifacts under runs/<slug>/.
/// Divergent runs are reported and skipped; returns the completed records.
std::vector<odmt::RunRecord> run_all(const ExperimentConfig& cfg, const std::vector<odmt::Variant>& variants,
                                     const odmt::ExperimentData& data, Manifest& m, const CommonArgs& args,
                                     std::vector<std::string>& failures, bool nested) {
  std::vector<odmt::RunRecord> records;
  for (const auto& v : variants) {
    try {
      auto rec = odmt::run_variant(cfg, v, data, progress_for(args));
      const fs::path base = nested ? fs::path("runs") / odmt::slug(v.name) : fs::path();
      odmt::write_losscurve_csv(m.file(base / "losscurve.csv"), rec.log);
      if (nested) odmt::write_json(m.file(base / "metrics.json"), odmt::to_json(rec));
      records.push_back(std::move(rec));
    } catch (const odmt::TrainingDiverged& e) {
      std::cerr << "[" << v.name << "] " << e.what() << '\n';
      failures.push_back(v.name + ": " + e.what());
    }
  }
  return records;
}

void print_table(const std::vector<odmt::RunRecord>& runs, std::size_t k) {
  for (const auto& r : runs)
    std::cout << std::left << std::setw(28) << r.name << " recall@" << k << " " << std::fixed << std::setprecision(4)
              << r.test.recall("ensemble", k) << "  ndcg@" << k << " " << r.test.ndcg("ensemble", k) << '\n';
}

int cmd_train(const CommonArgs& args) {
  const ExperimentConfig cfg = resolve_config(args);
  const fs::path out = output_dir(args, "train");
  const odmt::Variant self{"train", {}};
  if (args.dry_run) {
    print_plan("train", cfg, out, {self});
    return 0;
  }
  const auto data = odmt::load_experiment_data(cfg);
  Manifest m("train", cfg, args, out);
  try {
    auto result = odmt::train(cfg, data, progress_for(args));
    odmt::save_parameters(m.file("checkpoint.odmt"), result.model->store());
    std::ofstream(m.file("config.ini")) << odmt::config_to_text(cfg);
    auto rec = odmt::record_of(self, cfg, std::move(result));
    odmt::write_losscurve_csv(m.file("losscurve.csv"), rec.log);
    odmt::write_popularity_csv(m.file("popularity.csv"), {rec});
    odmt::write_json(m.file("metrics.json"), odmt::to_json(rec));
    m.finish("ok");
    print_table({rec}, cfg.select_k);
    return 0;
  } catch (const odmt::TrainingDiverged& e) {
    std::cerr << e.what() << '\n';
    m.finish("diverged", {e.what()});
    return 1;
  }
}

int cmd_eval(const CommonArgs& args, const std::string& run_dir) {
  const fs::path run(run_dir);
  CommonArgs resolved = args;
  if (resolved.config_path.empty()) resolved.config_path = (run / "config.ini").string();
  const ExperimentConfig cfg = resolve_config(resolved);
  const fs::path out = args.out.empty() ? run / "eval" : fs::path(args.out);
  if (args.dry_run) {
    print_plan("eval", cfg, out, {});
    return 0;
  }
  const auto data = odmt::load_experiment_data(cfg);
  odmt::Recommender model(cfg, data.catalog);
  odmt::load_parameters(run / "checkpoint.odmt", model.store());
  Manifest m("eval", cfg, resolved, out);
  json j;
  j["checkpoint"] = (run / "checkpoint.odmt").generic_string();
  j["valid"] = odmt::to_json(odmt::evaluate(model, data.dataset, odmt::EvalSplit::valid, cfg.k_list, cfg.groups));
  const auto test = odmt::evaluate(model, data.dataset, odmt::EvalSplit::test, cfg.k_list, cfg.groups);
  j["test"] = odmt::to_json(test);
  odmt::write_json(m.file("metrics.json"), j);
  m.finish("ok");
  std::cout << "test recall@" << cfg.select_k << " " << test.recall("ensemble", cfg.select_k) << '\n';
  return 0;
}

std::vector<odmt::Variant> select(std::vector<odmt::Variant> all, const std::vector<std::string>& only) {
  if (only.empty()) return all;
  std::vector<odmt::Variant> out;
  for (const auto& name : only) out.push_back(odmt::find_variant(all, name));
  return out;
}

int cmd_ablate(const CommonArgs& args, const std::string& suite, const std::vector<std::string>& only) {
  const ExperimentConfig cfg = resolve_config(args);
  const fs::path out = output_dir(args, "ablate");
  std::vector<odmt::Variant> variants;
  if (suite == "ablation" || suite == "all") variants = odmt::ablation_variants();
  if (suite == "baselines" || suite == "all")
    for (auto& v : odmt::baseline_variants())
      if (suite == "baselines" || v.name != "ODMT") variants.push_back(v);
  variants = select(variants, only);
  if (args.dry_run) {
    print_plan("ablate", cfg, out, variants);
    return 0;
  }
  const auto data = odmt::load_experiment_data(cfg);
  Manifest m("ablate", cfg, args, out);
  std::vector<std::string> failures;
  const auto records = run_all(cfg, variants, data, m, args, failures, true);
  if (!records.empty()) {
    odmt::write_ablation_csv(m.file("ablation.csv"), records);
    odmt::write_popularity_csv(m.file("popularity.csv"), records);
    json all = json::array();
    for (const auto& r : records) all.push_back(odmt::to_json(r));
    odmt::write_json(m.file("metrics.json"), all);
  }
  m.finish(failures.empty() ? "ok" : "diverged", failures);
  print_table(records, cfg.select_k);
  return failures.empty() ? 0 : 1;
}

int cmd_sweep(const CommonArgs& args, const std::string& grid) {
  const ExperimentConfig cfg = resolve_config(args);
  const fs::path out = output_dir(args, "sweep");
  std::vector<odmt::SweepCell> cells;
  if (grid == "distill" || grid == "all") cells = odmt::distill_sweep(cfg);
  if (grid == "layers" || grid == "all")
    for (auto& c : odmt::layer_sweep(cfg)) cells.push_back(c);
  std::vector<odmt::Variant> variants;
  for (const auto& c : cells) variants.push_back(c.variant);
  if (args.dry_run) {
    print_plan("sweep", cfg, out, variants);
    return 0;
  }
  const auto data = odmt::load_experiment_data(cfg);
  Manifest m("sweep", cfg, args, out);
  std::vector<std::string> failures;
  // The two "None" controls are the same run; train it once.
  std::vector<odmt::RunRecord> records;
  std::vector<odmt::SweepCell> done;
  std::map<std::string, std::size_t> seen;
  for (const auto& c : cells) {
    if (auto it = seen.find(c.variant.name); it != seen.end()) {
      records.push_back(records[it->second]);
      done.push_back(c);
      continue;
    }
    auto recs = run_all(cfg, {c.variant}, data, m, args, failures, true);
    if (recs.empty()) continue;
    seen[c.variant.name] = records.size();
    records.push_back(std::move(recs.front()));
    done.push_back(c);
  }
  if (!records.empty()) {
    odmt::write_sweep_csv(m.file("sweep.csv"), done, records);
    json all = json::array();
    for (const auto& r : records) all.push_back(odmt::to_json(r));
    odmt::write_json(m.file("metrics.json"), all);
  }
  m.finish(failures.empty() ? "ok" : "diverged", failures);
  print_table(records, cfg.select_k);
  return failures.empty() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-modal sequential recommendation with online distillation"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, ablate_args, sweep_args;
  auto* gen = app.add_subcommand("gen", "Generate a synthetic catalog directory");
  add_common(gen, gen_args);
  auto* train = app.add_subcommand("train", "Train one configuration");
  add_common(train, train_args);
  auto* eval = app.add_subcommand("eval", "Evaluate a trained run directory");
  add_common(eval, eval_args);
  std::string run_dir;
  eval->add_option("--run", run_dir, "Directory written by 'train'")->required();
  auto* ablate = app.add_subcommand("ablate", "Run the ablation matrix and/or baselines");
  add_common(ablate, ablate_args);
  std::string suite = "ablation";
  std::vector<std::string> only;
  ablate->add_option("--suite", suite, "ablation | baselines | all")
      ->check(CLI::IsMember({"ablation", "baselines", "all"}));
  ablate->add_option("--only", only, "Restrict to named variants (repeatable)");
  auto* sweep = app.add_subcommand("sweep", "Distillation and depth sweeps");
  add_common(sweep, sweep_args);
  std::string grid = "distill";
  sweep->add_option("--grid", grid, "distill | layers | all")->check(CLI::IsMember({"distill", "layers", "all"}));

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return cmd_gen(gen_args);
    if (*train) return cmd_train(train_args);
    if (*eval) return cmd_eval(eval_args, run_dir);
    if (*ablate) return cmd_ablate(ablate_args, suite, only);
    if (*sweep) return cmd_sweep(sweep_args, grid);
  } catch (const odmt::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}

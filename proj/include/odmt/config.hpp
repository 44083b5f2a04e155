#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "odmt/datagen.hpp"
#include "odmt/item_tower.hpp"
#include "odmt/seq_tower.hpp"

namespace odmt {

enum class Fusion { collaborative, early, late };

struct ExperimentConfig {
  std::string data_source = "synthetic";  // or a catalog directory
  SyntheticConfig synth;
  SplitOptions split;

  ItemTowerConfig item;
  SeqTowerConfig seq;

  Fusion fusion = Fusion::collaborative;
  bool distill = true;
  double temperature = 0.5;
  double alpha = 20.0;

  double lr = 2e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  std::size_t patience = 5;
  std::size_t select_k = 10;

  std::vector<std::size_t> k_list{5, 10, 20};
  std::size_t groups = 8;

  std::uint64_t seed = 42;
};

namespace config_detail {

inline std::string trim(std::string s) {
  auto ws = [](unsigned char c) { return std::isspace(c); };
  s.erase(s.begin(), std::find_if_not(s.begin(), s.end(), ws));
  s.erase(std::find_if_not(s.rbegin(), s.rend(), ws).base(), s.end());
  return s;
}

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <class E>
struct EnumName {
  E value;
  const char* name;
};

template <class E, std::size_t N>
std::string accepted(const EnumName<E> (&names)[N]) {
  std::string s;
  for (std::size_t i = 0; i < N; ++i) s += (i ? "|" : "") + std::string(names[i].name);
  return s;
}

inline constexpr EnumName<FstKind> kFst[] = {{FstKind::imt, "imt"}, {FstKind::separate, "separate"}, {FstKind::dnn, "dnn"}};
inline constexpr EnumName<IdInit> kIdInit[] = {
    {IdInit::avg_modal, "avg_modal"}, {IdInit::text, "text"}, {IdInit::image, "image"}, {IdInit::random, "random"}};
inline constexpr EnumName<Fusion> kFusion[] = {
    {Fusion::collaborative, "collaborative"}, {Fusion::early, "early"}, {Fusion::late, "late"}};
inline constexpr EnumName<Backbone> kBackbone[] = {{Backbone::self_attention, "self_attention"},
                                                   {Backbone::recurrent, "recurrent"}};

struct Field {
  std::string key;
  std::string accepts;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

[[noreturn]] inline void bad_value(const std::string& key, const std::string& value, const std::string& accepts) {
  throw Error("config: invalid value '" + value + "' for key '" + key + "' (accepted: " + accepts + ")");
}

template <class T>
Field uint_field(std::string key, T ExperimentConfig::*member) = delete;

inline std::size_t parse_uint(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  unsigned long long out = 0;
  try {
    out = std::stoull(v, &pos);
  } catch (...) {
    bad_value(key, v, "non-negative integer");
  }
  if (pos != v.size() || (!v.empty() && v[0] == '-')) bad_value(key, v, "non-negative integer");
  return static_cast<std::size_t>(out);
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t pos = 0;
  double out = 0;
  try {
    out = std::stod(v, &pos);
  } catch (...) {
    bad_value(key, v, "real number");
  }
  if (pos != v.size()) bad_value(key, v, "real number");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  bad_value(key, v, "true|false");
}

template <class E, std::size_t N>
E parse_enum(const std::string& key, const std::string& v, const EnumName<E> (&names)[N]) {
  for (const auto& n : names)
    if (v == n.name) return n.value;
  bad_value(key, v, accepted(names));
}

template <class E, std::size_t N>
std::string enum_str(E e, const EnumName<E> (&names)[N]) {
  for (const auto& n : names)
    if (n.value == e) return n.name;
  return "?";
}

// Projections from config to a field reference.
template <class T>
using Ref = std::function<T&(ExperimentConfig&)>;

template <class T>
Field uint_f(std::string key, std::function<T&(ExperimentConfig&)> ref) {
  return {key, "non-negative integer",
          [key, ref](ExperimentConfig& c, const std::string& v) { ref(c) = static_cast<T>(parse_uint(key, v)); },
          [ref](const ExperimentConfig& c) { return std::to_string(ref(const_cast<ExperimentConfig&>(c))); }};
}

inline Field real_f(std::string key, Ref<double> ref) {
  return {key, "real number", [key, ref](ExperimentConfig& c, const std::string& v) { ref(c) = parse_real(key, v); },
          [ref](const ExperimentConfig& c) { return fmt_double(ref(const_cast<ExperimentConfig&>(c))); }};
}

inline Field bool_f(std::string key, Ref<bool> ref) {
  return {key, "true|false", [key, ref](ExperimentConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); },
          [ref](const ExperimentConfig& c) { return ref(const_cast<ExperimentConfig&>(c)) ? "true" : "false"; }};
}

template <class E, std::size_t N>
Field enum_f(std::string key, Ref<E> ref, const EnumName<E> (&names)[N]) {
  return {key, accepted(names),
          [key, ref, &names](ExperimentConfig& c, const std::string& v) { ref(c) = parse_enum(key, v, names); },
          [ref, &names](const ExperimentConfig& c) { return enum_str(ref(const_cast<ExperimentConfig&>(c)), names); }};
}

}  // namespace config_detail

/// Every settable key, in file order.
inline const std::vector<config_detail::Field>& config_fields() {
  using namespace config_detail;
  using C = ExperimentConfig;
  static const std::vector<Field> fields = {
      {"data.source", "synthetic|<catalog directory>",
       [](C& c, const std::string& v) { c.data_source = v; }, [](const C& c) { return c.data_source; }},
      uint_f<std::size_t>("data.n_items", [](C& c) -> auto& { return c.synth.n_items; }),
      uint_f<std::size_t>("data.n_users", [](C& c) -> auto& { return c.synth.n_users; }),
      uint_f<std::size_t>("data.n_clusters", [](C& c) -> auto& { return c.synth.n_clusters; }),
      uint_f<std::size_t>("data.n_v", [](C& c) -> auto& { return c.synth.n_v; }),
      uint_f<std::size_t>("data.n_t", [](C& c) -> auto& { return c.synth.n_t; }),
      uint_f<std::size_t>("data.d_v", [](C& c) -> auto& { return c.synth.d_v; }),
      uint_f<std::size_t>("data.d_t", [](C& c) -> auto& { return c.synth.d_t; }),
      real_f("data.p_intra", [](C& c) -> auto& { return c.synth.p_intra; }),
      real_f("data.primary_weight", [](C& c) -> auto& { return c.synth.primary_weight; }),
      real_f("data.cluster_scale", [](C& c) -> auto& { return c.synth.cluster_scale; }),
      real_f("data.item_noise", [](C& c) -> auto& { return c.synth.item_noise; }),
      real_f("data.row_noise", [](C& c) -> auto& { return c.synth.row_noise; }),
      real_f("data.zipf", [](C& c) -> auto& { return c.synth.zipf; }),
      uint_f<std::size_t>("data.min_len", [](C& c) -> auto& { return c.synth.min_len; }),
      uint_f<std::size_t>("data.max_raw_len", [](C& c) -> auto& { return c.synth.max_raw_len; }),
      real_f("data.cold_fraction", [](C& c) -> auto& { return c.synth.cold_fraction; }),
      real_f("data.cold_target_prob", [](C& c) -> auto& { return c.synth.cold_target_prob; }),
      uint_f<std::size_t>("data.max_len", [](C& c) -> auto& { return c.split.max_len; }),
      uint_f<std::size_t>("data.min_interactions", [](C& c) -> auto& { return c.split.min_interactions; }),

      enum_f<FstKind>("model.fst", [](C& c) -> auto& { return c.item.fst; }, kFst),
      uint_f<std::size_t>("model.dim", [](C& c) -> auto& { return c.item.dim; }),
      uint_f<std::size_t>("model.imt_layers", [](C& c) -> auto& { return c.item.layers; }),
      uint_f<std::size_t>("model.separate_layers", [](C& c) -> auto& { return c.item.separate_layers; }),
      uint_f<std::size_t>("model.heads", [](C& c) -> auto& { return c.item.heads; }),
      real_f("model.dropout", [](C& c) -> auto& { return c.item.dropout; }),
      bool_f("model.id_mask", [](C& c) -> auto& { return c.item.id_mask; }),
      enum_f<IdInit>("model.id_init", [](C& c) -> auto& { return c.item.id_init; }, kIdInit),
      bool_f("model.include_id", [](C& c) -> auto& { return c.item.include_id; }),
      bool_f("model.include_modalities", [](C& c) -> auto& { return c.item.include_modalities; }),
      real_f("model.leaky_slope", [](C& c) -> auto& { return c.item.leaky_slope; }),
      enum_f<Backbone>("model.backbone", [](C& c) -> auto& { return c.seq.backbone; }, kBackbone),
      uint_f<std::size_t>("model.seq_layers", [](C& c) -> auto& { return c.seq.layers; }),
      uint_f<std::size_t>("model.seq_heads", [](C& c) -> auto& { return c.seq.heads; }),
      real_f("model.seq_dropout", [](C& c) -> auto& { return c.seq.dropout; }),

      enum_f<Fusion>("train.fusion", [](C& c) -> auto& { return c.fusion; }, kFusion),
      real_f("train.lr", [](C& c) -> auto& { return c.lr; }),
      uint_f<std::size_t>("train.batch_size", [](C& c) -> auto& { return c.batch_size; }),
      uint_f<std::size_t>("train.epochs", [](C& c) -> auto& { return c.epochs; }),
      uint_f<std::size_t>("train.patience", [](C& c) -> auto& { return c.patience; }),
      uint_f<std::size_t>("train.select_k", [](C& c) -> auto& { return c.select_k; }),

      bool_f("distill.enabled", [](C& c) -> auto& { return c.distill; }),
      real_f("distill.T", [](C& c) -> auto& { return c.temperature; }),
      real_f("distill.alpha", [](C& c) -> auto& { return c.alpha; }),

      {"eval.k", "comma-separated positive integers",
       [](C& c, const std::string& v) {
         std::vector<std::size_t> ks;
         std::stringstream ss(v);
         std::string part;
         while (std::getline(ss, part, ',')) {
           const auto k = config_detail::parse_uint("eval.k", config_detail::trim(part));
           if (k == 0) config_detail::bad_value("eval.k", v, "comma-separated positive integers");
           ks.push_back(k);
         }
         if (ks.empty()) config_detail::bad_value("eval.k", v, "comma-separated positive integers");
         c.k_list = ks;
       },
       [](const C& c) {
         std::string s;
         for (std::size_t i = 0; i < c.k_list.size(); ++i) s += (i ? "," : "") + std::to_string(c.k_list[i]);
         return s;
       }},
      uint_f<std::size_t>("eval.groups", [](C& c) -> auto& { return c.groups; }),

      {"seed", "64-bit unsigned integer",
       [](C& c, const std::string& v) { c.seed = config_detail::parse_uint("seed", v); },
       [](const C& c) { return std::to_string(c.seed); }},
  };
  return fields;
}

inline std::string accepted_keys() {
  std::string s;
  for (const auto& f : config_fields()) s += (s.empty() ? "" : ", ") + f.key;
  return s;
}

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_fields())
    if (f.key == key) return f.set(cfg, value);
  throw Error("config: unknown key '" + key + "' (accepted: " + accepted_keys() + ")");
}

/// Applies one "key=value" override.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error("config: override '" + assignment + "' is not of the form key=value");
  set_config_value(cfg, config_detail::trim(assignment.substr(0, eq)), config_detail::trim(assignment.substr(eq + 1)));
}

/// Parses "key = value" lines. "[section]" headers prefix later keys with
/// "section."; '#' starts a comment.
inline void apply_config_text(ExperimentConfig& cfg, const std::string& text) {
  std::istringstream is(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error("config line " + std::to_string(lineno) + ": unterminated section header");
      section = config_detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = config_detail::trim(line.substr(0, eq));
    if (!section.empty()) key = section + "." + key;
    set_config_value(cfg, key, config_detail::trim(line.substr(eq + 1)));
  }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("config: cannot open '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  ExperimentConfig cfg;
  apply_config_text(cfg, ss.str());
  return cfg;
}

/// Canonical "key = value" dump; parsing it back reproduces the config.
inline std::string config_to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

/// Cross-field checks; also mirrors shared sizes into the sub-configs.
inline void validate(ExperimentConfig& cfg) {
  if (cfg.k_list.empty()) throw Error("config: eval.k must not be empty");
  if (std::find(cfg.k_list.begin(), cfg.k_list.end(), cfg.select_k) == cfg.k_list.end())
    throw Error("config: train.select_k=" + std::to_string(cfg.select_k) + " must appear in eval.k");
  if (!(cfg.lr > 0.0)) throw Error("config: train.lr must be positive");
  if (cfg.batch_size < 2) throw Error("config: train.batch_size must be at least 2");
  if (!(cfg.temperature > 0.0)) throw Error("config: distill.T must be positive");
  if (!(cfg.alpha >= 1.0)) throw Error("config: distill.alpha must be >= 1");
  if (cfg.groups < 2) throw Error("config: eval.groups must be at least 2");
  if (cfg.item.dim == 0 || cfg.item.heads == 0 || cfg.item.dim % cfg.item.heads != 0)
    throw Error("config: model.dim must be a positive multiple of model.heads");
  if (cfg.seq.heads == 0 || cfg.item.dim % cfg.seq.heads != 0)
    throw Error("config: model.dim must be a positive multiple of model.seq_heads");
  if (cfg.item.fst == FstKind::imt && (cfg.item.layers < 1 || cfg.item.layers > 4))
    throw Error("config: model.imt_layers must lie in 1..4");
  if (cfg.item.fst == FstKind::separate && cfg.item.separate_layers < 1)
    throw Error("config: model.separate_layers must be >= 1");
  if (cfg.seq.layers < 1) throw Error("config: model.seq_layers must be >= 1");
  if (!cfg.item.include_id && !cfg.item.include_modalities)
    throw Error("config: model.include_id and model.include_modalities cannot both be false");
  if (cfg.item.dropout < 0.0 || cfg.item.dropout >= 1.0 || cfg.seq.dropout < 0.0 || cfg.seq.dropout >= 1.0)
    throw Error("config: dropout rates must lie in [0,1)");
  if (cfg.fusion == Fusion::early && !cfg.item.include_modalities)
    throw Error("config: early fusion needs modality branches");
  cfg.seq.dim = cfg.item.dim;
  cfg.seq.max_len = cfg.split.max_len;
  cfg.synth.seed = cfg.seed;
}

}  // namespace odmt

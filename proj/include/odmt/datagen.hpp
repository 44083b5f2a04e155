#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "odmt/parameter.hpp"
#include "odmt/tensor.hpp"

namespace odmt {

/// Pre-extracted per-item modality features with fixed patch/token counts.
/// Visual rows per item: n_v patches then the cls row (cls LAST).
/// Textual rows per item: the cls row then n_t tokens (cls FIRST).
struct Catalog {
  std::size_t n_items = 0;
  std::size_t n_v = 0, n_t = 0;
  std::size_t d_v = 0, d_t = 0;
  std::vector<double> visual;   // n_items x (n_v+1) x d_v
  std::vector<double> textual;  // n_items x (n_t+1) x d_t

  std::size_t visual_rows() const { return n_v + 1; }
  std::size_t textual_rows() const { return n_t + 1; }
  std::size_t visual_cls_row() const { return n_v; }
  std::size_t textual_cls_row() const { return 0; }

  std::span<const double> visual_of(std::size_t item) const {
    return {visual.data() + item * visual_rows() * d_v, visual_rows() * d_v};
  }
  std::span<const double> textual_of(std::size_t item) const {
    return {textual.data() + item * textual_rows() * d_t, textual_rows() * d_t};
  }
  std::span<const double> visual_cls(std::size_t item) const { return visual_of(item).subspan(n_v * d_v, d_v); }
  std::span<const double> textual_cls(std::size_t item) const { return textual_of(item).subspan(0, d_t); }

  void validate() const {
    if (n_items == 0 || n_v == 0 || n_t == 0 || d_v == 0 || d_t == 0)
      throw Error("catalog: all sizes must be positive");
    if (visual.size() != n_items * visual_rows() * d_v) throw Error("catalog: visual feature block has wrong size");
    if (textual.size() != n_items * textual_rows() * d_t) throw Error("catalog: textual feature block has wrong size");
    auto finite = [](double x) { return std::isfinite(x); };
    if (!std::all_of(visual.begin(), visual.end(), finite) || !std::all_of(textual.begin(), textual.end(), finite))
      throw Error("catalog: non-finite feature value");
  }

  friend bool operator==(const Catalog&, const Catalog&) = default;
};

struct UserSplit {
  std::vector<std::size_t> train;  // chronological train prefix
  std::size_t valid = 0;
  std::size_t test = 0;
};

struct InteractionDataset {
  std::size_t n_items = 0;
  std::size_t max_len = 15;
  std::vector<std::vector<std::size_t>> sequences;  // truncated, chronological
  std::vector<UserSplit> split;
  std::vector<std::size_t> pop;  // occurrences in train prefixes only

  std::size_t n_users() const { return split.size(); }
};

struct SplitOptions {
  std::size_t max_len = 15;
  std::size_t min_interactions = 5;
};

/// Drops users below the interaction floor, keeps the most recent max_len
/// items, and holds out the last item for test and the one before for validation.
inline InteractionDataset split_leave_one_out(const std::vector<std::vector<std::size_t>>& sequences,
                                              std::size_t n_items, SplitOptions opts = {}) {
  InteractionDataset ds;
  ds.n_items = n_items;
  ds.max_len = opts.max_len;
  ds.pop.assign(n_items, 0);
  for (const auto& raw : sequences) {
    if (raw.size() < opts.min_interactions) continue;
    std::vector<std::size_t> seq(raw.end() - static_cast<std::ptrdiff_t>(std::min(raw.size(), opts.max_len)), raw.end());
    if (seq.size() < 3) throw Error("split: sequence shorter than 3 after truncation");
    for (std::size_t it : seq)
      if (it >= n_items) throw Error("split: item index " + std::to_string(it) + " outside catalog");
    UserSplit s;
    s.test = seq.back();
    s.valid = seq[seq.size() - 2];
    s.train.assign(seq.begin(), seq.end() - 2);
    for (std::size_t it : s.train) ++ds.pop[it];
    ds.sequences.push_back(std::move(seq));
    ds.split.push_back(std::move(s));
  }
  return ds;
}

struct Batch {
  std::vector<std::size_t> users;
  std::vector<std::vector<std::size_t>> rows;        // model input per user
  std::vector<std::size_t> targets;                  // next item after each row
  std::vector<std::vector<std::size_t>> exclusions;  // sorted items of the row's own sequence, minus its target
};

/// One training instance per user: the train prefix minus its last item
/// predicts that last item. Users are shuffled per (seed, epoch).
inline std::vector<Batch> make_batches(const InteractionDataset& ds, std::size_t batch_size, std::uint64_t seed,
                                       std::size_t epoch = 0) {
  if (batch_size < 2) throw Error("make_batches: batch size must be at least 2 for in-batch negatives");
  std::vector<std::size_t> order;
  for (std::size_t u = 0; u < ds.n_users(); ++u)
    if (ds.split[u].train.size() >= 2) order.push_back(u);
  Rng rng(seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    Batch b;
    for (std::size_t i = start; i < std::min(order.size(), start + batch_size); ++i) {
      const auto& train = ds.split[order[i]].train;
      b.users.push_back(order[i]);
      b.rows.emplace_back(train.begin(), train.end() - 1);
      b.targets.push_back(train.back());
      std::vector<std::size_t> ex(b.rows.back());
      std::sort(ex.begin(), ex.end());
      ex.erase(std::unique(ex.begin(), ex.end()), ex.end());
      std::erase(ex, train.back());
      b.exclusions.push_back(std::move(ex));
    }
    out.push_back(std::move(b));
  }
  return out;
}

struct SyntheticConfig {
  std::size_t n_items = 2000;
  std::size_t n_users = 5000;
  std::size_t n_clusters = 64;
  std::size_t n_v = 4, n_t = 8;
  std::size_t d_v = 32, d_t = 32;
  double p_intra = 0.8;         // chance a step stays within the user's preferred clusters
  double primary_weight = 0.85; // share of intra-cluster steps going to the primary cluster
  double cluster_scale = 1.0;
  double item_noise = 0.5;
  double row_noise = 0.5;
  double zipf = 1.1;            // within-cluster popularity exponent
  std::size_t min_len = 5, max_raw_len = 20;
  double cold_fraction = 0.05;  // items withheld until the final interaction
  double cold_target_prob = 0.1;
  std::uint64_t seed = 42;
};

struct SyntheticData {
  Catalog catalog;
  std::vector<std::vector<std::size_t>> sequences;  // raw, chronological
  std::vector<std::size_t> item_cluster;
  std::vector<char> cold_item;
};

/// Cluster-structured catalog and users. Item features are
/// centroid + per-item offset + per-row noise in each modality.
inline SyntheticData generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.n_items == 0 || cfg.n_users == 0 || cfg.n_clusters == 0 || cfg.n_v == 0 || cfg.n_t == 0 || cfg.d_v == 0 ||
      cfg.d_t == 0)
    throw Error("generate_synthetic: sizes must be positive");
  if (cfg.n_clusters > cfg.n_items) throw Error("generate_synthetic: more clusters than items");
  if (cfg.min_len < 1 || cfg.max_raw_len < cfg.min_len) throw Error("generate_synthetic: bad sequence length range");
  if (cfg.p_intra < 0.0 || cfg.p_intra > 1.0) throw Error("generate_synthetic: p_intra must lie in [0,1]");

  Rng rng(cfg.seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  SyntheticData out;
  Catalog& cat = out.catalog;
  cat.n_items = cfg.n_items;
  cat.n_v = cfg.n_v;
  cat.n_t = cfg.n_t;
  cat.d_v = cfg.d_v;
  cat.d_t = cfg.d_t;

  std::vector<std::size_t> perm(cfg.n_items);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  out.item_cluster.resize(cfg.n_items);
  std::vector<std::vector<std::size_t>> members(cfg.n_clusters);
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    out.item_cluster[perm[i]] = i % cfg.n_clusters;
    members[i % cfg.n_clusters].push_back(perm[i]);
  }

  auto draw = [&](std::size_t n, double s) {
    std::vector<double> v(n);
    for (double& x : v) x = s * unit(rng);
    return v;
  };
  auto fill_modality = [&](std::size_t rows, std::size_t dim, std::vector<double>& block) {
    std::vector<std::vector<double>> centroid(cfg.n_clusters);
    for (auto& c : centroid) c = draw(dim, cfg.cluster_scale);
    block.resize(cfg.n_items * rows * dim);
    for (std::size_t i = 0; i < cfg.n_items; ++i) {
      const auto offset = draw(dim, cfg.item_noise);
      const auto& c = centroid[out.item_cluster[i]];
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < dim; ++k)
          block[(i * rows + r) * dim + k] = c[k] + offset[k] + cfg.row_noise * unit(rng);
    }
  };
  fill_modality(cat.visual_rows(), cat.d_v, cat.visual);
  fill_modality(cat.textual_rows(), cat.d_t, cat.textual);

  out.cold_item.assign(cfg.n_items, 0);
  const auto n_cold = static_cast<std::size_t>(cfg.cold_fraction * static_cast<double>(cfg.n_items));
  {
    std::vector<std::size_t> pick(cfg.n_items);
    std::iota(pick.begin(), pick.end(), 0);
    std::shuffle(pick.begin(), pick.end(), rng);
    for (std::size_t i = 0; i < n_cold; ++i) out.cold_item[pick[i]] = 1;
  }
  // Zipf weights by within-cluster rank; cold items weigh nothing until the final step.
  std::vector<double> weight(cfg.n_items, 0.0);
  std::vector<std::vector<std::size_t>> cold_members(cfg.n_clusters);
  for (std::size_t c = 0; c < cfg.n_clusters; ++c) {
    std::size_t rank = 1;
    for (std::size_t it : members[c]) {
      if (out.cold_item[it]) {
        cold_members[c].push_back(it);
        continue;
      }
      weight[it] = std::pow(static_cast<double>(rank++), -cfg.zipf);
    }
  }

  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::uniform_int_distribution<std::size_t> any_cluster(0, cfg.n_clusters - 1);
  std::uniform_int_distribution<std::size_t> length(cfg.min_len, cfg.max_raw_len);
  out.sequences.reserve(cfg.n_users);
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    const std::size_t primary = any_cluster(rng);
    std::size_t secondary = any_cluster(rng);
    if (cfg.n_clusters > 1)
      while (secondary == primary) secondary = any_cluster(rng);
    const std::size_t len = length(rng);
    std::vector<std::size_t> seq;
    std::set<std::size_t> used;
    for (std::size_t pos = 0; pos < len; ++pos) {
      std::size_t c;
      if (u01(rng) < cfg.p_intra)
        c = u01(rng) < cfg.primary_weight ? primary : secondary;
      else
        c = any_cluster(rng);
      std::vector<std::size_t> cands;
      std::vector<double> w;
      const bool last = pos + 1 == len;
      if (last && !cold_members[c].empty() && u01(rng) < cfg.cold_target_prob) {
        for (std::size_t it : cold_members[c])
          if (!used.contains(it)) cands.push_back(it), w.push_back(1.0);
      }
      if (cands.empty()) {
        for (std::size_t it : members[c])
          if (weight[it] > 0.0 && !used.contains(it)) cands.push_back(it), w.push_back(weight[it]);
      }
      if (cands.empty()) {
        for (std::size_t it = 0; it < cfg.n_items; ++it)
          if (weight[it] > 0.0 && !used.contains(it)) cands.push_back(it), w.push_back(weight[it]);
      }
      if (cands.empty()) break;
      std::discrete_distribution<std::size_t> pick(w.begin(), w.end());
      const std::size_t item = cands[pick(rng)];
      used.insert(item);
      seq.push_back(item);
    }
    out.sequences.push_back(std::move(seq));
  }
  return out;
}

// ---- catalog directory I/O ------------------------------------------------
// manifest.json  {n_items, n_v, n_t, d_v, d_t}
// visual.f64     little-endian f64, items contiguous, (n_v+1) x d_v per item
// textual.f64    little-endian f64, items contiguous, (n_t+1) x d_t per item
// interactions.csv  user_id,item_id,timestamp  ascending per user

namespace io_detail {

inline void write_f64(const std::filesystem::path& p, const std::vector<double>& v) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline std::vector<double> read_f64(const std::filesystem::path& p, std::size_t expected, const std::string& what) {
  if (!std::filesystem::exists(p)) throw Error("missing file '" + p.string() + "'");
  const auto bytes = std::filesystem::file_size(p);
  if (bytes != expected * sizeof(double))
    throw Error("shape mismatch: manifest implies " + std::to_string(expected) + " " + what + " values, file '" +
                p.string() + "' holds " + std::to_string(bytes / sizeof(double)));
  std::vector<double> v(expected);
  std::ifstream is(p, std::ios::binary);
  is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(bytes));
  if (!is) throw Error("read failed for '" + p.string() + "'");
  return v;
}

}  // namespace io_detail

inline void save_catalog(const std::filesystem::path& dir, const Catalog& cat,
                         const std::vector<std::vector<std::size_t>>& sequences) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json m;
  m["n_items"] = cat.n_items;
  m["n_v"] = cat.n_v;
  m["n_t"] = cat.n_t;
  m["d_v"] = cat.d_v;
  m["d_t"] = cat.d_t;
  {
    std::ofstream os(dir / "manifest.json");
    if (!os) throw Error("cannot write manifest in '" + dir.string() + "'");
    os << m.dump(2) << '\n';
  }
  io_detail::write_f64(dir / "visual.f64", cat.visual);
  io_detail::write_f64(dir / "textual.f64", cat.textual);
  std::ofstream csv(dir / "interactions.csv");
  csv << "user_id,item_id,timestamp\n";
  for (std::size_t u = 0; u < sequences.size(); ++u)
    for (std::size_t t = 0; t < sequences[u].size(); ++t) csv << u << ',' << sequences[u][t] << ',' << t << '\n';
  if (!csv) throw Error("cannot write interactions in '" + dir.string() + "'");
}

inline Catalog load_features(const std::filesystem::path& dir) {
  const auto mpath = dir / "manifest.json";
  if (!std::filesystem::exists(mpath)) throw Error("missing file '" + mpath.string() + "'");
  nlohmann::json m;
  try {
    std::ifstream is(mpath);
    m = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw Error("malformed manifest '" + mpath.string() + "': " + e.what());
  }
  Catalog cat;
  for (auto [key, field] : {std::pair{"n_items", &cat.n_items}, std::pair{"n_v", &cat.n_v}, std::pair{"n_t", &cat.n_t},
                            std::pair{"d_v", &cat.d_v}, std::pair{"d_t", &cat.d_t}}) {
    if (!m.contains(key) || !m[key].is_number_unsigned())
      throw Error(std::string("manifest: missing or invalid '") + key + "'");
    *field = m[key].get<std::size_t>();
  }
  cat.visual = io_detail::read_f64(dir / "visual.f64", cat.n_items * cat.visual_rows() * cat.d_v, "visual");
  cat.textual = io_detail::read_f64(dir / "textual.f64", cat.n_items * cat.textual_rows() * cat.d_t, "textual");
  cat.validate();
  return cat;
}

/// Reads interactions.csv into per-user chronological item lists, ordered by user id.
inline std::vector<std::vector<std::size_t>> load_interactions(const std::filesystem::path& dir, std::size_t n_items) {
  const auto path = dir / "interactions.csv";
  std::ifstream is(path);
  if (!is) throw Error("missing file '" + path.string() + "'");
  std::map<std::uint64_t, std::vector<std::pair<std::int64_t, std::size_t>>> per_user;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("user_id", 0) == 0) continue;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::uint64_t user = 0;
    std::size_t item = 0;
    std::int64_t ts = 0;
    char c1 = 0, c2 = 0;
    if (!(ls >> user >> c1 >> item >> c2 >> ts) || c1 != ',' || c2 != ',')
      throw Error("interactions.csv:" + std::to_string(lineno) + ": malformed row");
    if (item >= n_items)
      throw Error("interactions.csv:" + std::to_string(lineno) + ": item " + std::to_string(item) + " missing from catalog");
    per_user[user].emplace_back(ts, item);
  }
  std::vector<std::vector<std::size_t>> out;
  for (auto& [user, rows] : per_user) {
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::vector<std::size_t> seq;
    for (const auto& r : rows) seq.push_back(r.second);
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace odmt

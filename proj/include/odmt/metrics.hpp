#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "odmt/tensor.hpp"

namespace odmt {

/// Full-catalog ranking, descending score, ties by ascending item index,
/// excluded items removed.
inline std::vector<std::size_t> rank_full_catalog(std::span<const double> scores, std::span<const std::size_t> exclude = {}) {
  std::vector<char> skip(scores.size(), 0);
  for (std::size_t e : exclude)
    if (e < scores.size()) skip[e] = 1;
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < scores.size(); ++i)
    if (!skip[i]) order.push_back(i);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

/// 1-based position the target would take in rank_full_catalog, computed in
/// one pass. `skip` flags excluded items; the target is never skipped.
inline std::size_t rank_of_target(std::span<const double> scores, std::size_t target, const std::vector<char>& skip) {
  const double st = scores[target];
  std::size_t ahead = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (i == target || (!skip.empty() && skip[i])) continue;
    if (scores[i] > st || (scores[i] == st && i < target)) ++ahead;
  }
  return ahead + 1;
}

struct HitMetrics {
  double recall = 0.0;
  double ndcg = 0.0;
};

/// Single held-out item: recall = [rank <= k], ndcg = 1/log2(rank+1) inside the cutoff.
inline HitMetrics recall_ndcg(std::size_t rank, std::size_t k) {
  if (rank < 1) throw Error("recall_ndcg: rank must be >= 1");
  if (rank > k) return {};
  return {1.0, 1.0 / std::log2(static_cast<double>(rank) + 1.0)};
}

/// Group 0 holds items never seen in training; the rest are split into G
/// equal-count groups by ascending popularity (ties by item index).
inline std::vector<std::size_t> popularity_groups(std::span<const std::size_t> pop, std::size_t groups) {
  if (groups < 2) throw Error("popularity_groups: need at least 2 groups");
  std::vector<std::size_t> seen;
  for (std::size_t i = 0; i < pop.size(); ++i)
    if (pop[i] > 0) seen.push_back(i);
  if (seen.size() < groups)
    throw Error("popularity_groups: " + std::to_string(seen.size()) + " trained items cannot fill " +
                std::to_string(groups) + " groups");
  std::stable_sort(seen.begin(), seen.end(), [&](std::size_t a, std::size_t b) { return pop[a] < pop[b]; });
  std::vector<std::size_t> group(pop.size(), 0);
  const std::size_t n = seen.size();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = g * n / groups; r < (g + 1) * n / groups; ++r) group[seen[r]] = g + 1;
  return group;
}

/// Averages of recall/ndcg per cutoff over a set of users.
struct RankingMetrics {
  std::map<std::size_t, double> recall;
  std::map<std::size_t, double> ndcg;
  std::size_t users = 0;

  void add(std::size_t rank, std::span<const std::size_t> ks) {
    for (std::size_t k : ks) {
      const auto m = recall_ndcg(rank, k);
      recall[k] += m.recall;
      ndcg[k] += m.ndcg;
    }
    ++users;
  }
  void finish(std::span<const std::size_t> ks) {
    for (std::size_t k : ks) {
      recall[k] = users ? recall[k] / static_cast<double>(users) : 0.0;
      ndcg[k] = users ? ndcg[k] / static_cast<double>(users) : 0.0;
    }
  }
};

/// Scores keyed by branch name ("v", "t", "id", "ensemble"), overall and per popularity group.
struct MetricsReport {
  std::vector<std::size_t> k_list;
  std::map<std::string, RankingMetrics> overall;
  std::vector<std::map<std::string, RankingMetrics>> by_group;  // index = group id
  std::vector<std::size_t> group_users;
  std::vector<std::size_t> group_items;

  double recall(const std::string& branch, std::size_t k) const { return overall.at(branch).recall.at(k); }
  double ndcg(const std::string& branch, std::size_t k) const { return overall.at(branch).ndcg.at(k); }
  double group_recall(std::size_t g, const std::string& branch, std::size_t k) const {
    return by_group.at(g).at(branch).recall.at(k);
  }
};

inline nlohmann::ordered_json to_json(const RankingMetrics& m) {
  nlohmann::ordered_json j;
  j["users"] = m.users;
  for (const auto& [k, v] : m.recall) j["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : m.ndcg) j["ndcg@" + std::to_string(k)] = v;
  return j;
}

inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  j["k"] = r.k_list;
  for (const auto& [name, m] : r.overall) j["overall"][name] = to_json(m);
  nlohmann::ordered_json groups = nlohmann::ordered_json::array();
  for (std::size_t g = 0; g < r.by_group.size(); ++g) {
    nlohmann::ordered_json gj;
    gj["group"] = g;
    gj["users"] = r.group_users[g];
    gj["items"] = r.group_items[g];
    for (const auto& [name, m] : r.by_group[g]) gj["metrics"][name] = to_json(m);
    groups.push_back(gj);
  }
  j["popularity_groups"] = groups;
  return j;
}

}  // namespace odmt

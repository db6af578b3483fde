#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ascood/error.hpp"

namespace ascood {

/// Probability that a random ID score exceeds a random OOD score, ties count 1/2, in percent.
inline double auroc(std::span<const double> scores_id, std::span<const double> scores_ood) {
  if (scores_id.empty() || scores_ood.empty()) throw EmptySet("auroc needs non-empty ID and OOD score sets");
  // Mann-Whitney U via a merged sort with midranks.
  struct Item {
    double score;
    bool id;
  };
  std::vector<Item> all;
  all.reserve(scores_id.size() + scores_ood.size());
  for (double s : scores_id) all.push_back({s, true});
  for (double s : scores_ood) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });

  // U = sum over ID of (#OOD strictly below + 0.5 * #OOD tied). Work in half-units to stay exact.
  std::uint64_t twice_u = 0;
  std::uint64_t ood_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::uint64_t id_here = 0, ood_here = 0;
    while (j < all.size() && all[j].score == all[i].score) {
      (all[j].id ? id_here : ood_here)++;
      ++j;
    }
    twice_u += id_here * (2 * ood_below + ood_here);
    ood_below += ood_here;
    i = j;
  }
  const double pairs = static_cast<double>(scores_id.size()) * static_cast<double>(scores_ood.size());
  return 100.0 * static_cast<double>(twice_u) / (2.0 * pairs);
}

/// FPR (percent) at the largest threshold beta whose ID acceptance rate (#ID >= beta) / n_id
/// reaches `tpr`. Scores >= beta are classified ID.
inline double fpr_at_tpr(std::span<const double> scores_id, std::span<const double> scores_ood, double tpr = 0.95) {
  if (scores_id.empty() || scores_ood.empty()) throw EmptySet("fpr_at_tpr needs non-empty ID and OOD score sets");
  if (!(tpr >= 0.0 && tpr <= 1.0)) throw InvalidArgument("tpr must lie in [0, 1]");
  const std::size_t n = scores_id.size();
  std::size_t k = 0;  // smallest accepted-ID count meeting the target
  while (static_cast<double>(k) / static_cast<double>(n) < tpr) ++k;
  if (k == 0) return 0.0;  // beta = +inf accepts nothing
  std::vector<double> sorted(scores_id.begin(), scores_id.end());
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k - 1), sorted.end(),
                   std::greater<double>{});
  const double beta = sorted[k - 1];
  const auto accepted = std::count_if(scores_ood.begin(), scores_ood.end(), [&](double s) { return s >= beta; });
  return 100.0 * static_cast<double>(accepted) / static_cast<double>(scores_ood.size());
}

struct EvalEntry {
  std::string id_set;
  std::string ood_set;
  std::string postprocessor;
  double fpr_at_95 = 0.0;
  double auroc = 0.0;
  std::size_t n_id = 0;
  std::size_t n_ood = 0;
  bool operator==(const EvalEntry&) const = default;
};

struct EvalReport {
  std::vector<EvalEntry> entries;
  std::uint64_t seed = 0;
  std::string config_digest;
  /// Optional ID classification accuracy (percent) of the evaluated model.
  double id_accuracy = -1.0;
  bool operator==(const EvalReport&) const = default;
};

inline EvalEntry evaluate_pair(std::string id_set, std::string ood_set, std::string postprocessor,
                               std::span<const double> scores_id, std::span<const double> scores_ood) {
  EvalEntry e;
  e.id_set = std::move(id_set);
  e.ood_set = std::move(ood_set);
  e.postprocessor = std::move(postprocessor);
  e.fpr_at_95 = fpr_at_tpr(scores_id, scores_ood, 0.95);
  e.auroc = auroc(scores_id, scores_ood);
  e.n_id = scores_id.size();
  e.n_ood = scores_ood.size();
  return e;
}

}  // namespace ascood

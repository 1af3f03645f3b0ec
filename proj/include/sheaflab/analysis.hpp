#pragma once

#include <algorithm>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "sheaflab/graph.hpp"
#include "sheaflab/tasks.hpp"

namespace sheaflab {

// ---------------------------------------------------------------------------
// Overlap metrics.
// ---------------------------------------------------------------------------

/// |a ∩ b| / |a ∪ b| over edge masks; 1.0 when both are empty.
inline double iou(const EdgeMask& a, const EdgeMask& b) {
  require(a.size() == b.size(), "iou: masks over different graphs");
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    inter += (a[i] && b[i]) ? 1 : 0;
    uni += (a[i] || b[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline EdgeMask mask_intersection(const EdgeMask& a, const EdgeMask& b) {
  require(a.size() == b.size(), "mask_intersection: masks over different graphs");
  EdgeMask out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = (a[i] && b[i]) ? 1 : 0;
  return out;
}

inline EdgeMask mask_union(const EdgeMask& a, const EdgeMask& b) {
  require(a.size() == b.size(), "mask_union: masks over different graphs");
  EdgeMask out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = (a[i] || b[i]) ? 1 : 0;
  return out;
}

/// Nodes touched by at least one selected edge.
inline std::vector<std::uint8_t> active_nodes(const ComputationGraph& g, const EdgeMask& m) {
  std::vector<std::uint8_t> nodes(g.nodes.size(), 0);
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (m[e]) {
      nodes[static_cast<size_t>(g.edges[e].src)] = 1;
      nodes[static_cast<size_t>(g.edges[e].dst)] = 1;
    }
  return nodes;
}

/// IoU over node sets, where a node is present when it has at least one
/// incident selected edge.
inline double node_iou(const ComputationGraph& g, const EdgeMask& a, const EdgeMask& b) {
  auto na = active_nodes(g, a);
  auto nb = active_nodes(g, b);
  size_t inter = 0, uni = 0;
  for (size_t i = 0; i < na.size(); ++i) {
    inter += (na[i] && nb[i]) ? 1 : 0;
    uni += (na[i] || nb[i]) ? 1 : 0;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// "4.1%"-style percent formatting with one decimal.
inline std::string format_percent(double ratio) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f%%", ratio * 100.0);
  return buf;
}

// ---------------------------------------------------------------------------
// Cumulative overlap across a collection of sheaves.
// ---------------------------------------------------------------------------

struct OverlapReport {
  struct PrefixRow {
    int prefix;  // number of sheaves included (1-based)
    std::int64_t e_intersection;
    std::int64_t e_union;
    double mutual_iou;  // |E_cap| / |E_cup|
  };
  std::vector<PrefixRow> prefixes;
  std::vector<std::vector<double>> pairwise_iou;  // k x k symmetric
  std::vector<Sheaf> sheaves;                     // copies with metrics
};

/// Running intersection/union over sheaf prefixes plus the pairwise IoU
/// matrix. Intersection sizes are non-increasing and union sizes
/// non-decreasing in prefix length by construction.
inline OverlapReport cumulative_overlap(const std::vector<Sheaf>& sheaves) {
  require(!sheaves.empty(), "cumulative_overlap: need at least one sheaf");
  OverlapReport rep;
  rep.sheaves = sheaves;
  EdgeMask inter = sheaves[0].mask;
  EdgeMask uni = sheaves[0].mask;
  for (size_t i = 0; i < sheaves.size(); ++i) {
    if (i > 0) {
      inter = mask_intersection(inter, sheaves[i].mask);
      uni = mask_union(uni, sheaves[i].mask);
    }
    OverlapReport::PrefixRow row;
    row.prefix = static_cast<int>(i + 1);
    row.e_intersection = static_cast<std::int64_t>(popcount(inter));
    row.e_union = static_cast<std::int64_t>(popcount(uni));
    row.mutual_iou = row.e_union == 0
                         ? 1.0
                         : static_cast<double>(row.e_intersection) / row.e_union;
    rep.prefixes.push_back(row);
  }
  rep.pairwise_iou.assign(sheaves.size(), std::vector<double>(sheaves.size(), 1.0));
  for (size_t i = 0; i < sheaves.size(); ++i)
    for (size_t j = 0; j < sheaves.size(); ++j)
      rep.pairwise_iou[i][j] = iou(sheaves[i].mask, sheaves[j].mask);
  return rep;
}

inline double mean_pairwise_iou(const OverlapReport& rep) {
  double total = 0.0;
  int count = 0;
  for (size_t i = 0; i < rep.pairwise_iou.size(); ++i)
    for (size_t j = i + 1; j < rep.pairwise_iou.size(); ++j) {
      total += rep.pairwise_iou[i][j];
      ++count;
    }
  return count == 0 ? 1.0 : total / count;
}

// ---------------------------------------------------------------------------
// Intersection core and minimal-core search.
// ---------------------------------------------------------------------------

/// Path-filtered intersection of the sheaves' edge sets; may be empty.
inline EdgeMask intersection_core(const ComputationGraph& g, const std::vector<Sheaf>& sheaves) {
  require(sheaves.size() >= 2, "intersection_core: need at least two sheaves");
  EdgeMask inter = sheaves[0].mask;
  for (size_t i = 1; i < sheaves.size(); ++i) inter = mask_intersection(inter, sheaves[i].mask);
  return path_filter(g, inter);
}

struct MinimalCoreResult {
  std::vector<int> edges;          // the qualifying subset (core edge indices)
  double accuracy = 0.0;           // its masked accuracy
  std::int64_t failed_before = 0;  // enumerated-and-failed subsets before the winner;
                                   // includes every strictly smaller subset
  double best_failing_accuracy = 0.0;
};

namespace detail {

inline std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
  return r;
}

// Visits size-k index subsets of [0, n) in lexicographic order.
template <class Fn>
bool for_each_subset(int n, int k, Fn&& fn) {
  std::vector<int> idx(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) idx[static_cast<size_t>(i)] = i;
  if (k == 0) return fn(idx);
  for (;;) {
    if (!fn(idx)) return false;
    int i = k - 1;
    while (i >= 0 && idx[static_cast<size_t>(i)] == n - k + i) --i;
    if (i < 0) return true;
    ++idx[static_cast<size_t>(i)];
    for (int j = i + 1; j < k; ++j)
      idx[static_cast<size_t>(j)] = idx[static_cast<size_t>(j - 1)] + 1;
  }
}

}  // namespace detail

/// Masked accuracy of keeping exactly `kept` edges, with an early exit once
/// the accuracy threshold is unreachable.
inline double masked_accuracy(const Parameters& p, const ModelConfig& cfg,
                              const ComputationGraph& g, const EdgeMask& kept,
                              const TaskDataset& ds,
                              std::optional<double> give_up_below = std::nullopt) {
  size_t correct = 0;
  const size_t n = ds.examples.size();
  size_t allowed_failures = n;
  if (give_up_below)
    allowed_failures = static_cast<size_t>((1.0 - *give_up_below) * static_cast<double>(n)) + 1;
  size_t failures = 0;
  for (size_t i = 0; i < n; ++i) {
    const auto& ex = ds.examples[i];
    Array logits = masked_forward_hard(p, cfg, g, kept, ex.tokens);
    if (answer_margin(logits, ex.correct, ex.incorrect) > 0.0) {
      ++correct;
    } else if (++failures > allowed_failures) {
      return static_cast<double>(correct) / static_cast<double>(n);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

/// Exhaustive search for the smallest subset of `core` whose standalone
/// masked accuracy reaches the threshold. Enumerates subsets by increasing
/// size, lexicographic within a size, so the result is the deterministic
/// first qualifier; everything smaller has been checked and failed (the
/// counts are reported back as the built-in minimality verification).
inline std::optional<MinimalCoreResult> minimal_core_search(
    const Parameters& p, const ModelConfig& cfg, const ComputationGraph& g,
    const std::vector<int>& core, const TaskDataset& ds, double acc_threshold, int max_size,
    std::uint64_t budget = 1000000) {
  require(!ds.examples.empty(), "minimal_core_search: dataset is empty");
  require(max_size >= 0, "minimal_core_search: max_size must be >= 0");
  const int n = static_cast<int>(core.size());
  std::uint64_t total = 0;
  for (int k = 0; k <= std::min(max_size, n); ++k) total += detail::binomial(n, k);
  if (total > budget)
    throw budget_error("minimal_core_search: enumeration needs " + std::to_string(total) +
                       " subsets, budget is " + std::to_string(budget));

  MinimalCoreResult res;
  for (int k = 0; k <= std::min(max_size, n); ++k) {
    std::optional<MinimalCoreResult> found;
    detail::for_each_subset(n, k, [&](const std::vector<int>& idx) {
      EdgeMask kept = empty_mask(g);
      std::vector<int> edges;
      edges.reserve(idx.size());
      for (int i : idx) {
        kept[static_cast<size_t>(core[static_cast<size_t>(i)])] = 1;
        edges.push_back(core[static_cast<size_t>(i)]);
      }
      double acc = masked_accuracy(p, cfg, g, kept, ds, acc_threshold);
      if (acc >= acc_threshold) {
        found = MinimalCoreResult{edges, acc, res.failed_before, res.best_failing_accuracy};
        return false;  // stop enumeration at this size
      }
      ++res.failed_before;
      res.best_failing_accuracy = std::max(res.best_failing_accuracy, acc);
      return true;
    });
    if (found) return found;
  }
  return std::nullopt;
}

/// Accuracy after removing `removed` (a subset of base_mask) from base_mask.
inline double ablate_core(const Parameters& p, const ModelConfig& cfg,
                          const ComputationGraph& g, const EdgeMask& base_mask,
                          const std::vector<int>& removed, const TaskDataset& ds) {
  EdgeMask kept = base_mask;
  for (int e : removed) {
    require(e >= 0 && static_cast<size_t>(e) < kept.size(),
            "ablate_core: edge index out of range");
    require(base_mask[static_cast<size_t>(e)], "ablate_core: removed edge not in base mask");
    kept[static_cast<size_t>(e)] = 0;
  }
  return masked_accuracy(p, cfg, g, kept, ds);
}

// ---------------------------------------------------------------------------
// Layer profiles.
// ---------------------------------------------------------------------------

/// Selected incoming-edge counts per destination. Rows cover every layer
/// split by head/MLP destination kind, plus one row for the output node, so
/// the counts sum to the sheaf's edge count.
struct LayerProfile {
  struct Row {
    int layer;         // -1 for the output row
    std::string kind;  // "head", "mlp", or "output"
    std::int64_t count;
  };
  std::vector<Row> rows;
};

inline LayerProfile layer_profile(const ComputationGraph& g, const EdgeMask& mask) {
  require(mask.size() == g.edge_count(), "layer_profile: mask length mismatch");
  LayerProfile prof;
  for (int l = 0; l < g.n_layers; ++l) {
    prof.rows.push_back({l, "head", 0});
    prof.rows.push_back({l, "mlp", 0});
  }
  prof.rows.push_back({-1, "output", 0});
  for (size_t e = 0; e < g.edges.size(); ++e) {
    if (!mask[e]) continue;
    const NodeInfo& dst = g.nodes[static_cast<size_t>(g.edges[e].dst)];
    if (dst.kind == NodeKind::head) {
      prof.rows[static_cast<size_t>(2 * dst.layer)].count++;
    } else if (dst.kind == NodeKind::mlp) {
      prof.rows[static_cast<size_t>(2 * dst.layer + 1)].count++;
    } else {
      prof.rows.back().count++;
    }
  }
  return prof;
}

}  // namespace sheaflab

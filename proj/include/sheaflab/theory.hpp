#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "sheaflab/analysis.hpp"
#include "sheaflab/discovery.hpp"

namespace sheaflab {

// ---------------------------------------------------------------------------
// Edge signatures: first-order (gate-gradient) readout contributions.
// ---------------------------------------------------------------------------

enum class Readout { pair_margin, answer_logits };

/// Per-edge linearized readout contributions s_e in R^D, stacked over N
/// evaluation inputs times m readout dimensions (D = N*m), together with the
/// reference readout Z of the full model and the signature bound
/// B = max_e ||s_e||_inf.
struct SignatureMatrix {
  std::vector<int> edge_universe;          // graph edge indices covered, in order
  std::vector<std::vector<double>> sig;    // [edge][D]
  std::vector<double> reference;           // Z, length D
  int dims = 0;                            // D
  double bound = 0.0;                      // B
};

/// Signatures as derivatives of the readout w.r.t. continuous per-edge gates
/// evaluated at the full model (all gates at 1), one gradient pass per
/// readout coordinate per input.
inline SignatureMatrix edge_signatures(const Parameters& params, const ModelConfig& cfg,
                                       const ComputationGraph& g, const TaskDataset& sample,
                                       Readout readout) {
  require(!sample.examples.empty(), "edge_signatures: empty sample");
  const int m = readout == Readout::pair_margin ? 1 : 2;
  const int E = static_cast<int>(g.edge_count());
  SignatureMatrix out;
  out.dims = static_cast<int>(sample.examples.size()) * m;
  out.edge_universe.resize(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) out.edge_universe[static_cast<size_t>(e)] = e;
  out.sig.assign(static_cast<size_t>(E), std::vector<double>(static_cast<size_t>(out.dims), 0.0));
  out.reference.assign(static_cast<size_t>(out.dims), 0.0);

  for (size_t j = 0; j < sample.examples.size(); ++j) {
    const TaskExample& ex = sample.examples[j];
    Tape t;
    TapeBackend tb{t};
    auto bound = bind_model(tb, params, false, cfg.identity_activations);
    std::vector<Value> gates;
    gates.reserve(static_cast<size_t>(E));
    for (int e = 0; e < E; ++e) gates.push_back(t.leaf(Array::scalar(1.0), true));
    auto run = masked_forward_core(tb, bound, g, gates, ex.tokens);
    const int n = static_cast<int>(ex.tokens.size());
    Value row = t.reshape(t.slice_rows(run.logits, n - 1, n), {cfg.vocab_size});
    std::vector<Value> coords;
    if (readout == Readout::pair_margin) {
      coords.push_back(t.sub(t.pick(row, ex.correct), t.pick(row, ex.incorrect)));
    } else {
      coords.push_back(t.pick(row, ex.correct));
      coords.push_back(t.pick(row, ex.incorrect));
    }
    for (int r = 0; r < m; ++r) {
      const size_t d = j * static_cast<size_t>(m) + static_cast<size_t>(r);
      out.reference[d] = t.val(coords[static_cast<size_t>(r)]).data[0];
      t.backward(coords[static_cast<size_t>(r)]);
      for (int e = 0; e < E; ++e) {
        const Array& ge = t.grad(gates[static_cast<size_t>(e)]);
        out.sig[static_cast<size_t>(e)][d] = ge.data.empty() ? 0.0 : ge.data[0];
      }
    }
  }
  for (const auto& s : out.sig)
    for (double v : s) out.bound = std::max(out.bound, std::fabs(v));
  return out;
}

/// Masked readout of the same coordinates edge_signatures stacks, for a hard
/// kept-edge mask.
inline std::vector<double> masked_readout(const Parameters& params, const ModelConfig& cfg,
                                          const ComputationGraph& g, const EdgeMask& kept,
                                          const TaskDataset& sample, Readout readout) {
  std::vector<double> out;
  for (const auto& ex : sample.examples) {
    Array logits = masked_forward_hard(params, cfg, g, kept, ex.tokens);
    const int last = logits.shape[0] - 1;
    if (readout == Readout::pair_margin) {
      out.push_back(logits.at(last, ex.correct) - logits.at(last, ex.incorrect));
    } else {
      out.push_back(logits.at(last, ex.correct));
      out.push_back(logits.at(last, ex.incorrect));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subset sums and quantisation.
// ---------------------------------------------------------------------------

/// Sum of signature vectors over a subset (positions into the universe).
inline std::vector<double> subset_sum(const SignatureMatrix& sig, const std::vector<int>& subset) {
  std::vector<double> acc(static_cast<size_t>(sig.dims), 0.0);
  for (int e : subset) {
    require(e >= 0 && static_cast<size_t>(e) < sig.sig.size(), "subset_sum: index out of range");
    const auto& s = sig.sig[static_cast<size_t>(e)];
    for (size_t d = 0; d < acc.size(); ++d) acc[d] += s[d];
  }
  return acc;
}

inline double linf_norm(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

/// Coordinate-wise grid quantisation: delta * round(v/delta), ties at the
/// half-grid rounding away from zero.
inline std::vector<double> quantize(const std::vector<double>& v, double delta) {
  require(delta > 0, "quantize: delta must be > 0");
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = delta * std::round(v[i] / delta);
  return out;
}

inline std::vector<std::int64_t> grid_key(const std::vector<double>& v, double delta) {
  std::vector<std::int64_t> key(v.size());
  for (size_t i = 0; i < v.size(); ++i) key[i] = std::llround(v[i] / delta);
  return key;
}

// ---------------------------------------------------------------------------
// Counting bounds.
// ---------------------------------------------------------------------------

/// Largest intersection size t for which two size-s sets still have
/// IoU = t/(2s-t) <= tau; equals floor(2*tau*s / (1+tau)).
inline int t_tau(double tau, int s) {
  require(tau > 0.0 && tau < 1.0, "t_tau: tau must be in (0,1)");
  require(s >= 1, "t_tau: s must be >= 1");
  // Scan with the defining predicate; immune to floating boundary error in
  // the closed-form floor.
  int t = 0;
  for (int cand = 0; cand <= s; ++cand)
    if (static_cast<double>(cand) / static_cast<double>(2 * s - cand) <= tau) t = cand;
  return t;
}

inline std::uint64_t binomial64(std::uint64_t n, std::uint64_t k) {
  return detail::binomial(n, k);
}

/// Count of size-s subsets of an E-universe whose intersection with a fixed
/// size-s set exceeds t_tau: sum_{t=t_tau+1}^{s} C(s,t) C(E-s, s-t).
inline std::uint64_t v_tau(int E, int s, double tau) {
  require(1 <= s && s <= E, "v_tau: need 1 <= s <= E");
  const int t0 = t_tau(tau, s);
  std::uint64_t total = 0;
  for (int t = t0 + 1; t <= s; ++t)
    total += binomial64(static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(t)) *
             binomial64(static_cast<std::uint64_t>(E - s), static_cast<std::uint64_t>(s - t));
  return total;
}

// ---------------------------------------------------------------------------
// Pigeonhole collision search.
// ---------------------------------------------------------------------------

/// Two equal-size edge subsets whose quantized subset sums collide.
struct CollisionWitness {
  std::vector<int> subset_a, subset_b;  // positions into the signature universe
  double linf_gap = 0.0;                // ||S(A) - S(B)||_inf, verified <= delta
  double iou = 0.0;
  double delta = 0.0;
  double tau = -1.0;  // set by the low-IoU search
  std::vector<std::int64_t> bin;
};

inline double subset_iou(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  std::vector<int> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

namespace detail {

inline void check_collision_budget(int E, int s, std::uint64_t budget) {
  require(s >= 1 && s <= E, "collision search: need 1 <= s <= E");
  const std::uint64_t total = binomial(static_cast<std::uint64_t>(E),
                                       static_cast<std::uint64_t>(s));
  if (total > budget)
    throw budget_error("collision search: C(" + std::to_string(E) + "," + std::to_string(s) +
                       ") = " + std::to_string(total) + " subsets exceeds budget " +
                       std::to_string(budget));
}

}  // namespace detail

/// Hashes all size-s subsets by their quantized subset sum; the first bucket
/// that receives a second member yields the witness. The returned pair is
/// re-verified against delta directly (exactly delta, no hidden constant).
inline std::optional<CollisionWitness> find_collision(const SignatureMatrix& sig, int s,
                                                      double delta,
                                                      std::uint64_t budget = 10000000) {
  const int E = static_cast<int>(sig.sig.size());
  detail::check_collision_budget(E, s, budget);
  require(delta > 0, "find_collision: delta must be > 0");
  std::map<std::vector<std::int64_t>, std::vector<int>> first_member;
  std::optional<CollisionWitness> witness;
  detail::for_each_subset(E, s, [&](const std::vector<int>& idx) {
    auto key = grid_key(subset_sum(sig, idx), delta);
    auto [it, inserted] = first_member.try_emplace(key, idx);
    if (inserted) return true;
    CollisionWitness w;
    w.subset_a = it->second;
    w.subset_b = idx;
    w.delta = delta;
    w.bin = key;
    auto diff = subset_sum(sig, w.subset_a);
    auto sb = subset_sum(sig, w.subset_b);
    for (size_t d = 0; d < diff.size(); ++d) diff[d] -= sb[d];
    w.linf_gap = linf_norm(diff);
    require(w.linf_gap <= delta, "find_collision: witness failed delta verification");
    w.iou = subset_iou(w.subset_a, w.subset_b);
    witness = std::move(w);
    return false;
  });
  return witness;
}

/// Searches every quantisation bucket (in first-seen order) for a pair with
/// |A /\ B| <= t_tau, i.e. IoU <= tau; both the delta-closeness and the IoU
/// bound are verified on the returned witness. Buckets larger than 1 + V_tau
/// are guaranteed to contain such a pair.
inline std::optional<CollisionWitness> find_low_iou_collision(const SignatureMatrix& sig, int s,
                                                              double delta, double tau,
                                                              std::uint64_t budget = 10000000) {
  const int E = static_cast<int>(sig.sig.size());
  detail::check_collision_budget(E, s, budget);
  require(delta > 0, "find_low_iou_collision: delta must be > 0");
  require(tau >= 0 && tau < 1, "find_low_iou_collision: tau must be in [0,1)");
  const int max_inter = tau == 0.0 ? 0 : t_tau(tau, s);

  std::vector<std::vector<int>> bucket_members;
  std::map<std::vector<std::int64_t>, size_t> bucket_of;
  std::vector<std::vector<std::int64_t>> bucket_keys;
  std::vector<std::vector<std::vector<int>>> buckets;
  detail::for_each_subset(E, s, [&](const std::vector<int>& idx) {
    auto key = grid_key(subset_sum(sig, idx), delta);
    auto [it, inserted] = bucket_of.try_emplace(key, buckets.size());
    if (inserted) {
      buckets.emplace_back();
      bucket_keys.push_back(key);
    }
    buckets[it->second].push_back(idx);
    return true;
  });

  const std::uint64_t pair_budget = 100000000;
  std::uint64_t pairs_checked = 0;
  for (size_t b = 0; b < buckets.size(); ++b) {
    const auto& members = buckets[b];
    for (size_t i = 0; i < members.size(); ++i)
      for (size_t j = i + 1; j < members.size(); ++j) {
        if (++pairs_checked > pair_budget)
          throw budget_error("find_low_iou_collision: pair comparisons exceed budget " +
                             std::to_string(pair_budget));
        std::vector<int> inter;
        std::vector<int> sa = members[i], sb = members[j];
        std::sort(sa.begin(), sa.end());
        std::sort(sb.begin(), sb.end());
        std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(),
                              std::back_inserter(inter));
        if (static_cast<int>(inter.size()) > max_inter) continue;
        CollisionWitness w;
        w.subset_a = members[i];
        w.subset_b = members[j];
        w.delta = delta;
        w.tau = tau;
        w.bin = bucket_keys[b];
        auto diff = subset_sum(sig, w.subset_a);
        auto other = subset_sum(sig, w.subset_b);
        for (size_t d = 0; d < diff.size(); ++d) diff[d] -= other[d];
        w.linf_gap = linf_norm(diff);
        w.iou = subset_iou(w.subset_a, w.subset_b);
        require(w.linf_gap <= delta,
                "find_low_iou_collision: witness failed delta verification");
        require(w.iou <= tau || (tau == 0.0 && w.iou == 0.0),
                "find_low_iou_collision: witness failed IoU verification");
        return w;
      }
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Margin preservation.
// ---------------------------------------------------------------------------

enum class MarginOutcome { preserved, violated, condition_unmet };

/// If margin(z) >= gamma and ||z'-z||_inf < gamma/2, the argmax must be
/// unchanged (a flip here is a bug, reported as `violated`); otherwise the
/// lemma's precondition does not apply and `condition_unmet` is returned.
inline MarginOutcome check_margin_preservation(const std::vector<double>& z,
                                               const std::vector<double>& z_perturbed,
                                               double gamma) {
  require(z.size() == z_perturbed.size() && z.size() >= 2,
          "check_margin_preservation: need two aligned logit vectors of length >= 2");
  size_t best = 0;
  for (size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = i;
  double runner_up = -std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < z.size(); ++i) {
    if (i == best) continue;
    require(z[i] != z[best], "check_margin_preservation: argmax of z is not unique");
    runner_up = std::max(runner_up, z[i]);
  }
  const double margin = z[best] - runner_up;
  double rho = 0.0;
  for (size_t i = 0; i < z.size(); ++i) rho = std::max(rho, std::fabs(z_perturbed[i] - z[i]));

  size_t best2 = 0;
  for (size_t i = 1; i < z_perturbed.size(); ++i)
    if (z_perturbed[i] > z_perturbed[best2]) best2 = i;

  if (margin >= gamma && rho < gamma / 2.0)
    return best2 == best ? MarginOutcome::preserved : MarginOutcome::violated;
  return MarginOutcome::condition_unmet;
}

// ---------------------------------------------------------------------------
// Linearisation residual.
// ---------------------------------------------------------------------------

/// Empirical remainder of the first-order model:
///   eta = max over the sample of || Z_masked(subset) - (Z - sum_{e off} s_e) ||_inf,
/// where the subset lists kept positions of the signature universe and all
/// other universe edges are ablated (edges outside the universe stay on).
inline double linearization_residual(const Parameters& params, const ModelConfig& cfg,
                                     const ComputationGraph& g, const SignatureMatrix& sig,
                                     const std::vector<int>& subset, const TaskDataset& sample,
                                     Readout readout) {
  EdgeMask kept = full_mask(g);
  std::vector<std::uint8_t> in_subset(sig.sig.size(), 0);
  for (int pos : subset) {
    require(pos >= 0 && static_cast<size_t>(pos) < sig.sig.size(),
            "linearization_residual: subset position out of range");
    in_subset[static_cast<size_t>(pos)] = 1;
  }
  std::vector<double> predicted = sig.reference;
  for (size_t pos = 0; pos < sig.sig.size(); ++pos) {
    if (in_subset[pos]) continue;
    kept[static_cast<size_t>(sig.edge_universe[pos])] = 0;
    for (size_t d = 0; d < predicted.size(); ++d) predicted[d] -= sig.sig[pos][d];
  }
  std::vector<double> actual = masked_readout(params, cfg, g, kept, sample, readout);
  double eta = 0.0;
  for (size_t d = 0; d < actual.size(); ++d)
    eta = std::max(eta, std::fabs(actual[d] - predicted[d]));
  return eta;
}

// ---------------------------------------------------------------------------
// Synthetic signature instances and the linear fixture.
// ---------------------------------------------------------------------------

/// Restrict a signature matrix to a sub-universe (positions into the current
/// universe). Used to run collision searches over chosen edge families.
inline SignatureMatrix restrict_universe(const SignatureMatrix& sig,
                                         const std::vector<int>& positions) {
  SignatureMatrix out;
  out.dims = sig.dims;
  out.reference = sig.reference;
  for (int pos : positions) {
    require(pos >= 0 && static_cast<size_t>(pos) < sig.sig.size(),
            "restrict_universe: position out of range");
    out.edge_universe.push_back(sig.edge_universe[static_cast<size_t>(pos)]);
    out.sig.push_back(sig.sig[static_cast<size_t>(pos)]);
  }
  for (const auto& row : out.sig)
    for (double v : row) out.bound = std::max(out.bound, std::fabs(v));
  return out;
}

/// Random signature instance with entries uniform in [-bound, bound].
inline SignatureMatrix synthetic_signatures(int E, int D, double bound, std::uint64_t seed) {
  require(E >= 1 && D >= 1 && bound > 0, "synthetic_signatures: bad instance shape");
  SignatureMatrix sig;
  sig.dims = D;
  sig.edge_universe.resize(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) sig.edge_universe[static_cast<size_t>(e)] = e;
  Rng rng(seed);
  sig.sig.assign(static_cast<size_t>(E), std::vector<double>(static_cast<size_t>(D), 0.0));
  for (auto& row : sig.sig)
    for (double& v : row) v = bound * (2.0 * rng.uniform() - 1.0);
  sig.reference.assign(static_cast<size_t>(D), 0.0);
  for (const auto& row : sig.sig)
    for (double v : row) sig.bound = std::max(sig.bound, std::fabs(v));
  return sig;
}

/// Identical-signature instance (every edge shares one signature vector).
inline SignatureMatrix identical_signatures(int E, int D, double value = 1.0) {
  SignatureMatrix sig;
  sig.dims = D;
  sig.edge_universe.resize(static_cast<size_t>(E));
  for (int e = 0; e < E; ++e) sig.edge_universe[static_cast<size_t>(e)] = e;
  sig.sig.assign(static_cast<size_t>(E), std::vector<double>(static_cast<size_t>(D), value));
  sig.reference.assign(static_cast<size_t>(D), 0.0);
  sig.bound = std::fabs(value);
  return sig;
}

/// Linear fixture: identity MLP activations, zeroed W_Q/W_K (attention mixes
/// with a constant causal-uniform pattern), and component paths scaled down
/// to `path_scale` so first-order interactions between removed edges are
/// below measurement tolerance while remaining nonzero.
inline std::pair<Parameters, ModelConfig> make_linear_fixture(int vocab, std::uint64_t seed,
                                                              double path_scale = 1e-12) {
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_head = 4;
  cfg.d_mlp = 8;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 12;
  cfg.identity_activations = true;
  Parameters p = init_model(cfg, seed);
  for (auto& layer : p.heads)
    for (auto& h : layer) {
      std::fill(h.wq.data.begin(), h.wq.data.end(), 0.0);
      std::fill(h.wk.data.begin(), h.wk.data.end(), 0.0);
      for (double& v : h.wo.data) v *= path_scale / 0.02;
    }
  for (auto& m : p.mlps)
    for (double& v : m.w_out.data) v *= path_scale / 0.02;
  return {std::move(p), cfg};
}

}  // namespace sheaflab

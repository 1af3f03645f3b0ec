#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sheaflab/graph.hpp"
#include "sheaflab/tasks.hpp"
#include "sheaflab/trainer.hpp"

namespace sheaflab {

// Logit value used to pin excluded edges: sigmoid underflows to exactly 0,
// so pinned edges can never activate or be selected.
inline constexpr double kExcludedLogit = -1e9;

struct DiscoveryConfig {
  double lambda_sparsity = 1.5;
  double lambda_complete = 1.0;
  double lambda_overlap = 10.0;
  enum class LossType { pair_ce, full_kl };
  LossType loss_type = LossType::pair_ce;
  int steps = 5000;
  double learning_rate = 0.03;
  double tau = 0.5;
  double logit_init = 4.5;
  double logit_init_noise = 0.01;
  int batch_size = 8;
  std::uint64_t seed = 0;
  std::vector<int> excluded_edges;  // pinned off, never selectable
  std::vector<int> repelled_set;    // R: edges penalised by the overlap term

  void validate() const {
    require(lambda_sparsity >= 0 && lambda_complete >= 0 && lambda_overlap >= 0,
            "DiscoveryConfig: loss weights must be >= 0");
    require(tau > 0 && std::isfinite(tau), "DiscoveryConfig: tau must be finite positive");
    require(steps >= 1, "DiscoveryConfig: steps must be >= 1");
    require(batch_size >= 1, "DiscoveryConfig: batch size must be >= 1");
    require(learning_rate > 0, "DiscoveryConfig: learning rate must be > 0");
  }
};

// ---------------------------------------------------------------------------
// Mask sampling (Gumbel-Sigmoid relaxation + straight-through estimator).
// ---------------------------------------------------------------------------

struct MaskSample {
  Value scores;  // s_e in (0,1), rank-1 of length |E|
  Value mask;    // m_e in {0,1} forward, gradient of s_e
};

/// Deterministic core: s_e = sigmoid((l_e - noise_e) / tau) plus the
/// straight-through hard threshold at s_e > 0.5.
inline MaskSample sample_mask_with_noise(Tape& t, Value logits, double tau, Array noise) {
  require(tau > 0 && std::isfinite(tau), "sample_mask: tau must be finite positive");
  require_same_shape(t.val(logits), noise, "sample_mask");
  Value s = t.logistic(t.scale(t.sub(logits, t.constant(std::move(noise))), 1.0 / tau));
  return {s, straight_through(t, s)};
}

/// s_e = sigmoid((l_e - log(log U1 / log U2)) / tau) with U1, U2 ~ U(0,1)
/// redrawn per call; U values of exactly 0 or 1 are resampled.
inline MaskSample sample_mask(Tape& t, Value logits, double tau, Rng& rng) {
  const Array& l = t.val(logits);
  Array noise(l.shape);
  for (double& v : noise.data) {
    const double u1 = rng.uniform_open();
    const double u2 = rng.uniform_open();
    v = std::log(std::log(u1) / std::log(u2));
  }
  return sample_mask_with_noise(t, logits, tau, std::move(noise));
}

// ---------------------------------------------------------------------------
// Objective terms. Tape versions are used during optimisation; the plain
// doubles versions exist for reporting and tests.
// ---------------------------------------------------------------------------

/// (1/|E|) sum_e sigmoid(l_e).
inline Value loss_sparsity(Tape& t, Value logits) { return t.mean(t.logistic(logits)); }

inline double loss_sparsity(const std::vector<double>& logits) {
  Tape t;
  return t.val(loss_sparsity(t, t.constant(Array({static_cast<int>(logits.size())}, logits))))
      .data[0];
}

/// (1/|E|) sum_{e in R} sigmoid(l_e); note the 1/|E| normalisation.
inline Value loss_overlap(Tape& t, Value logits, const std::vector<int>& repelled) {
  const Array& l = t.val(logits);
  Array indicator(l.shape);
  for (int e : repelled) {
    require(e >= 0 && static_cast<size_t>(e) < l.numel(), "loss_overlap: edge index out of range");
    indicator.data[static_cast<size_t>(e)] = 1.0;
  }
  return t.scale(t.sum(t.mul(t.logistic(logits), t.constant(std::move(indicator)))),
                 1.0 / static_cast<double>(l.numel()));
}

inline double loss_overlap(const std::vector<double>& logits, const std::vector<int>& repelled) {
  Tape t;
  return t
      .val(loss_overlap(t, t.constant(Array({static_cast<int>(logits.size())}, logits)), repelled))
      .data[0];
}

/// Cross-entropy over the 2-way softmax of (correct, incorrect) answer
/// logits: softplus(-(z_c - z_i)).
inline Value pair_ce_loss(Tape& t, Value final_row, int correct, int incorrect) {
  Value margin = t.sub(t.pick(final_row, correct), t.pick(final_row, incorrect));
  return t.softplus(t.scale(margin, -1.0));
}

/// KL(full-model vocab distribution || masked-model vocab distribution) at
/// the final position. `full_probs`/`full_logprobs` come from the reference
/// model and are constants.
inline Value kl_fidelity_loss(Tape& t, Value final_row, const Array& full_probs,
                              const Array& full_logprobs) {
  Value logq = t.log_softmax_row(final_row);
  Value diff = t.sub(t.constant(full_logprobs), logq);
  return t.sum(t.mul(t.constant(full_probs), diff));
}

/// KL( pair distribution of (z_c, z_i) || Uniform(2) ) expressed through the
/// pair margin m: log 2 - H(sigmoid(m)). Zero exactly at chance, log 2 in the
/// confident limit, symmetric under margin negation.
inline Value uniform_kl_from_margin(Tape& t, Value margin) {
  Value pm = t.logistic(margin);
  Value pn = t.logistic(t.scale(margin, -1.0));
  Value entropy =
      t.add(t.mul(pm, t.softplus(t.scale(margin, -1.0))), t.mul(pn, t.softplus(margin)));
  return t.sub(t.constant(std::log(2.0)), entropy);
}

/// Plain-number KL(p || q) over the answer pair, from the two margins.
inline double pair_kl(double margin_p, double margin_q) {
  auto log_sigmoid = [](double x) { return -(std::max(-x, 0.0) + std::log1p(std::exp(-std::fabs(x)))); };
  const double p1 = 1.0 / (1.0 + std::exp(-margin_p));
  const double p0 = 1.0 - p1;
  return p1 * (log_sigmoid(margin_p) - log_sigmoid(margin_q)) +
         p0 * (log_sigmoid(-margin_p) - log_sigmoid(-margin_q));
}

// ---------------------------------------------------------------------------
// Differentiable sheaf discovery with Overlap-Aware Sheaf Repulsion.
// ---------------------------------------------------------------------------

namespace detail {

inline Array final_row(const Array& logits) {
  const int n = logits.shape[0];
  Array row({logits.shape[1]});
  std::copy_n(&logits.data[static_cast<size_t>(n - 1) * logits.shape[1]],
              logits.shape[1], row.data.begin());
  return row;
}

}  // namespace detail

struct SheafMetrics {
  double accuracy = 0.0;
  double complement_accuracy = 0.0;
  double density = 0.0;
};

inline SheafMetrics sheaf_metrics(const Parameters& p, const ModelConfig& cfg,
                                  const ComputationGraph& g, const EdgeMask& mask,
                                  const TaskDataset& ds) {
  SheafMetrics m;
  auto fn = [&](const EdgeMask& mm) {
    return evaluate_accuracy(
        [&](const std::vector<int>& toks) { return masked_forward_hard(p, cfg, g, mm, toks); },
        ds);
  };
  m.accuracy = fn(mask);
  m.complement_accuracy = fn(complement(mask));
  m.density = static_cast<double>(popcount(mask)) / static_cast<double>(mask.size());
  return m;
}

/// DiscoGP-style discovery: optimise per-edge mask logits under fidelity,
/// sparsity, completeness and (optionally) overlap-repulsion objectives, with
/// straight-through Gumbel-Sigmoid masks re-sampled every step. The emitted
/// sheaf is the noise-free readout sigmoid(l_e) > 0.5.
struct DiscoveryTrace {
  int step;
  double fidelity, sparsity, completeness, overlap;
};

inline Sheaf discover(const Parameters& params, const ModelConfig& cfg,
                      const ComputationGraph& g, const TaskDataset& dataset,
                      const DiscoveryConfig& dc, const std::string& config_hash = "",
                      const std::function<void(const DiscoveryTrace&)>& trace = {}) {
  dc.validate();
  cfg.validate();
  require(!dataset.examples.empty(), "discover: dataset is empty");
  const int E = static_cast<int>(g.edge_count());

  // Reject setups where no selectable edge can form an input->output path.
  {
    EdgeMask selectable = full_mask(g);
    for (int e : dc.excluded_edges) {
      require(e >= 0 && e < E, "discover: excluded edge index out of range");
      selectable[static_cast<size_t>(e)] = 0;
    }
    require(popcount(path_filter(g, selectable)) > 0,
            "discover: excluded edges leave no input->output path");
  }

  Rng rng(dc.seed);
  Array logits({E});
  for (double& v : logits.data) v = dc.logit_init + dc.logit_init_noise * rng.normal();
  for (int e : dc.excluded_edges) logits.data[static_cast<size_t>(e)] = kExcludedLogit;

  // Reference distributions for the KL fidelity loss.
  std::vector<Array> full_probs, full_logprobs;
  if (dc.loss_type == DiscoveryConfig::LossType::full_kl) {
    for (const auto& ex : dataset.examples) {
      Array row = detail::final_row(forward_full(params, cfg, ex.tokens).logits);
      Array logp = kernels::log_softmax_row(row);
      Array p = logp;
      for (double& v : p.data) v = std::exp(v);
      full_probs.push_back(std::move(p));
      full_logprobs.push_back(std::move(logp));
    }
  }

  AdamOptimizer opt(dc.learning_rate, 0.9, 0.999, 1e-8, 0.0);
  for (int step = 0; step < dc.steps; ++step) {
    Tape t;
    TapeBackend tb{t};
    auto bound = bind_model(tb, params, false, cfg.identity_activations);
    Value l = t.leaf(logits, true);
    MaskSample ms = sample_mask(t, l, dc.tau, rng);
    Value comp_mask = t.sub(t.constant(Array::full({E}, 1.0)), ms.mask);

    std::vector<Value> gates, comp_gates;
    gates.reserve(static_cast<size_t>(E));
    comp_gates.reserve(static_cast<size_t>(E));
    for (int e = 0; e < E; ++e) {
      gates.push_back(t.pick(ms.mask, e));
      comp_gates.push_back(t.pick(comp_mask, e));
    }

    Value fid = t.constant(0.0);
    Value comp = t.constant(0.0);
    for (int i = 0; i < dc.batch_size; ++i) {
      const size_t idx = rng.below(dataset.examples.size());
      const TaskExample& ex = dataset.examples[idx];
      const int n = static_cast<int>(ex.tokens.size());
      auto run = masked_forward_core(tb, bound, g, gates, ex.tokens);
      Value row = t.reshape(t.slice_rows(run.logits, n - 1, n), {cfg.vocab_size});
      if (dc.loss_type == DiscoveryConfig::LossType::pair_ce) {
        fid = t.add(fid, pair_ce_loss(t, row, ex.correct, ex.incorrect));
      } else {
        fid = t.add(fid, kl_fidelity_loss(t, row, full_probs[idx], full_logprobs[idx]));
      }
      if (dc.lambda_complete > 0) {
        auto crun = masked_forward_core(tb, bound, g, comp_gates, ex.tokens);
        Value crow = t.reshape(t.slice_rows(crun.logits, n - 1, n), {cfg.vocab_size});
        Value cmargin = t.sub(t.pick(crow, ex.correct), t.pick(crow, ex.incorrect));
        comp = t.add(comp, uniform_kl_from_margin(t, cmargin));
      }
    }
    fid = t.scale(fid, 1.0 / dc.batch_size);
    comp = t.scale(comp, 1.0 / dc.batch_size);

    Value loss = fid;
    Value sp = loss_sparsity(t, l);
    if (dc.lambda_sparsity > 0) loss = t.add(loss, t.scale(sp, dc.lambda_sparsity));
    if (dc.lambda_complete > 0) loss = t.add(loss, t.scale(comp, dc.lambda_complete));
    Value ov = t.constant(0.0);
    if (!dc.repelled_set.empty()) ov = loss_overlap(t, l, dc.repelled_set);
    if (dc.lambda_overlap > 0 && !dc.repelled_set.empty())
      loss = t.add(loss, t.scale(ov, dc.lambda_overlap));
    if (trace)
      trace({step, t.val(fid).data[0], t.val(sp).data[0], t.val(comp).data[0],
             t.val(ov).data[0]});

    const double loss_v = t.val(loss).data[0];
    require(std::isfinite(loss_v),
            "discover: non-finite loss at step " + std::to_string(step));
    t.backward(loss);
    std::vector<Array> grads = {t.grad(l)};
    std::vector<Array*> target = {&logits};
    opt.step(target, grads);
    for (int e : dc.excluded_edges) logits.data[static_cast<size_t>(e)] = kExcludedLogit;
  }

  Sheaf sheaf;
  sheaf.mask.assign(static_cast<size_t>(E), 0);
  for (int e = 0; e < E; ++e)
    sheaf.mask[static_cast<size_t>(e)] = logits.data[static_cast<size_t>(e)] > 0.0 ? 1 : 0;
  for (int e : dc.excluded_edges)
    require(!sheaf.mask[static_cast<size_t>(e)], "discover: excluded edge appeared in sheaf");
  sheaf.mask_logits.assign(logits.data.begin(), logits.data.end());
  SheafMetrics m = sheaf_metrics(params, cfg, g, sheaf.mask, dataset);
  sheaf.accuracy = m.accuracy;
  sheaf.complement_accuracy = m.complement_accuracy;
  sheaf.density = m.density;
  sheaf.edge_count = static_cast<std::int64_t>(popcount(sheaf.mask));
  sheaf.seed = dc.seed;
  sheaf.method =
      (dc.lambda_overlap > 0 && !dc.repelled_set.empty()) ? "discogp+oasr" : "discogp";
  sheaf.config_hash = config_hash;
  return sheaf;
}

/// Run discovery k times; after each run the repelled set R accumulates the
/// edges of every sheaf found so far, repelling later runs away from them.
/// Per-run seeds derive deterministically from the base seed.
inline std::vector<Sheaf> oasr_sequence(const Parameters& params, const ModelConfig& cfg,
                                        const ComputationGraph& g, const TaskDataset& dataset,
                                        DiscoveryConfig dc, int k,
                                        const std::string& config_hash = "") {
  require(k >= 1, "oasr_sequence: k must be >= 1");
  std::vector<Sheaf> sheaves;
  std::vector<std::uint8_t> repelled(g.edge_count(), 0);
  const std::uint64_t base_seed = dc.seed;
  for (int run = 0; run < k; ++run) {
    DiscoveryConfig rc = dc;
    rc.seed = mix_seed(base_seed, static_cast<std::uint64_t>(run));
    rc.repelled_set.clear();
    for (size_t e = 0; e < repelled.size(); ++e)
      if (repelled[e]) rc.repelled_set.push_back(static_cast<int>(e));
    try {
      sheaves.push_back(discover(params, cfg, g, dataset, rc, config_hash));
    } catch (const contract_error& err) {
      throw contract_error("oasr_sequence: run " + std::to_string(run) + ": " + err.what());
    }
    for (size_t e = 0; e < repelled.size(); ++e)
      if (sheaves.back().mask[e]) repelled[e] = 1;
  }
  return sheaves;
}

// ---------------------------------------------------------------------------
// ACDC-style greedy pruning.
// ---------------------------------------------------------------------------

/// Traverses nodes in reverse topological order (with the head order inside
/// each layer permuted by head_order_seed) and, for each incoming edge,
/// removes it permanently when the mean KL between the full model's answer
/// pair distribution and the tentatively ablated one stays within tau_a.
inline EdgeMask acdc_prune(const Parameters& params, const ModelConfig& cfg,
                           const ComputationGraph& g, const TaskDataset& dataset,
                           double tau_a, std::uint64_t head_order_seed) {
  require(tau_a >= 0 || std::isinf(tau_a), "acdc_prune: threshold must be >= 0");
  require(!dataset.examples.empty(), "acdc_prune: dataset is empty");

  std::vector<double> full_margins;
  full_margins.reserve(dataset.examples.size());
  for (const auto& ex : dataset.examples)
    full_margins.push_back(
        answer_margin(forward_full(params, cfg, ex.tokens).logits, ex.correct, ex.incorrect));

  // Reverse topological node order; heads within a layer permuted.
  Rng order_rng(head_order_seed);
  std::vector<int> node_order;
  node_order.push_back(g.output_node());
  for (int l = cfg.n_layers - 1; l >= 0; --l) {
    node_order.push_back(g.mlp_node(l));
    std::vector<int> heads(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) heads[static_cast<size_t>(h)] = h;
    for (size_t i = heads.size(); i > 1; --i)
      std::swap(heads[i - 1], heads[order_rng.below(i)]);
    for (int h : heads) node_order.push_back(g.head_node(l, h));
  }

  EdgeMask mask = full_mask(g);
  for (int node : node_order) {
    for (int e : g.incoming[static_cast<size_t>(node)]) {
      if (!mask[static_cast<size_t>(e)]) continue;
      mask[static_cast<size_t>(e)] = 0;
      double kl_sum = 0.0;
      for (size_t i = 0; i < dataset.examples.size(); ++i) {
        const auto& ex = dataset.examples[i];
        Array logits = masked_forward_hard(params, cfg, g, mask, ex.tokens);
        kl_sum += pair_kl(full_margins[i], answer_margin(logits, ex.correct, ex.incorrect));
      }
      const double mean_kl = kl_sum / static_cast<double>(dataset.examples.size());
      if (!(mean_kl <= tau_a)) mask[static_cast<size_t>(e)] = 1;  // keep: effect too large
    }
  }
  return mask;
}

// ---------------------------------------------------------------------------
// EAP-style first-order edge attribution.
// ---------------------------------------------------------------------------

/// score(e) = mean over aligned (clean, corrupted) pairs of
/// (out_corrupted(src_e) - out_clean(src_e)) . d(answer margin)/d(input of dst_e),
/// with the gradient taken on the clean run of the full graph.
inline std::vector<double> eap_attribute(const Parameters& params, const ModelConfig& cfg,
                                         const ComputationGraph& g, const TaskDataset& clean,
                                         const TaskDataset& corrupted) {
  require(clean.examples.size() == corrupted.examples.size() && !clean.examples.empty(),
          "eap_attribute: clean/corrupted batches must be aligned and nonempty");
  std::vector<double> scores(g.edge_count(), 0.0);

  for (size_t i = 0; i < clean.examples.size(); ++i) {
    const TaskExample& ex = clean.examples[i];
    const TaskExample& cex = corrupted.examples[i];
    require(cex.tokens.size() == ex.tokens.size(),
            "eap_attribute: corrupted prompt length differs from clean");

    // Corrupted activations, plain full-mask run.
    PlainBackend pb;
    auto pbound = bind_model(pb, params, false, cfg.identity_activations);
    std::vector<double> ones(g.edge_count(), 1.0);
    auto crun = masked_forward_core(pb, pbound, g, ones, cex.tokens);

    // Clean run on the tape with differentiable unit gates.
    Tape t;
    TapeBackend tb{t};
    auto bound = bind_model(tb, params, false, cfg.identity_activations);
    std::vector<Value> gates;
    for (size_t e = 0; e < g.edge_count(); ++e)
      gates.push_back(t.leaf(Array::scalar(1.0), true));
    auto run = masked_forward_core(tb, bound, g, gates, ex.tokens);
    const int n = static_cast<int>(ex.tokens.size());
    Value row = t.reshape(t.slice_rows(run.logits, n - 1, n), {cfg.vocab_size});
    Value margin = t.sub(t.pick(row, ex.correct), t.pick(row, ex.incorrect));
    t.backward(margin);

    for (size_t e = 0; e < g.edge_count(); ++e) {
      const int src = g.edges[e].src;
      const int dst = g.edges[e].dst;
      const Array& grad_in = t.grad(run.node_input[static_cast<size_t>(dst)]);
      if (grad_in.data.empty()) continue;
      const Array& clean_out = t.val(run.node_output[static_cast<size_t>(src)]);
      const Array& corr_out = crun.node_output[static_cast<size_t>(src)];
      double dot = 0.0;
      for (size_t k = 0; k < clean_out.data.size(); ++k)
        dot += (corr_out.data[k] - clean_out.data[k]) * grad_in.data[k];
      scores[e] += dot;
    }
  }
  for (double& s : scores) s /= static_cast<double>(clean.examples.size());
  return scores;
}

/// Top-k edges by |score|; ties broken by edge index.
inline EdgeMask eap_topk(const ComputationGraph& g, const std::vector<double>& scores, int k) {
  require(scores.size() == g.edge_count(), "eap_topk: score vector length mismatch");
  require(k >= 0 && static_cast<size_t>(k) <= g.edge_count(),
          "eap_topk: k = " + std::to_string(k) + " exceeds edge count " +
              std::to_string(g.edge_count()));
  std::vector<int> idx(scores.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return std::fabs(scores[static_cast<size_t>(a)]) > std::fabs(scores[static_cast<size_t>(b)]);
  });
  EdgeMask mask(g.edge_count(), 0);
  for (int i = 0; i < k; ++i) mask[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1;
  return mask;
}

/// Replaces each example's name pair with a fresh distinct pair, preserving
/// the template and repeat structure; the EAP corruption protocol.
inline TaskDataset corrupt_names(const TaskDataset& ds, std::uint64_t seed) {
  const auto& names = detail::name_pool();
  Rng rng(seed);
  TaskDataset out = ds;
  for (auto& ex : out.examples) {
    const int old_first = ex.tokens[0];
    const int old_second = ex.tokens[1];
    int a = token_id(names[rng.below(names.size())]);
    int b = token_id(names[rng.below(names.size())]);
    while (b == a) b = token_id(names[rng.below(names.size())]);
    for (int& tok : ex.tokens) {
      if (tok == old_first) tok = a;
      else if (tok == old_second) tok = b;
    }
    ex.correct = ex.correct == old_first ? a : b;
    ex.incorrect = ex.incorrect == old_first ? a : b;
  }
  return out;
}

}  // namespace sheaflab

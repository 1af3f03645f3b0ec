#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sheaflab/backends.hpp"

namespace sheaflab {

/// Architecture hyperparameters of the toy decoder-only transformer.
/// The model is layer-norm-free and bias-free: every block adds attention
/// and MLP updates directly onto the residual stream.
struct ModelConfig {
  int n_layers = 2;
  int n_heads = 8;
  int d_model = 32;
  int d_head = 4;    // default d_model / n_heads
  int d_mlp = 128;   // default 4 * d_model
  int vocab_size = 0;
  int max_seq_len = 12;
  // Replaces the MLP nonlinearity with the identity; used by linear fixtures.
  bool identity_activations = false;
  std::uint64_t seed = 1;

  static ModelConfig toy(int vocab) {
    ModelConfig c;
    c.vocab_size = vocab;
    return c;
  }

  void validate() const {
    require(n_layers >= 1 && n_heads >= 1 && d_model >= 1 && d_head >= 1 && d_mlp >= 1 &&
                vocab_size >= 1 && max_seq_len >= 1,
            "ModelConfig: all dimensions must be >= 1");
    require(n_heads * d_head == d_model, "ModelConfig: n_heads * d_head must equal d_model");
  }
};

/// All learned weights. No biases, no normalization parameters. Learned
/// absolute positional embeddings are folded into the input node's output.
struct Parameters {
  struct Head {
    Array wq, wk, wv;  // d_model x d_head
    Array wo;          // d_head x d_model
  };
  struct Mlp {
    Array w_in;   // d_model x d_mlp
    Array w_out;  // d_mlp x d_model
  };

  Array w_embed;    // vocab x d_model
  Array w_pos;      // max_seq_len x d_model
  Array w_unembed;  // d_model x vocab
  std::vector<std::vector<Head>> heads;  // [layer][head]
  std::vector<Mlp> mlps;                 // [layer]
};

/// Visits every weight matrix in a fixed, documented order (the checkpoint
/// manifest order): w_embed, w_pos, w_unembed, then per layer heads
/// (wq, wk, wv, wo per head) followed by the MLP (w_in, w_out).
template <class Fn>
void for_each_param(Parameters& p, Fn&& fn) {
  fn("w_embed", p.w_embed);
  fn("w_pos", p.w_pos);
  fn("w_unembed", p.w_unembed);
  for (size_t l = 0; l < p.heads.size(); ++l) {
    for (size_t h = 0; h < p.heads[l].size(); ++h) {
      const std::string base = "layer" + std::to_string(l) + ".head" + std::to_string(h);
      fn(base + ".wq", p.heads[l][h].wq);
      fn(base + ".wk", p.heads[l][h].wk);
      fn(base + ".wv", p.heads[l][h].wv);
      fn(base + ".wo", p.heads[l][h].wo);
    }
    const std::string base = "layer" + std::to_string(l) + ".mlp";
    fn(base + ".w_in", p.mlps[l].w_in);
    fn(base + ".w_out", p.mlps[l].w_out);
  }
}

template <class Fn>
void for_each_param(const Parameters& p, Fn&& fn) {
  for_each_param(const_cast<Parameters&>(p), [&](const std::string& n, Array& a) {
    fn(n, static_cast<const Array&>(a));
  });
}

/// Scaled-normal init: std 0.02, except residual-writing projections
/// (wo, w_out) which use 0.02 / sqrt(n_layers). Deterministic per seed.
inline Parameters init_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double base = 0.02;
  const double out_std = base / std::sqrt(static_cast<double>(cfg.n_layers));
  Parameters p;
  p.w_embed = Array::randn({cfg.vocab_size, cfg.d_model}, rng, base);
  p.w_pos = Array::randn({cfg.max_seq_len, cfg.d_model}, rng, base);
  p.w_unembed = Array::randn({cfg.d_model, cfg.vocab_size}, rng, base);
  p.heads.resize(static_cast<size_t>(cfg.n_layers));
  p.mlps.resize(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    p.heads[static_cast<size_t>(l)].resize(static_cast<size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto& hp = p.heads[static_cast<size_t>(l)][static_cast<size_t>(h)];
      hp.wq = Array::randn({cfg.d_model, cfg.d_head}, rng, base);
      hp.wk = Array::randn({cfg.d_model, cfg.d_head}, rng, base);
      hp.wv = Array::randn({cfg.d_model, cfg.d_head}, rng, base);
      hp.wo = Array::randn({cfg.d_head, cfg.d_model}, rng, out_std);
    }
    auto& mp = p.mlps[static_cast<size_t>(l)];
    mp.w_in = Array::randn({cfg.d_model, cfg.d_mlp}, rng, base);
    mp.w_out = Array::randn({cfg.d_mlp, cfg.d_model}, rng, out_std);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Backend-templated component functions.
// ---------------------------------------------------------------------------

/// Model weights bound into a backend (plain pointers or tape leaves).
template <class B>
struct Bound {
  using P = typename B::P;
  struct Head {
    P wq, wk, wv, wo;
  };
  struct Mlp {
    P w_in, w_out;
  };
  P w_embed, w_pos, w_unembed;
  std::vector<std::vector<Head>> heads;
  std::vector<Mlp> mlps;
  int d_head = 0;
  bool identity_act = false;
};

template <class B>
Bound<B> bind_model(B& b, const Parameters& p, bool trainable = false,
                    bool identity_act = false) {
  Bound<B> m;
  m.identity_act = identity_act;
  m.w_embed = b.bind(p.w_embed, trainable);
  m.w_pos = b.bind(p.w_pos, trainable);
  m.w_unembed = b.bind(p.w_unembed, trainable);
  m.heads.resize(p.heads.size());
  m.mlps.resize(p.mlps.size());
  for (size_t l = 0; l < p.heads.size(); ++l) {
    for (const auto& hp : p.heads[l])
      m.heads[l].push_back({b.bind(hp.wq, trainable), b.bind(hp.wk, trainable),
                            b.bind(hp.wv, trainable), b.bind(hp.wo, trainable)});
    m.mlps[l] = {b.bind(p.mlps[l].w_in, trainable), b.bind(p.mlps[l].w_out, trainable)};
  }
  m.d_head = p.heads.empty() || p.heads[0].empty() ? 1 : p.heads[0][0].wq.shape[1];
  return m;
}

/// Additive causal mask: 0 on and below the diagonal, -1e30 above. Softmax
/// then assigns exactly zero weight to future positions.
inline Array causal_mask(int n) {
  Array m({n, n});
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) m.at(i, j) = -1e30;
  return m;
}

/// Token embedding plus learned absolute positional embedding; this is the
/// "input" node's output.
template <class B>
typename B::V input_embedding(B& b, const Bound<B>& m, const std::vector<int>& tokens) {
  auto tok = b.gather_rows(b.use(m.w_embed), tokens);
  auto pos = b.slice_rows(b.use(m.w_pos), 0, static_cast<int>(tokens.size()));
  return b.add(tok, pos);
}

/// Residual update of one attention head given its (gated) input stream.
template <class B>
typename B::V head_update(B& b, const Bound<B>& m, int layer, int head, const typename B::V& x,
                          const typename B::V& mask) {
  const auto& hp = m.heads[static_cast<size_t>(layer)][static_cast<size_t>(head)];
  auto q = b.matmul(x, b.use(hp.wq));
  auto k = b.matmul(x, b.use(hp.wk));
  auto v = b.matmul(x, b.use(hp.wv));
  auto scores = b.scale(b.matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(m.d_head)));
  auto probs = b.softmax_rows(b.add(scores, mask));
  return b.matmul(b.matmul(probs, v), b.use(hp.wo));
}

/// Residual update of one MLP given its (gated) input stream.
template <class B>
typename B::V mlp_update(B& b, const Bound<B>& m, int layer, const typename B::V& x) {
  const auto& mp = m.mlps[static_cast<size_t>(layer)];
  auto hidden = b.matmul(x, b.use(mp.w_in));
  if (!m.identity_act) hidden = b.relu(hidden);
  return b.matmul(hidden, b.use(mp.w_out));
}

/// Full-model forward in the unmasked residual-stream form:
///   x_mid = x + sum_h head(x),  x_next = x_mid + mlp(x_mid),
/// followed by the unembedding readout. Independent of the edge-gated
/// execution path; the two are compared in tests.
template <class B>
typename B::V forward_full_core(B& b, const Bound<B>& m, const std::vector<int>& tokens) {
  auto mask = b.lift(causal_mask(static_cast<int>(tokens.size())));
  auto x = input_embedding(b, m, tokens);
  const int n_layers = static_cast<int>(m.heads.size());
  for (int l = 0; l < n_layers; ++l) {
    auto x_mid = x;
    for (size_t h = 0; h < m.heads[static_cast<size_t>(l)].size(); ++h)
      x_mid = b.add(x_mid, head_update(b, m, l, static_cast<int>(h), x, mask));
    x = b.add(x_mid, mlp_update(b, m, l, x_mid));
  }
  return b.matmul(x, b.use(m.w_unembed));
}

struct FullForward {
  Array logits;  // n x vocab
  Array x0;      // input node output
  // One entry per component in stream order ("a0.h0", ..., "m0", "a1.h0", ...).
  std::vector<std::pair<std::string, Array>> contributions;
  Array x_final;
};

/// Plain full forward that also records per-component residual contributions,
/// so the exact additive decomposition of the stream can be checked.
inline FullForward forward_full(const Parameters& p, const ModelConfig& cfg,
                                const std::vector<int>& tokens) {
  cfg.validate();
  require(static_cast<int>(tokens.size()) <= cfg.max_seq_len,
          "forward_full: sequence longer than max_seq_len");
  require(!tokens.empty(), "forward_full: empty token sequence");
  for (int t : tokens)
    require(t >= 0 && t < cfg.vocab_size,
            "forward_full: token id " + std::to_string(t) + " out of range [0," +
                std::to_string(cfg.vocab_size) + ")");
  PlainBackend b;
  auto m = bind_model(b, p, false, cfg.identity_activations);
  FullForward out;
  Array mask = causal_mask(static_cast<int>(tokens.size()));
  out.x0 = input_embedding(b, m, tokens);
  Array x = out.x0;
  for (int l = 0; l < cfg.n_layers; ++l) {
    Array x_mid = x;
    for (int h = 0; h < cfg.n_heads; ++h) {
      Array d = head_update(b, m, l, h, x, mask);
      x_mid = kernels::add(x_mid, d);
      out.contributions.emplace_back("a" + std::to_string(l) + ".h" + std::to_string(h),
                                     std::move(d));
    }
    Array d = mlp_update(b, m, l, x_mid);
    x = kernels::add(x_mid, d);
    out.contributions.emplace_back("m" + std::to_string(l), std::move(d));
  }
  out.x_final = x;
  out.logits = kernels::matmul(x, p.w_unembed);
  return out;
}

/// logits[last, correct] - logits[last, incorrect].
inline double answer_margin(const Array& logits, int correct, int incorrect) {
  require(logits.shape.size() == 2, "answer_margin: logits must be rank-2");
  const int last = logits.shape[0] - 1;
  require(correct >= 0 && correct < logits.shape[1] && incorrect >= 0 &&
              incorrect < logits.shape[1],
          "answer_margin: answer token out of range");
  return logits.at(last, correct) - logits.at(last, incorrect);
}

}  // namespace sheaflab

#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "sheaflab/tasks.hpp"

namespace sheaflab {

struct TrainConfig {
  double learning_rate = 1e-3;
  int steps = 3500;
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  std::uint64_t seed = 7;

  void validate() const {
    require(learning_rate > 0.0, "TrainConfig: learning rate must be > 0");
    require(steps >= 0, "TrainConfig: steps must be >= 0");
    require(batch_size >= 1, "TrainConfig: batch size must be >= 1");
  }
};

struct TrainResult {
  Parameters params;
  std::vector<double> losses;              // one entry per step
  std::optional<int> diverged_at;          // set when loss went non-finite
};

template <class B>
std::vector<typename B::P> flatten_bound(const Bound<B>& m) {
  std::vector<typename B::P> out = {m.w_embed, m.w_pos, m.w_unembed};
  for (size_t l = 0; l < m.heads.size(); ++l) {
    for (const auto& h : m.heads[l]) {
      out.push_back(h.wq);
      out.push_back(h.wk);
      out.push_back(h.wv);
      out.push_back(h.wo);
    }
    out.push_back(m.mlps[l].w_in);
    out.push_back(m.mlps[l].w_out);
  }
  return out;
}

inline std::vector<Array*> flatten_params(Parameters& p) {
  std::vector<Array*> out;
  for_each_param(p, [&](const std::string&, Array& a) { out.push_back(&a); });
  return out;
}

/// Adam with global-norm gradient clipping.
class AdamOptimizer {
 public:
  AdamOptimizer(double lr, double beta1, double beta2, double eps, double clip_norm)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps), clip_(clip_norm) {}

  void step(const std::vector<Array*>& params, std::vector<Array>& grads) {
    if (m_.empty()) {
      for (Array* p : params) {
        m_.emplace_back(p->shape);
        v_.emplace_back(p->shape);
      }
    }
    ++t_;
    double sq = 0.0;
    for (const Array& g : grads)
      for (double v : g.data) sq += v * v;
    const double norm = std::sqrt(sq);
    const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Array& p = *params[i];
      for (size_t k = 0; k < p.data.size(); ++k) {
        const double g = grads[i].data[k] * scale;
        m_[i].data[k] = beta1_ * m_[i].data[k] + (1.0 - beta1_) * g;
        v_[i].data[k] = beta2_ * v_[i].data[k] + (1.0 - beta2_) * g * g;
        const double mhat = m_[i].data[k] / c1;
        const double vhat = v_[i].data[k] / c2;
        p.data[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

 private:
  double lr_, beta1_, beta2_, eps_, clip_;
  int t_ = 0;
  std::vector<Array> m_, v_;
};

/// Adam training on full-vocabulary cross-entropy of the answer token at the
/// final position. Deterministic per seed; aborts (returning the last
/// checkpoint) if the loss goes non-finite.
inline TrainResult train(const Parameters& start, const ModelConfig& cfg,
                         const TaskDataset& dataset, const TrainConfig& tc) {
  tc.validate();
  cfg.validate();
  TaskDataset train_split = dataset.subset(Split::train);
  if (train_split.examples.empty()) train_split = dataset;
  require(!train_split.examples.empty(), "train: dataset is empty");

  TrainResult result;
  result.params = start;
  AdamOptimizer opt(tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps, tc.clip_norm);
  Rng rng(tc.seed);
  Parameters checkpoint = start;
  const int checkpoint_every = 50;

  for (int step = 0; step < tc.steps; ++step) {
    Tape tape;
    TapeBackend b{tape};
    auto bound = bind_model(b, result.params, /*trainable=*/true, cfg.identity_activations);

    Value loss = tape.constant(0.0);
    for (int i = 0; i < tc.batch_size; ++i) {
      const TaskExample& ex =
          train_split.examples[rng.below(train_split.examples.size())];
      Value logits = forward_full_core(b, bound, ex.tokens);
      const int n = static_cast<int>(ex.tokens.size());
      Value last = tape.slice_rows(logits, n - 1, n);  // 1 x V
      Value row = tape.reshape(last, {cfg.vocab_size});
      Value logp = tape.log_softmax_row(row);
      loss = tape.add(loss, tape.scale(tape.pick(logp, ex.correct), -1.0));
    }
    loss = tape.scale(loss, 1.0 / tc.batch_size);
    const double loss_v = tape.val(loss).data[0];
    if (!std::isfinite(loss_v)) {
      result.params = checkpoint;
      result.diverged_at = step;
      return result;
    }
    result.losses.push_back(loss_v);

    tape.backward(loss);
    auto leaves = flatten_bound(bound);
    std::vector<Array> grads;
    grads.reserve(leaves.size());
    for (Value leaf : leaves) grads.push_back(tape.grad(leaf));
    auto targets = flatten_params(result.params);
    opt.step(targets, grads);

    if ((step + 1) % checkpoint_every == 0) checkpoint = result.params;
  }
  return result;
}

}  // namespace sheaflab

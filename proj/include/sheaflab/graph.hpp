#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sheaflab/model.hpp"

namespace sheaflab {

enum class NodeKind { input, head, mlp, output };

struct NodeInfo {
  NodeKind kind;
  int layer = -1;  // -1 for input/output
  int head = -1;   // -1 unless kind == head
  std::string name;
};

struct Edge {
  int src = -1;
  int dst = -1;
};

/// Residual-stream computation graph. Nodes are stored in a fixed topological
/// order (input, then per layer its heads and MLP, then output); edges carry
/// dense indices in canonical order (grouped by destination in topological
/// order, sources in topological order within each group). Edge indexing is
/// stable across runs for a given config.
struct ComputationGraph {
  int n_layers = 0;
  int n_heads = 0;
  std::vector<NodeInfo> nodes;
  std::vector<Edge> edges;
  std::vector<std::vector<int>> incoming;  // node -> edge indices, canonical order

  int input_node() const { return 0; }
  int output_node() const { return static_cast<int>(nodes.size()) - 1; }
  int head_node(int layer, int head) const { return 1 + layer * (n_heads + 1) + head; }
  int mlp_node(int layer) const { return 1 + layer * (n_heads + 1) + n_heads; }
  size_t edge_count() const { return edges.size(); }

  int find_edge(int src, int dst) const {
    for (int e : incoming[static_cast<size_t>(dst)])
      if (edges[static_cast<size_t>(e)].src == src) return e;
    return -1;
  }
};

/// One bit per canonical edge index.
using EdgeMask = std::vector<std::uint8_t>;

inline EdgeMask full_mask(const ComputationGraph& g) { return EdgeMask(g.edge_count(), 1); }
inline EdgeMask empty_mask(const ComputationGraph& g) { return EdgeMask(g.edge_count(), 0); }

inline size_t popcount(const EdgeMask& m) {
  size_t n = 0;
  for (auto b : m) n += b ? 1 : 0;
  return n;
}

inline EdgeMask complement(const EdgeMask& m) {
  EdgeMask out = m;
  for (auto& b : out) b = b ? 0 : 1;
  return out;
}

/// Head a{i}.h{h} receives edges from the input and every component in
/// layers < i; MLP m{i} additionally receives the heads of its own layer;
/// the output receives edges from the input and every component. Attention
/// is a single node per head (no Q/K/V splitting).
inline ComputationGraph build_graph(const ModelConfig& cfg) {
  cfg.validate();
  ComputationGraph g;
  g.n_layers = cfg.n_layers;
  g.n_heads = cfg.n_heads;
  g.nodes.push_back({NodeKind::input, -1, -1, "input"});
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h)
      g.nodes.push_back(
          {NodeKind::head, l, h, "a" + std::to_string(l) + ".h" + std::to_string(h)});
    g.nodes.push_back({NodeKind::mlp, l, -1, "m" + std::to_string(l)});
  }
  g.nodes.push_back({NodeKind::output, -1, -1, "output"});

  g.incoming.resize(g.nodes.size());
  auto connect = [&](int src, int dst) {
    g.edges.push_back({src, dst});
    g.incoming[static_cast<size_t>(dst)].push_back(static_cast<int>(g.edges.size()) - 1);
  };
  // Destinations in topological order; sources in topological order.
  for (int dst = 1; dst < static_cast<int>(g.nodes.size()); ++dst) {
    const NodeInfo& d = g.nodes[static_cast<size_t>(dst)];
    for (int src = 0; src < dst; ++src) {
      const NodeInfo& s = g.nodes[static_cast<size_t>(src)];
      bool edge = false;
      if (d.kind == NodeKind::head) {
        edge = s.kind == NodeKind::input ||
               ((s.kind == NodeKind::head || s.kind == NodeKind::mlp) && s.layer < d.layer);
      } else if (d.kind == NodeKind::mlp) {
        edge = s.kind == NodeKind::input || (s.kind == NodeKind::mlp && s.layer < d.layer) ||
               (s.kind == NodeKind::head && s.layer <= d.layer);
      } else if (d.kind == NodeKind::output) {
        edge = true;
      }
      if (edge) connect(src, dst);
    }
  }
  return g;
}

/// Closed-form |E| for a config; equals build_graph(cfg).edges.size().
inline std::int64_t count_edges(const ModelConfig& cfg) {
  const std::int64_t L = cfg.n_layers, H = cfg.n_heads;
  return 3 * L * H + 2 * L + 1 + (H + 1) * (H + 1) * L * (L - 1) / 2;
}

/// Keeps exactly the selected edges that lie on at least one directed
/// input -> output path within the induced subgraph.
inline EdgeMask path_filter(const ComputationGraph& g, const EdgeMask& mask) {
  require(mask.size() == g.edge_count(), "path_filter: mask length mismatch");
  const size_t n = g.nodes.size();
  std::vector<std::uint8_t> from_input(n, 0), to_output(n, 0);
  from_input[static_cast<size_t>(g.input_node())] = 1;
  // Nodes are already topologically ordered.
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (mask[e] && from_input[static_cast<size_t>(g.edges[e].src)])
      from_input[static_cast<size_t>(g.edges[e].dst)] = 1;
  to_output[static_cast<size_t>(g.output_node())] = 1;
  for (size_t i = g.edges.size(); i-- > 0;)
    if (mask[i] && to_output[static_cast<size_t>(g.edges[i].dst)])
      to_output[static_cast<size_t>(g.edges[i].src)] = 1;
  EdgeMask out(mask.size(), 0);
  for (size_t e = 0; e < g.edges.size(); ++e)
    out[e] = mask[e] && from_input[static_cast<size_t>(g.edges[e].src)] &&
             to_output[static_cast<size_t>(g.edges[e].dst)];
  return out;
}

// ---------------------------------------------------------------------------
// Masked execution under zero ablation.
// ---------------------------------------------------------------------------

template <class B>
struct MaskedRun {
  typename B::V logits;
  std::vector<typename B::V> node_input;   // gated input sum per node (input: embedding)
  std::vector<typename B::V> node_output;  // component output per node
};

/// Edge-gated execution: every node reads exclusively the gated sum of its
/// incoming edges (the implicit skip path of the full model is not an edge),
/// applies its component function, and the output node's gated sum feeds the
/// unembedding. Pruned edges contribute exactly zero.
template <class B>
MaskedRun<B> masked_forward_core(B& b, const Bound<B>& m, const ComputationGraph& g,
                                 const std::vector<typename B::G>& gates,
                                 const std::vector<int>& tokens) {
  require(gates.size() == g.edge_count(),
          "masked_forward: gate vector length " + std::to_string(gates.size()) +
              " does not match edge count " + std::to_string(g.edge_count()));
  MaskedRun<B> run;
  run.node_input.resize(g.nodes.size());
  run.node_output.resize(g.nodes.size());
  auto mask = b.lift(causal_mask(static_cast<int>(tokens.size())));
  for (size_t u = 0; u < g.nodes.size(); ++u) {
    const NodeInfo& node = g.nodes[u];
    if (node.kind == NodeKind::input) {
      run.node_input[u] = input_embedding(b, m, tokens);
      run.node_output[u] = run.node_input[u];
      continue;
    }
    std::vector<typename B::G> in_gates;
    std::vector<const typename B::V*> in_terms;
    for (int e : g.incoming[u]) {
      in_gates.push_back(gates[static_cast<size_t>(e)]);
      in_terms.push_back(&run.node_output[static_cast<size_t>(g.edges[static_cast<size_t>(e)].src)]);
    }
    run.node_input[u] = b.gated_sum(in_gates, in_terms);
    switch (node.kind) {
      case NodeKind::head:
        run.node_output[u] = head_update(b, m, node.layer, node.head, run.node_input[u], mask);
        break;
      case NodeKind::mlp:
        run.node_output[u] = mlp_update(b, m, node.layer, run.node_input[u]);
        break;
      case NodeKind::output:
        run.node_output[u] = b.matmul(run.node_input[u], b.use(m.w_unembed));
        run.logits = run.node_output[u];
        break;
      default:
        break;
    }
  }
  return run;
}

/// Hard-mask execution (gates in {0,1}); plain arrays, no tape.
inline Array masked_forward_hard(const Parameters& p, const ModelConfig& cfg,
                                 const ComputationGraph& g, const EdgeMask& mask,
                                 const std::vector<int>& tokens) {
  require(mask.size() == g.edge_count(),
          "masked_forward: mask length " + std::to_string(mask.size()) +
              " does not match edge count " + std::to_string(g.edge_count()));
  cfg.validate();
  PlainBackend b;
  auto bound = bind_model(b, p, false, cfg.identity_activations);
  std::vector<double> gates(mask.size());
  for (size_t i = 0; i < mask.size(); ++i) gates[i] = mask[i] ? 1.0 : 0.0;
  return masked_forward_core(b, bound, g, gates, tokens).logits;
}

/// Soft execution with per-edge real scores; plain arrays (no gradients).
/// With scores forced to {0,1} this reproduces the hard path bit-exactly.
inline Array masked_forward_soft(const Parameters& p, const ModelConfig& cfg,
                                 const ComputationGraph& g, const std::vector<double>& scores,
                                 const std::vector<int>& tokens) {
  cfg.validate();
  PlainBackend b;
  auto bound = bind_model(b, p, false, cfg.identity_activations);
  return masked_forward_core(b, bound, g, scores, tokens).logits;
}

/// A discovered mechanism: a hard edge mask plus the logits that produced it
/// and the standard quality metrics.
struct Sheaf {
  EdgeMask mask;
  std::vector<double> mask_logits;  // optional; empty when not applicable
  double accuracy = 0.0;
  double complement_accuracy = 0.0;
  double density = 0.0;
  std::int64_t edge_count = 0;
  // Provenance.
  std::uint64_t seed = 0;
  std::string method;
  std::string config_hash;
};

inline std::vector<int> mask_to_edge_list(const EdgeMask& m) {
  std::vector<int> out;
  for (size_t i = 0; i < m.size(); ++i)
    if (m[i]) out.push_back(static_cast<int>(i));
  return out;
}

inline EdgeMask edge_list_to_mask(const ComputationGraph& g, const std::vector<int>& edges) {
  EdgeMask m = empty_mask(g);
  for (int e : edges) {
    require(e >= 0 && static_cast<size_t>(e) < m.size(), "edge index out of range");
    m[static_cast<size_t>(e)] = 1;
  }
  return m;
}

}  // namespace sheaflab

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>
#include <set>

#include "sheaflab/graph.hpp"

using namespace sheaflab;

namespace {

ModelConfig tiny_config(int layers, int heads) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_head = 4;
  c.d_model = 4 * heads;
  c.d_mlp = 16;
  c.vocab_size = 11;
  c.max_seq_len = 6;
  return c;
}

// Independent enumeration of the edge rules, used as the oracle for
// build_graph and count_edges.
std::set<std::pair<std::string, std::string>> enumerate_edges_by_rules(int L, int H) {
  std::set<std::pair<std::string, std::string>> edges;
  auto head_name = [](int l, int h) { return "a" + std::to_string(l) + ".h" + std::to_string(h); };
  auto mlp_name = [](int l) { return "m" + std::to_string(l); };
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      edges.insert({"input", head_name(l, h)});
      for (int l2 = 0; l2 < l; ++l2) {
        for (int h2 = 0; h2 < H; ++h2) edges.insert({head_name(l2, h2), head_name(l, h)});
        edges.insert({mlp_name(l2), head_name(l, h)});
      }
    }
  for (int l = 0; l < L; ++l) {
    edges.insert({"input", mlp_name(l)});
    for (int l2 = 0; l2 < l; ++l2) {
      for (int h2 = 0; h2 < H; ++h2) edges.insert({head_name(l2, h2), mlp_name(l)});
      edges.insert({mlp_name(l2), mlp_name(l)});
    }
    for (int h = 0; h < H; ++h) edges.insert({head_name(l, h), mlp_name(l)});
  }
  edges.insert({"input", "output"});
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) edges.insert({head_name(l, h), "output"});
    edges.insert({mlp_name(l), "output"});
  }
  return edges;
}

// Brute-force oracle: enumerate all simple input->output paths in the
// induced subgraph and collect the edges they use.
EdgeMask all_paths_oracle(const ComputationGraph& g, const EdgeMask& mask) {
  std::vector<std::vector<std::pair<int, int>>> out_adj(g.nodes.size());  // (dst, edge)
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (mask[e])
      out_adj[static_cast<size_t>(g.edges[e].src)].push_back(
          {g.edges[e].dst, static_cast<int>(e)});
  EdgeMask on_path(g.edge_count(), 0);
  std::vector<int> stack_edges;
  std::function<void(int)> dfs = [&](int node) {
    if (node == g.output_node()) {
      for (int e : stack_edges) on_path[static_cast<size_t>(e)] = 1;
      return;
    }
    for (auto [dst, e] : out_adj[static_cast<size_t>(node)]) {
      stack_edges.push_back(e);
      dfs(dst);
      stack_edges.pop_back();
    }
  };
  dfs(g.input_node());
  return on_path;
}

}  // namespace

TEST_CASE("build_graph matches the rule enumeration oracle") {
  for (int L = 1; L <= 3; ++L)
    for (int H = 1; H <= 3; ++H) {
      ModelConfig cfg = tiny_config(L, H);
      ComputationGraph g = build_graph(cfg);
      auto oracle = enumerate_edges_by_rules(L, H);
      std::set<std::pair<std::string, std::string>> got;
      for (const Edge& e : g.edges)
        got.insert({g.nodes[static_cast<size_t>(e.src)].name,
                    g.nodes[static_cast<size_t>(e.dst)].name});
      CHECK(got == oracle);
      CHECK(static_cast<std::int64_t>(g.edges.size()) == count_edges(cfg));
    }
}

TEST_CASE("edge counts for the named instances") {
  CHECK(count_edges(tiny_config(1, 1)) == 6);
  CHECK(count_edges(tiny_config(2, 2)) == 26);
  SUBCASE("L=1,H=1 edge list is exactly the six-rule set") {
    ComputationGraph g = build_graph(tiny_config(1, 1));
    REQUIRE(g.edges.size() == 6);
    CHECK(g.find_edge(g.input_node(), g.head_node(0, 0)) >= 0);
    CHECK(g.find_edge(g.input_node(), g.mlp_node(0)) >= 0);
    CHECK(g.find_edge(g.head_node(0, 0), g.mlp_node(0)) >= 0);
    CHECK(g.find_edge(g.input_node(), g.output_node()) >= 0);
    CHECK(g.find_edge(g.head_node(0, 0), g.output_node()) >= 0);
    CHECK(g.find_edge(g.mlp_node(0), g.output_node()) >= 0);
  }
  SUBCASE("GPT-2-small-scale count is ratio-consistent with published density") {
    ModelConfig big;
    big.n_layers = 12;
    big.n_heads = 12;
    big.d_model = 768;
    big.d_head = 64;
    big.d_mlp = 3072;
    big.vocab_size = 50257;
    big.max_seq_len = 64;
    const double implied = 1158.0 / 0.0356;  // reported edge count over reported density
    const double ratio = static_cast<double>(count_edges(big)) / implied;
    // Same order of magnitude; the reference graph splits heads into Q/K/V.
    CHECK(ratio > 0.25);
    CHECK(ratio < 0.5);
  }
}

TEST_CASE("graph structure invariants") {
  ModelConfig cfg = tiny_config(2, 2);
  ComputationGraph g = build_graph(cfg);
  SUBCASE("acyclic by construction: every edge goes forward in topo order") {
    for (const Edge& e : g.edges) CHECK(e.src < e.dst);
  }
  SUBCASE("output in-degree is 1 + L(H+1)") {
    CHECK(g.incoming[static_cast<size_t>(g.output_node())].size() ==
          static_cast<size_t>(1 + cfg.n_layers * (cfg.n_heads + 1)));
  }
  SUBCASE("edge indexing is stable across rebuilds") {
    ComputationGraph g2 = build_graph(cfg);
    REQUIRE(g.edges.size() == g2.edges.size());
    for (size_t e = 0; e < g.edges.size(); ++e) {
      CHECK(g.edges[e].src == g2.edges[e].src);
      CHECK(g.edges[e].dst == g2.edges[e].dst);
    }
  }
  SUBCASE("canonical order: grouped by dst, then src") {
    for (size_t e = 1; e < g.edges.size(); ++e) {
      bool ordered = g.edges[e - 1].dst < g.edges[e].dst ||
                     (g.edges[e - 1].dst == g.edges[e].dst && g.edges[e - 1].src < g.edges[e].src);
      CHECK(ordered);
    }
  }
}

TEST_CASE("complement") {
  ComputationGraph g = build_graph(tiny_config(2, 2));
  CHECK(complement(full_mask(g)) == empty_mask(g));
  CHECK(complement(empty_mask(g)) == full_mask(g));
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    EdgeMask m(g.edge_count());
    for (auto& b : m) b = static_cast<std::uint8_t>(rng.below(2));
    CHECK(complement(complement(m)) == m);
    CHECK(popcount(complement(m)) == g.edge_count() - popcount(m));
  }
}

TEST_CASE("path_filter against the all-paths oracle") {
  SUBCASE("named examples") {
    ComputationGraph g = build_graph(tiny_config(1, 1));
    const int e_im = g.find_edge(g.input_node(), g.mlp_node(0));
    const int e_mo = g.find_edge(g.mlp_node(0), g.output_node());
    const int e_ia = g.find_edge(g.input_node(), g.head_node(0, 0));
    EdgeMask chain = edge_list_to_mask(g, {e_im, e_mo});
    CHECK(path_filter(g, chain) == chain);
    CHECK(path_filter(g, edge_list_to_mask(g, {e_im})) == empty_mask(g));
    CHECK(path_filter(g, edge_list_to_mask(g, {e_ia, e_mo})) == empty_mask(g));
  }
  SUBCASE("all configs with <= 10 nodes, 100 random subsets each") {
    Rng rng(77);
    for (int L = 1; L <= 2; ++L)
      for (int H = 1; H <= 2; ++H) {
        ModelConfig cfg = tiny_config(L, H);
        ComputationGraph g = build_graph(cfg);
        REQUIRE(g.nodes.size() <= 10);
        for (int trial = 0; trial < 100; ++trial) {
          EdgeMask m(g.edge_count());
          for (auto& b : m) b = static_cast<std::uint8_t>(rng.below(2));
          EdgeMask filtered = path_filter(g, m);
          CHECK(filtered == all_paths_oracle(g, m));
          CHECK(path_filter(g, filtered) == filtered);
          for (size_t e = 0; e < m.size(); ++e) CHECK(filtered[e] <= m[e]);
        }
      }
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "reference_values.hpp"
#include "sheaflab/analysis.hpp"
#include "sheaflab/trainer.hpp"

using namespace sheaflab;

namespace {

ModelConfig two_layer_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 8;
  c.d_head = 4;
  c.d_mlp = 16;
  c.vocab_size = static_cast<int>(vocabulary().size());
  c.max_seq_len = 8;
  return c;
}

Sheaf sheaf_of(const ComputationGraph& g, const std::vector<int>& edges) {
  Sheaf s;
  s.mask = edge_list_to_mask(g, edges);
  s.edge_count = static_cast<std::int64_t>(edges.size());
  s.density = static_cast<double>(edges.size()) / static_cast<double>(g.edge_count());
  return s;
}

EdgeMask random_mask(const ComputationGraph& g, Rng& rng, double p = 0.4) {
  EdgeMask m(g.edge_count());
  for (auto& b : m) b = rng.uniform() < p ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("iou") {
  ComputationGraph g = build_graph(two_layer_config());
  SUBCASE("published pair instance") {
    // 96 / 2351 expressed as masks over a synthetic 2351-edge union.
    EdgeMask a(3000, 0), b(3000, 0);
    for (int i = 0; i < 96; ++i) a[static_cast<size_t>(i)] = b[static_cast<size_t>(i)] = 1;
    int next = 96;
    // A gets 1158 edges total, B gets 1289; union 2351, intersection 96.
    for (int i = 0; i < 1158 - 96; ++i) a[static_cast<size_t>(next++)] = 1;
    for (int i = 0; i < 1289 - 96; ++i) b[static_cast<size_t>(next++)] = 1;
    REQUIRE(next == 2351);
    const double v = iou(a, b);
    CHECK(v == doctest::Approx(96.0 / 2351.0).epsilon(1e-12));
    CHECK(v == doctest::Approx(0.040834).epsilon(1e-4));
    CHECK(format_percent(v) == reference::kPairIouFormatted);
  }
  SUBCASE("identity, disjoint, symmetry, range") {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
      EdgeMask a = random_mask(g, rng), b = random_mask(g, rng);
      double ab = iou(a, b);
      CHECK(ab == iou(b, a));
      CHECK(ab >= 0.0);
      CHECK(ab <= 1.0);
      if (popcount(a) > 0) CHECK(iou(a, a) == 1.0);
    }
    EdgeMask a = empty_mask(g), b = empty_mask(g);
    a[0] = 1;
    b[1] = 1;
    CHECK(iou(a, b) == 0.0);
    CHECK(iou(empty_mask(g), empty_mask(g)) == 1.0);
  }
}

TEST_CASE("node_iou") {
  ModelConfig cfg = two_layer_config();
  ComputationGraph g = build_graph(cfg);
  SUBCASE("identical sheaves") {
    Rng rng(2);
    EdgeMask m = random_mask(g, rng);
    CHECK(node_iou(g, m, m) == 1.0);
  }
  SUBCASE("edge-disjoint sheaves sharing all endpoints") {
    // A: input->m0->m1->output; B: input->m1, m0->output; same node set,
    // disjoint edges.
    const int im0 = g.find_edge(g.input_node(), g.mlp_node(0));
    const int m0m1 = g.find_edge(g.mlp_node(0), g.mlp_node(1));
    const int m1o = g.find_edge(g.mlp_node(1), g.output_node());
    const int im1 = g.find_edge(g.input_node(), g.mlp_node(1));
    const int m0o = g.find_edge(g.mlp_node(0), g.output_node());
    EdgeMask a = edge_list_to_mask(g, {im0, m0m1, m1o});
    EdgeMask b = edge_list_to_mask(g, {im1, m0o});
    CHECK(iou(a, b) == 0.0);
    CHECK(node_iou(g, a, b) == 1.0);
  }
  SUBCASE("published node-vs-edge overlap rows: node exceeds edge in every task") {
    for (const auto& row : reference::node_edge_rows()) {
      INFO(row.task);
      CHECK(row.node_iou > row.edge_iou);
    }
  }
}

TEST_CASE("cumulative_overlap") {
  ModelConfig cfg = two_layer_config();
  ComputationGraph g = build_graph(cfg);
  SUBCASE("single sheaf") {
    Rng rng(3);
    Sheaf s;
    s.mask = random_mask(g, rng);
    OverlapReport rep = cumulative_overlap({s});
    REQUIRE(rep.prefixes.size() == 1);
    CHECK(rep.prefixes[0].e_intersection == static_cast<std::int64_t>(popcount(s.mask)));
    CHECK(rep.prefixes[0].e_union == rep.prefixes[0].e_intersection);
    CHECK(rep.prefixes[0].mutual_iou == 1.0);
  }
  SUBCASE("twenty identical sheaves give constant rows") {
    Rng rng(4);
    Sheaf s;
    s.mask = random_mask(g, rng);
    std::vector<Sheaf> sheaves(20, s);
    OverlapReport rep = cumulative_overlap(sheaves);
    for (const auto& row : rep.prefixes) {
      CHECK(row.e_intersection == rep.prefixes[0].e_intersection);
      CHECK(row.e_union == rep.prefixes[0].e_union);
      CHECK(row.mutual_iou == 1.0);
    }
  }
  SUBCASE("monotone for every permutation of random sheaves") {
    Rng rng(6);
    std::vector<Sheaf> sheaves(5);
    for (auto& s : sheaves) s.mask = random_mask(g, rng);
    for (int perm = 0; perm < 20; ++perm) {
      std::vector<Sheaf> order = sheaves;
      for (size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
      OverlapReport rep = cumulative_overlap(order);
      for (size_t i = 1; i < rep.prefixes.size(); ++i) {
        CHECK(rep.prefixes[i].e_intersection <= rep.prefixes[i - 1].e_intersection);
        CHECK(rep.prefixes[i].e_union >= rep.prefixes[i - 1].e_union);
      }
    }
  }
}

TEST_CASE("intersection_core") {
  ModelConfig cfg = two_layer_config();
  ComputationGraph g = build_graph(cfg);
  const int im0 = g.find_edge(g.input_node(), g.mlp_node(0));
  const int m0o = g.find_edge(g.mlp_node(0), g.output_node());
  const int stray = g.find_edge(g.head_node(0, 0), g.mlp_node(1));  // off-path when alone
  SUBCASE("shared complete chain plus a stray shared edge keeps the chain only") {
    Sheaf a = sheaf_of(g, {im0, m0o, stray, g.find_edge(g.input_node(), g.output_node())});
    Sheaf b = sheaf_of(g, {im0, m0o, stray, g.find_edge(g.mlp_node(0), g.mlp_node(1))});
    EdgeMask core = intersection_core(g, {a, b});
    CHECK(core == edge_list_to_mask(g, {im0, m0o}));
  }
  SUBCASE("edge-disjoint sheaves give the empty core") {
    Sheaf a = sheaf_of(g, {im0, m0o});
    Sheaf b = sheaf_of(g, {g.find_edge(g.input_node(), g.output_node())});
    CHECK(popcount(intersection_core(g, {a, b})) == 0);
  }
  SUBCASE("identical sheaves give their own path filter") {
    Sheaf a = sheaf_of(g, {im0, m0o, stray});
    EdgeMask core = intersection_core(g, {a, a});
    CHECK(core == path_filter(g, a.mask));
    CHECK(popcount(core) == 2);
  }
  SUBCASE("core is contained in every input sheaf") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<Sheaf> sheaves(3);
      for (auto& s : sheaves) s.mask = random_mask(g, rng, 0.6);
      EdgeMask core = intersection_core(g, sheaves);
      for (const auto& s : sheaves)
        for (size_t e = 0; e < core.size(); ++e) CHECK(core[e] <= s.mask[e]);
    }
  }
}

TEST_CASE("minimal_core_search") {
  ModelConfig cfg = two_layer_config();
  ComputationGraph g = build_graph(cfg);
  TaskDataset ds = generate_agreement(40, 11, 0.5);
  Parameters p = init_model(cfg, 17);
  std::vector<int> core = {g.find_edge(g.input_node(), g.output_node()),
                           g.find_edge(g.input_node(), g.mlp_node(0)),
                           g.find_edge(g.mlp_node(0), g.output_node())};
  SUBCASE("threshold 0 returns the empty set") {
    auto res = minimal_core_search(p, cfg, g, core, ds, 0.0, 3);
    REQUIRE(res.has_value());
    CHECK(res->edges.empty());
    CHECK(res->failed_before == 0);
  }
  SUBCASE("impossible threshold returns none") {
    auto res = minimal_core_search(p, cfg, g, core, ds, 1.01, 3);
    CHECK(!res.has_value());
  }
  SUBCASE("budget guard rejects oversized enumerations") {
    std::vector<int> big;
    for (size_t e = 0; e < g.edge_count(); ++e) big.push_back(static_cast<int>(e));
    CHECK_THROWS_AS(minimal_core_search(p, cfg, g, big, ds, 0.5, 12, 1000), budget_error);
  }
  SUBCASE("returned subset passes and everything smaller failed") {
    // Train briefly so a small functional subset exists.
    TrainConfig tc;
    tc.steps = 500;
    tc.batch_size = 8;
    tc.learning_rate = 3e-3;
    TrainResult tr = train(p, cfg, ds, tc);
    TaskDataset solved = filter_solved(tr.params, cfg, ds);
    std::vector<int> universe;
    for (size_t e = 0; e < g.edge_count(); ++e) universe.push_back(static_cast<int>(e));
    auto res = minimal_core_search(tr.params, cfg, g, universe, solved, 0.8, 2, 2000000);
    if (res.has_value()) {
      CHECK(res->accuracy >= 0.8);
      CHECK(res->best_failing_accuracy < 0.8);
      // Re-check exhaustively that all strictly smaller subsets fail.
      const int k = static_cast<int>(res->edges.size());
      std::int64_t smaller = 0;
      for (int size = 0; size < k; ++size)
        smaller += static_cast<std::int64_t>(
            detail::binomial(static_cast<std::uint64_t>(universe.size()),
                             static_cast<std::uint64_t>(size)));
      CHECK(res->failed_before >= smaller);
    }
  }
}

TEST_CASE("ablate_core") {
  ModelConfig cfg = two_layer_config();
  ComputationGraph g = build_graph(cfg);
  TaskDataset ds = generate_agreement(30, 13, 0.5);
  Parameters p = init_model(cfg, 19);
  TaskDataset solved = filter_solved(p, cfg, ds);
  SUBCASE("removing nothing from the full mask keeps full accuracy") {
    CHECK(ablate_core(p, cfg, g, full_mask(g), {}, solved) == 1.0);
  }
  SUBCASE("removed edges must lie in the base mask") {
    EdgeMask base = empty_mask(g);
    base[0] = 1;
    CHECK_THROWS_AS(ablate_core(p, cfg, g, base, {1}, solved), contract_error);
  }
  SUBCASE("published three-edge ablation rows re-derive the kept counts") {
    for (const auto& row : reference::ablation_rows()) {
      CHECK(row.kept == 3 - static_cast<int>(row.removed.size()));
      CHECK(row.accuracy >= 0.0);
      CHECK(row.accuracy <= 1.0);
    }
    // Removing more core edges never increases the kept count.
    for (size_t i = 1; i < reference::ablation_rows().size(); ++i)
      CHECK(reference::ablation_rows()[i].kept <= reference::ablation_rows()[i - 1].kept);
  }
}

TEST_CASE("layer_profile") {
  ModelConfig cfg = two_layer_config();
  ComputationGraph g = build_graph(cfg);
  SUBCASE("empty sheaf gives all-zero profile") {
    LayerProfile prof = layer_profile(g, empty_mask(g));
    for (const auto& row : prof.rows) CHECK(row.count == 0);
  }
  SUBCASE("full mask reproduces the in-degree census and sums to edge count") {
    LayerProfile prof = layer_profile(g, full_mask(g));
    std::int64_t total = 0;
    for (const auto& row : prof.rows) total += row.count;
    CHECK(total == static_cast<std::int64_t>(g.edge_count()));
    // Layer-0 heads have exactly one incoming edge each.
    CHECK(prof.rows[0].count == cfg.n_heads);
  }
  SUBCASE("counts sum to the sheaf edge count for random masks") {
    Rng rng(8);
    for (int trial = 0; trial < 20; ++trial) {
      EdgeMask m = random_mask(g, rng);
      LayerProfile prof = layer_profile(g, m);
      std::int64_t total = 0;
      for (const auto& row : prof.rows) total += row.count;
      CHECK(total == static_cast<std::int64_t>(popcount(m)));
    }
  }
}

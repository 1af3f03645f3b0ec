// Throwaway diagnostics (not part of the test suite).
#include <cstdio>

#include "sheaflab/discovery.hpp"

using namespace sheaflab;

int main(int argc, char** argv) {
  ModelConfig cfg = ModelConfig::toy(static_cast<int>(vocabulary().size()));
  TaskDataset ds = generate_ioi(600, 42, IoiVariant::mixed);
  Parameters p0 = init_model(cfg, 1);
  TrainConfig tc;
  tc.steps = 2000;
  tc.batch_size = 32;
  tc.learning_rate = 2e-3;
  TrainResult tr = train(p0, cfg, ds, tc);
  TaskDataset eval = filter_solved(tr.params, cfg, ds.subset(Split::eval));
  std::printf("eval examples: %zu\n", eval.examples.size());

  ComputationGraph g = build_graph(cfg);
  auto acc_of = [&](const EdgeMask& m) {
    return evaluate_accuracy(
        [&](const std::vector<int>& t) { return masked_forward_hard(tr.params, cfg, g, m, t); },
        eval);
  };

  std::printf("full mask acc: %.3f\n", acc_of(full_mask(g)));

  // Single-edge ablations: which edges are individually critical?
  std::printf("single-edge ablation accuracies (edge: src->dst acc):\n");
  for (size_t e = 0; e < g.edge_count(); ++e) {
    EdgeMask m = full_mask(g);
    m[e] = 0;
    double a = acc_of(m);
    if (a < 0.99)
      std::printf("  e%-3zu %s->%s: %.3f\n", e, g.nodes[(size_t)g.edges[e].src].name.c_str(),
                  g.nodes[(size_t)g.edges[e].dst].name.c_str(), a);
  }

  // Greedy backward pruning: repeatedly drop the edge whose removal keeps
  // accuracy highest; report the frontier.
  EdgeMask cur = full_mask(g);
  std::printf("greedy frontier (edges accuracy):\n");
  for (int kept = (int)g.edge_count(); kept > 2; --kept) {
    int best_e = -1;
    double best_acc = -1;
    for (size_t e = 0; e < g.edge_count(); ++e) {
      if (!cur[e]) continue;
      cur[e] = 0;
      double a = acc_of(cur);
      cur[e] = 1;
      if (a > best_acc) {
        best_acc = a;
        best_e = (int)e;
      }
    }
    cur[(size_t)best_e] = 0;
    if (kept % 5 == 0 || best_acc < 0.9)
      std::printf("  %3d edges -> %.3f\n", kept - 1, best_acc);
    if (best_acc < 0.6 && kept < 40) break;
  }
  if (argc > 1) {
    // Fidelity-only discovery: should stay near the full mask with acc ~1.
    DiscoveryConfig dc;
    dc.lambda_sparsity = 0;
    dc.lambda_complete = 0;
    dc.lambda_overlap = 0;
    dc.steps = std::atoi(argv[1]);
    dc.batch_size = 16;
    dc.seed = 5;
    Sheaf s = discover(tr.params, cfg, g, eval, dc);
    std::printf("fid-only: acc=%.3f density=%.3f edges=%lld\n", s.accuracy, s.density,
                (long long)s.edge_count);
  }
  return 0;
}

#pragma once

#include <cstdlib>
#include <filesystem>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include "sheaflab/io.hpp"

namespace sheaflab {

namespace fs = std::filesystem;

// Exit codes: 0 success, 1 contract violation, 2 budget/guard rejection.
inline constexpr int kExitOk = 0;
inline constexpr int kExitContract = 1;
inline constexpr int kExitBudget = 2;

/// Everything a pipeline run needs; serializable as one JSON document so the
/// full effective configuration can be persisted and reproduced.
struct ExperimentConfig {
  fs::path out_dir = "out";
  std::uint64_t seed = 1;

  ModelConfig model = ModelConfig::toy(static_cast<int>(vocabulary().size()));
  TrainConfig train;
  double train_floor = 0.95;  // cmd_train fails below this eval accuracy

  std::string task = "ioi";  // "ioi" or "agreement"
  int task_n = 600;
  std::uint64_t task_seed = 42;
  std::string task_variant = "mixed";  // ioi only: "abba", "baba", "mixed"
  double train_fraction = 0.75;

  DiscoveryConfig discovery;

  // Analysis options.
  double core_acc_threshold = 0.8;
  int core_max_subset = 4;
  std::uint64_t core_budget = 1000000;

  // Theory options.
  std::string readout = "answer_logits";  // or "pair_margin"
  int theory_inputs = 4;
  int theory_s = 4;
  double theory_delta = 0.28;
  double theory_tau = 0.2;
  std::uint64_t theory_budget = 10000000;
  int margin_trials = 10000;
  int residual_subsets = 100;
  // Synthetic signature instance (modes that run without a checkpoint).
  int synthetic_e = 14;
  int synthetic_d = 2;
  double synthetic_b = 1.0;

  int jobs = 1;
};

inline Json to_json(const TrainConfig& t) {
  Json j;
  j["learning_rate"] = t.learning_rate;
  j["steps"] = t.steps;
  j["batch_size"] = t.batch_size;
  j["beta1"] = t.beta1;
  j["beta2"] = t.beta2;
  j["adam_eps"] = t.adam_eps;
  j["clip_norm"] = t.clip_norm;
  j["seed"] = t.seed;
  return j;
}

inline void train_config_from_json(const Json& j, TrainConfig& t) {
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.steps = j.value("steps", t.steps);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.beta1 = j.value("beta1", t.beta1);
  t.beta2 = j.value("beta2", t.beta2);
  t.adam_eps = j.value("adam_eps", t.adam_eps);
  t.clip_norm = j.value("clip_norm", t.clip_norm);
  t.seed = j.value("seed", t.seed);
}

inline Json to_json(const DiscoveryConfig& d) {
  Json j;
  j["lambda_sparsity"] = d.lambda_sparsity;
  j["lambda_complete"] = d.lambda_complete;
  j["lambda_overlap"] = d.lambda_overlap;
  j["loss_type"] = d.loss_type == DiscoveryConfig::LossType::pair_ce ? "pair_ce" : "full_kl";
  j["steps"] = d.steps;
  j["learning_rate"] = d.learning_rate;
  j["tau"] = d.tau;
  j["logit_init"] = d.logit_init;
  j["logit_init_noise"] = d.logit_init_noise;
  j["batch_size"] = d.batch_size;
  j["seed"] = d.seed;
  j["excluded_edges"] = d.excluded_edges;
  return j;
}

inline void discovery_config_from_json(const Json& j, DiscoveryConfig& d) {
  d.lambda_sparsity = j.value("lambda_sparsity", d.lambda_sparsity);
  d.lambda_complete = j.value("lambda_complete", d.lambda_complete);
  d.lambda_overlap = j.value("lambda_overlap", d.lambda_overlap);
  if (j.contains("loss_type"))
    d.loss_type = j.at("loss_type") == "full_kl" ? DiscoveryConfig::LossType::full_kl
                                                 : DiscoveryConfig::LossType::pair_ce;
  d.steps = j.value("steps", d.steps);
  d.learning_rate = j.value("learning_rate", d.learning_rate);
  d.tau = j.value("tau", d.tau);
  d.logit_init = j.value("logit_init", d.logit_init);
  d.logit_init_noise = j.value("logit_init_noise", d.logit_init_noise);
  d.batch_size = j.value("batch_size", d.batch_size);
  d.seed = j.value("seed", d.seed);
  if (j.contains("excluded_edges"))
    d.excluded_edges = j.at("excluded_edges").get<std::vector<int>>();
}

inline Json to_json(const ExperimentConfig& c) {
  Json j;
  j["out_dir"] = c.out_dir.string();
  j["seed"] = c.seed;
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["train_floor"] = c.train_floor;
  Json task;
  task["name"] = c.task;
  task["n"] = c.task_n;
  task["seed"] = c.task_seed;
  task["variant"] = c.task_variant;
  task["train_fraction"] = c.train_fraction;
  j["task"] = task;
  j["discovery"] = to_json(c.discovery);
  Json analysis;
  analysis["core_acc_threshold"] = c.core_acc_threshold;
  analysis["core_max_subset"] = c.core_max_subset;
  analysis["core_budget"] = c.core_budget;
  j["analysis"] = analysis;
  Json theory;
  theory["readout"] = c.readout;
  theory["inputs"] = c.theory_inputs;
  theory["s"] = c.theory_s;
  theory["delta"] = c.theory_delta;
  theory["tau"] = c.theory_tau;
  theory["budget"] = c.theory_budget;
  theory["margin_trials"] = c.margin_trials;
  theory["residual_subsets"] = c.residual_subsets;
  Json synth;
  synth["e"] = c.synthetic_e;
  synth["d"] = c.synthetic_d;
  synth["b"] = c.synthetic_b;
  theory["synthetic"] = synth;
  j["theory"] = theory;
  j["jobs"] = c.jobs;
  return j;
}

inline ExperimentConfig experiment_from_json(const Json& j) {
  ExperimentConfig c;
  c.out_dir = j.value("out_dir", c.out_dir.string());
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) train_config_from_json(j.at("train"), c.train);
  c.train_floor = j.value("train_floor", c.train_floor);
  if (j.contains("task")) {
    const Json& t = j.at("task");
    c.task = t.value("name", c.task);
    c.task_n = t.value("n", c.task_n);
    c.task_seed = t.value("seed", c.task_seed);
    c.task_variant = t.value("variant", c.task_variant);
    c.train_fraction = t.value("train_fraction", c.train_fraction);
  }
  if (j.contains("discovery")) discovery_config_from_json(j.at("discovery"), c.discovery);
  if (j.contains("analysis")) {
    const Json& a = j.at("analysis");
    c.core_acc_threshold = a.value("core_acc_threshold", c.core_acc_threshold);
    c.core_max_subset = a.value("core_max_subset", c.core_max_subset);
    c.core_budget = a.value("core_budget", c.core_budget);
  }
  if (j.contains("theory")) {
    const Json& t = j.at("theory");
    c.readout = t.value("readout", c.readout);
    c.theory_inputs = t.value("inputs", c.theory_inputs);
    c.theory_s = t.value("s", c.theory_s);
    c.theory_delta = t.value("delta", c.theory_delta);
    c.theory_tau = t.value("tau", c.theory_tau);
    c.theory_budget = t.value("budget", c.theory_budget);
    c.margin_trials = t.value("margin_trials", c.margin_trials);
    c.residual_subsets = t.value("residual_subsets", c.residual_subsets);
    if (t.contains("synthetic")) {
      c.synthetic_e = t.at("synthetic").value("e", c.synthetic_e);
      c.synthetic_d = t.at("synthetic").value("d", c.synthetic_d);
      c.synthetic_b = t.at("synthetic").value("b", c.synthetic_b);
    }
  }
  c.jobs = j.value("jobs", c.jobs);
  return c;
}

/// SHEAFLAB_OUT, when set, overrides the configured output root.
inline fs::path effective_out_dir(const ExperimentConfig& c) {
  if (const char* env = std::getenv("SHEAFLAB_OUT")) return fs::path(env);
  return c.out_dir;
}

inline TaskDataset generate_task(const ExperimentConfig& c) {
  if (c.task == "ioi") {
    IoiVariant v = c.task_variant == "abba"   ? IoiVariant::abba
                   : c.task_variant == "baba" ? IoiVariant::baba
                                              : IoiVariant::mixed;
    return generate_ioi(c.task_n, c.task_seed, v, c.train_fraction);
  }
  if (c.task == "agreement") return generate_agreement(c.task_n, c.task_seed, c.train_fraction);
  throw contract_error("unknown task: " + c.task);
}

// ---------------------------------------------------------------------------
// Subcommands. Each returns a process exit code and persists its artifacts
// under the output directory. No output embeds timestamps, so reruns with
// identical inputs are byte-identical.
// ---------------------------------------------------------------------------

inline int cmd_defaults(std::ostream& out) {
  out << to_json(ExperimentConfig{}).dump(2) << "\n";
  return kExitOk;
}

/// Trains the base model, writes model.json/model.bin, the generated dataset,
/// and the filtered eval split; prints the base accuracy.
inline int cmd_train(const ExperimentConfig& c, std::ostream& log) {
  fs::path out = effective_out_dir(c);
  fs::create_directories(out);
  TaskDataset ds = generate_task(c);
  Parameters p0 = init_model(c.model, c.model.seed);
  TrainResult tr = train(p0, c.model, ds, c.train);
  if (tr.diverged_at.has_value()) {
    log << "training diverged at step " << *tr.diverged_at << "\n";
    return kExitContract;
  }
  TaskDataset eval = ds.subset(Split::eval);
  const double acc = evaluate_accuracy(full_model_fn(tr.params, c.model), eval);
  log << "base accuracy: " << acc << "\n";
  save_checkpoint(tr.params, c.model, out);
  save_dataset(ds, out / "dataset.jsonl");
  Json summary;
  summary["config_hash"] = config_hash(c.model);
  summary["seed"] = c.model.seed;
  summary["train_seed"] = c.train.seed;
  summary["steps"] = c.train.steps;
  summary["final_loss"] = tr.losses.empty() ? 0.0 : tr.losses.back();
  summary["eval_accuracy"] = acc;
  write_file(out / "train_summary.json", summary.dump(2) + "\n");
  if (acc < c.train_floor) {
    log << "base accuracy " << acc << " below required floor " << c.train_floor << "\n";
    return kExitContract;
  }
  TaskDataset solved = filter_solved(tr.params, c.model, eval);
  log << "filtered eval: " << solved.examples.size() << " of " << eval.examples.size() << "\n";
  save_dataset(solved, out / "eval_filtered.jsonl");
  return kExitOk;
}

/// Runs k discovery passes (repulsion-chained when oasr is on, independent
/// seeds otherwise), writing one sheaf record per run plus overlap CSVs.
/// Partial results are preserved if a later run fails.
inline int cmd_discover(const ExperimentConfig& c, const fs::path& model_dir, int runs,
                        bool oasr, const fs::path& exclude_file, std::ostream& log) {
  fs::path out = effective_out_dir(c);
  fs::create_directories(out);
  auto [params, cfg] = load_checkpoint(model_dir);
  const std::string hash = config_hash(cfg);
  ComputationGraph g = build_graph(cfg);
  TaskDataset data = load_dataset(model_dir / "eval_filtered.jsonl");

  DiscoveryConfig base = c.discovery;
  if (base.seed == 0) base.seed = c.seed;
  if (!exclude_file.empty()) {
    Json j = Json::parse(read_file(exclude_file));
    EdgeMask excluded = edge_mask_from_json(g, j, hash);
    for (size_t e = 0; e < excluded.size(); ++e)
      if (excluded[e]) base.excluded_edges.push_back(static_cast<int>(e));
  }

  std::vector<Sheaf> sheaves;
  std::vector<DiscoveryConfig> used;
  auto emit = [&](const Sheaf& s, const DiscoveryConfig& dc, int index) {
    char name[32];
    std::snprintf(name, sizeof name, "sheaf_%02d.json", index);
    write_file(out / name, sheaf_record_json(g, cfg, s, dc).dump(2) + "\n");
    log << "run " << index << ": acc=" << s.accuracy << " comp=" << s.complement_accuracy
        << " density=" << s.density << " edges=" << s.edge_count << "\n";
  };

  int rc = kExitOk;
  try {
    if (oasr) {
      std::vector<std::uint8_t> repelled(g.edge_count(), 0);
      for (int run = 0; run < runs; ++run) {
        DiscoveryConfig dc = base;
        dc.seed = mix_seed(base.seed, static_cast<std::uint64_t>(run));
        dc.repelled_set.clear();
        for (size_t e = 0; e < repelled.size(); ++e)
          if (repelled[e]) dc.repelled_set.push_back(static_cast<int>(e));
        Sheaf s = discover(params, cfg, g, data, dc, hash);
        for (size_t e = 0; e < repelled.size(); ++e)
          if (s.mask[e]) repelled[e] = 1;
        emit(s, dc, run);
        sheaves.push_back(std::move(s));
        used.push_back(std::move(dc));
      }
    } else {
      const int jobs = std::max(1, c.jobs);
      for (int begin = 0; begin < runs; begin += jobs) {
        const int end = std::min(runs, begin + jobs);
        std::vector<std::future<std::pair<Sheaf, DiscoveryConfig>>> futures;
        for (int run = begin; run < end; ++run) {
          futures.push_back(std::async(std::launch::async, [&, run] {
            DiscoveryConfig dc = base;
            dc.lambda_overlap = 0.0;
            dc.seed = mix_seed(base.seed, static_cast<std::uint64_t>(run));
            Sheaf s = discover(params, cfg, g, data, dc, hash);
            return std::make_pair(std::move(s), std::move(dc));
          }));
        }
        for (int run = begin; run < end; ++run) {
          auto [s, dc] = futures[static_cast<size_t>(run - begin)].get();
          emit(s, dc, run);
          sheaves.push_back(std::move(s));
          used.push_back(std::move(dc));
        }
      }
    }
  } catch (const contract_error& err) {
    log << "discovery failed: " << err.what() << "\n";
    rc = kExitContract;
  }
  if (!sheaves.empty()) {
    OverlapReport rep = cumulative_overlap(sheaves);
    write_overlap_csv(rep, out / "overlap.csv");
    write_pairwise_iou_csv(rep, out / "pairwise_iou.csv");
  }
  return rc;
}

/// Structural analysis over stored sheaf records: pairwise edge/node IoU,
/// layer profiles, intersection core, optional minimal-core search and
/// core-ablation table.
inline int cmd_analyze(const std::vector<fs::path>& sheaf_files, const fs::path& out_dir,
                       bool core_search, bool ablate, const fs::path& model_dir,
                       const ExperimentConfig& c, std::ostream& log) {
  require(!sheaf_files.empty(), "analyze: need at least one sheaf file");
  fs::create_directories(out_dir);

  std::vector<Json> records;
  for (const auto& f : sheaf_files) records.push_back(Json::parse(read_file(f)));
  const std::string hash = records[0].at("config_hash").get<std::string>();
  for (const auto& r : records)
    require(r.at("config_hash") == hash,
            "analyze: mixed config hashes across sheaf files (" + hash + " vs " +
                r.at("config_hash").get<std::string>() + ")");

  ModelConfig cfg = model_config_from_json(records[0].at("model_config"));
  require(config_hash(cfg) == hash, "analyze: stored model config does not match its hash");
  ComputationGraph g = build_graph(cfg);
  std::vector<Sheaf> sheaves;
  for (const auto& r : records) sheaves.push_back(sheaf_from_record(g, r));

  OverlapReport rep = cumulative_overlap(sheaves);
  write_overlap_csv(rep, out_dir / "overlap.csv");
  write_pairwise_iou_csv(rep, out_dir / "pairwise_iou.csv");

  {
    std::ofstream node_csv(out_dir / "node_iou.csv", std::ios::trunc);
    node_csv << "i,j,edge_iou,node_iou\n";
    for (size_t i = 0; i < sheaves.size(); ++i)
      for (size_t j = i + 1; j < sheaves.size(); ++j)
        node_csv << i << "," << j << "," << detail::csv_num(rep.pairwise_iou[i][j]) << ","
                 << detail::csv_num(node_iou(g, sheaves[i].mask, sheaves[j].mask)) << "\n";
  }
  {
    std::vector<std::pair<std::string, LayerProfile>> profiles;
    for (size_t i = 0; i < sheaves.size(); ++i)
      profiles.emplace_back("sheaf_" + std::to_string(i), layer_profile(g, sheaves[i].mask));
    write_profile_csv(profiles, out_dir / "profile.csv");
  }

  std::vector<int> core_edges;
  if (sheaves.size() >= 2) {
    EdgeMask core = intersection_core(g, sheaves);
    core_edges = mask_to_edge_list(core);
    write_file(out_dir / "intersection_core.json",
               edge_set_json(g, core, hash).dump(2) + "\n");
    log << "intersection core: " << core_edges.size() << " edges\n";
  }

  if (core_search || ablate) {
    require(!model_dir.empty(), "analyze: --core-search/--ablate need --model");
    auto [params, loaded_cfg] = load_checkpoint(model_dir);
    require(config_hash(loaded_cfg) == hash, "analyze: checkpoint config hash mismatch");
    TaskDataset data = load_dataset(model_dir / "eval_filtered.jsonl");

    std::vector<int> found;
    if (core_search) {
      require(sheaves.size() >= 2, "analyze: core search needs >= 2 sheaves");
      auto res = minimal_core_search(params, loaded_cfg, g, core_edges, data,
                                     c.core_acc_threshold, c.core_max_subset, c.core_budget);
      Json j;
      j["config_hash"] = hash;
      j["core_edges"] = core_edges;
      j["acc_threshold"] = c.core_acc_threshold;
      if (res) {
        j["found"] = res->edges;
        j["accuracy"] = res->accuracy;
        j["failed_before"] = res->failed_before;
        j["best_failing_accuracy"] = res->best_failing_accuracy;
        found = res->edges;
        log << "minimal core: " << res->edges.size() << " edges at accuracy " << res->accuracy
            << "\n";
      } else {
        j["found"] = nullptr;
        log << "minimal core: no qualifying subset\n";
      }
      write_file(out_dir / "core_search.json", j.dump(2) + "\n");
    }
    if (ablate) {
      const std::vector<int>& core = found.empty() ? core_edges : found;
      require(core.size() <= 12, "analyze: ablation table over " + std::to_string(core.size()) +
                                     " core edges would be too large");
      std::vector<std::tuple<std::string, int, double>> rows;
      const size_t n_subsets = size_t{1} << core.size();
      for (size_t bits = 0; bits < n_subsets; ++bits) {
        std::vector<int> removed;
        std::string label;
        for (size_t i = 0; i < core.size(); ++i) {
          if (bits & (size_t{1} << i)) {
            removed.push_back(core[i]);
            if (!label.empty()) label += "+";
            label += "e" + std::to_string(core[i]);
          }
        }
        if (label.empty()) label = "none";
        double acc = ablate_core(params, loaded_cfg, g, full_mask(g), removed, data);
        rows.emplace_back(label, static_cast<int>(core.size() - removed.size()), acc);
      }
      write_ablation_csv(rows, out_dir / "ablation.csv");
    }
  }
  return kExitOk;
}

/// Theorem-verifier pipelines: collision / low-iou witness search over
/// synthetic or model-derived signatures, the margin-preservation property
/// run, and the linearisation-residual report.
inline int cmd_theory(const ExperimentConfig& c, const fs::path& model_dir,
                      const std::string& mode, bool synthetic, std::ostream& log) {
  fs::path out = effective_out_dir(c);
  fs::create_directories(out);
  const Readout readout =
      c.readout == "pair_margin" ? Readout::pair_margin : Readout::answer_logits;

  auto signatures = [&]() -> std::pair<SignatureMatrix, std::string> {
    if (synthetic) {
      SignatureMatrix sig =
          synthetic_signatures(c.synthetic_e, c.synthetic_d, c.synthetic_b, c.seed);
      Json prov;
      prov["kind"] = "synthetic";
      prov["e"] = c.synthetic_e;
      prov["d"] = c.synthetic_d;
      prov["b"] = c.synthetic_b;
      prov["seed"] = c.seed;
      return {std::move(sig), hex64(fnv1a(prov.dump()))};
    }
    require(!model_dir.empty(), "theory: need --model or --synthetic");
    auto [params, cfg] = load_checkpoint(model_dir);
    TaskDataset data = load_dataset(model_dir / "eval_filtered.jsonl");
    TaskDataset sample{data.task, data.seed, {}};
    for (int i = 0; i < c.theory_inputs && i < static_cast<int>(data.examples.size()); ++i)
      sample.examples.push_back(data.examples[static_cast<size_t>(i)]);
    ComputationGraph g = build_graph(cfg);
    SignatureMatrix sig = edge_signatures(params, cfg, g, sample, readout);
    return {std::move(sig), config_hash(cfg)};
  };

  if (mode == "collision" || mode == "low-iou") {
    auto [sig, prov] = signatures();
    std::optional<CollisionWitness> w;
    if (mode == "collision") {
      w = find_collision(sig, c.theory_s, c.theory_delta, c.theory_budget);
    } else {
      w = find_low_iou_collision(sig, c.theory_s, c.theory_delta, c.theory_tau,
                                 c.theory_budget);
    }
    Json j;
    if (w) {
      j = witness_json(*w, sig, prov);
      log << "witness: gap=" << w->linf_gap << " iou=" << w->iou << "\n";
    } else {
      j["witness"] = nullptr;
      j["provenance_hash"] = prov;
      log << "no witness found\n";
    }
    write_file(out / (mode == "collision" ? "witness_collision.json" : "witness_low_iou.json"),
               j.dump(2) + "\n");
    return kExitOk;
  }

  if (mode == "margin") {
    Rng rng(c.seed);
    int violations = 0, preserved = 0, unmet = 0;
    for (int trial = 0; trial < c.margin_trials; ++trial) {
      const int m = 2 + static_cast<int>(rng.below(6));
      std::vector<double> z(static_cast<size_t>(m));
      for (double& v : z) v = 6.0 * (rng.uniform() - 0.5);
      size_t best = 0;
      for (size_t i = 1; i < z.size(); ++i)
        if (z[i] > z[best]) best = i;
      z[best] += 0.25;
      double margin = std::numeric_limits<double>::infinity();
      for (size_t i = 0; i < z.size(); ++i)
        if (i != best) margin = std::min(margin, z[best] - z[i]);
      const double gamma = margin * (0.2 + 0.8 * rng.uniform());
      std::vector<double> zp = z;
      for (double& v : zp) v += (gamma / 2.0) * 0.999 * (2.0 * rng.uniform() - 1.0);
      switch (check_margin_preservation(z, zp, gamma)) {
        case MarginOutcome::preserved: ++preserved; break;
        case MarginOutcome::violated: ++violations; break;
        case MarginOutcome::condition_unmet: ++unmet; break;
      }
    }
    // Boundary case rho = gamma/2 exactly.
    const bool boundary_unmet =
        check_margin_preservation({2.0, 0.0}, {2.0, 0.75}, 1.5) ==
        MarginOutcome::condition_unmet;
    Json j;
    j["trials"] = c.margin_trials;
    j["preserved"] = preserved;
    j["violated"] = violations;
    j["condition_unmet"] = unmet;
    j["boundary_rho_half_gamma_condition_unmet"] = boundary_unmet;
    j["seed"] = c.seed;
    write_file(out / "margin_report.json", j.dump(2) + "\n");
    log << "margin trials: " << preserved << " preserved, " << violations << " violated\n";
    return violations == 0 && boundary_unmet ? kExitOk : kExitContract;
  }

  if (mode == "residual") {
    require(!model_dir.empty(), "theory: residual mode needs --model");
    auto [params, cfg] = load_checkpoint(model_dir);
    TaskDataset data = load_dataset(model_dir / "eval_filtered.jsonl");
    TaskDataset sample{data.task, data.seed, {}};
    for (int i = 0; i < c.theory_inputs && i < static_cast<int>(data.examples.size()); ++i)
      sample.examples.push_back(data.examples[static_cast<size_t>(i)]);
    ComputationGraph g = build_graph(cfg);
    SignatureMatrix sig = edge_signatures(params, cfg, g, sample, readout);
    Rng rng(c.seed);
    double max_eta = 0.0, sum_eta = 0.0;
    Json etas = Json::array();
    for (int trial = 0; trial < c.residual_subsets; ++trial) {
      std::vector<int> subset;
      for (size_t e = 0; e < g.edge_count(); ++e)
        if (rng.below(2)) subset.push_back(static_cast<int>(e));
      const double eta =
          linearization_residual(params, cfg, g, sig, subset, sample, readout);
      etas.push_back(eta);
      max_eta = std::max(max_eta, eta);
      sum_eta += eta;
    }
    Json j;
    j["config_hash"] = config_hash(cfg);
    j["seed"] = c.seed;
    j["subsets"] = c.residual_subsets;
    j["max_eta"] = max_eta;
    j["mean_eta"] = sum_eta / std::max(1, c.residual_subsets);
    j["etas"] = etas;
    write_file(out / "residual_report.json", j.dump(2) + "\n");
    log << "residual: max eta = " << max_eta << "\n";
    return kExitOk;
  }

  throw contract_error("unknown theory mode: " + mode);
}

/// Maps exceptions to the documented exit codes.
template <class Fn>
int run_guarded(Fn&& fn, std::ostream& log) {
  try {
    return fn();
  } catch (const budget_error& e) {
    log << "budget guard: " << e.what() << "\n";
    return kExitBudget;
  } catch (const contract_error& e) {
    log << "error: " << e.what() << "\n";
    return kExitContract;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return kExitContract;
  }
}

}  // namespace sheaflab

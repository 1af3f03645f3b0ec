#pragma once

#include <bit>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sheaflab/analysis.hpp"
#include "sheaflab/discovery.hpp"
#include "sheaflab/tasks.hpp"
#include "sheaflab/theory.hpp"

namespace sheaflab {

// All files are written with fixed key order and no timestamps, so identical
// inputs produce byte-identical outputs.
using Json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores little-endian doubles");

// ---------------------------------------------------------------------------
// Config (de)serialization and hashing.
// ---------------------------------------------------------------------------

inline Json to_json(const ModelConfig& c) {
  Json j;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["d_model"] = c.d_model;
  j["d_head"] = c.d_head;
  j["d_mlp"] = c.d_mlp;
  j["vocab_size"] = c.vocab_size;
  j["max_seq_len"] = c.max_seq_len;
  j["identity_activations"] = c.identity_activations;
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig model_config_from_json(const Json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.identity_activations = j.value("identity_activations", false);
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

inline std::string config_hash(const ModelConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

// ---------------------------------------------------------------------------
// Checkpoints: model.json (config + manifest) and model.bin (LE doubles).
// ---------------------------------------------------------------------------

inline void save_checkpoint(const Parameters& p, const ModelConfig& cfg,
                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  Json manifest = Json::array();
  std::uint64_t offset = 0;
  std::ofstream bin(dir / "model.bin", std::ios::binary | std::ios::trunc);
  require(bin.good(), "save_checkpoint: cannot open " + (dir / "model.bin").string());
  for_each_param(p, [&](const std::string& name, const Array& a) {
    Json entry;
    entry["name"] = name;
    entry["shape"] = a.shape;
    entry["offset"] = offset;
    manifest.push_back(entry);
    bin.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    offset += a.data.size() * sizeof(double);
  });
  bin.close();
  Json j;
  j["format"] = "sheaflab-model-v1";
  j["config"] = to_json(cfg);
  j["config_hash"] = config_hash(cfg);
  j["manifest"] = manifest;
  std::ofstream meta(dir / "model.json", std::ios::trunc);
  meta << j.dump(2) << "\n";
}

inline std::pair<Parameters, ModelConfig> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "model.json");
  require(meta.good(), "load_checkpoint: cannot open " + (dir / "model.json").string());
  Json j = Json::parse(meta);
  ModelConfig cfg = model_config_from_json(j.at("config"));
  Parameters p = init_model(cfg, cfg.seed);  // allocates the right shapes
  std::ifstream bin(dir / "model.bin", std::ios::binary);
  require(bin.good(), "load_checkpoint: cannot open " + (dir / "model.bin").string());
  size_t entry = 0;
  const Json& manifest = j.at("manifest");
  for_each_param(p, [&](const std::string& name, Array& a) {
    require(entry < manifest.size(), "load_checkpoint: manifest too short");
    const Json& m = manifest[entry++];
    require(m.at("name") == name, "load_checkpoint: manifest order mismatch at " + name);
    std::vector<int> shape = m.at("shape").get<std::vector<int>>();
    require(shape == a.shape, "load_checkpoint: shape mismatch for " + name);
    bin.seekg(static_cast<std::streamoff>(m.at("offset").get<std::uint64_t>()));
    bin.read(reinterpret_cast<char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    require(bin.good(), "load_checkpoint: truncated model.bin at " + name);
  });
  return {std::move(p), cfg};
}

// ---------------------------------------------------------------------------
// Datasets: one JSON object per line.
// ---------------------------------------------------------------------------

inline void save_dataset(const TaskDataset& ds, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "save_dataset: cannot open " + path.string());
  for (const auto& ex : ds.examples) {
    Json j;
    j["tokens"] = ex.tokens;
    j["correct"] = ex.correct;
    j["incorrect"] = ex.incorrect;
    j["template_id"] = ex.template_id;
    j["variant"] = ex.variant;
    j["split"] = ex.split == Split::train ? "train" : "eval";
    j["task"] = ds.task;
    out << j.dump() << "\n";
  }
}

inline TaskDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "load_dataset: cannot open " + path.string());
  TaskDataset ds;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    Json j = Json::parse(line);
    TaskExample ex;
    ex.tokens = j.at("tokens").get<std::vector<int>>();
    ex.correct = j.at("correct").get<int>();
    ex.incorrect = j.at("incorrect").get<int>();
    ex.template_id = j.at("template_id").get<int>();
    ex.variant = j.at("variant").get<std::string>();
    ex.split = j.at("split") == "train" ? Split::train : Split::eval;
    ds.task = j.value("task", ds.task);
    ds.examples.push_back(std::move(ex));
  }
  require(!ds.examples.empty(), "load_dataset: no examples in " + path.string());
  return ds;
}

// ---------------------------------------------------------------------------
// Edge sets and sheaf records.
// ---------------------------------------------------------------------------

/// Canonical edge-set JSON; edge order is the canonical dense index order
/// (topological by destination, then source).
inline Json edge_set_json(const ComputationGraph& g, const EdgeMask& mask,
                          const std::string& cfg_hash, Json meta = Json::object()) {
  Json j;
  j["config_hash"] = cfg_hash;
  Json nodes = Json::array();
  for (const auto& n : g.nodes) nodes.push_back(n.name);
  j["nodes"] = nodes;
  Json edges = Json::array();
  for (size_t e = 0; e < g.edges.size(); ++e)
    if (mask[e])
      edges.push_back(Json::array({g.nodes[static_cast<size_t>(g.edges[e].src)].name,
                                   g.nodes[static_cast<size_t>(g.edges[e].dst)].name}));
  j["edges"] = edges;
  j["meta"] = std::move(meta);
  return j;
}

inline EdgeMask edge_mask_from_json(const ComputationGraph& g, const Json& j,
                                    const std::string& expect_hash = "") {
  if (!expect_hash.empty())
    require(j.at("config_hash") == expect_hash,
            "edge set config hash mismatch: " + j.at("config_hash").get<std::string>() +
                " vs " + expect_hash);
  std::map<std::pair<std::string, std::string>, int> by_name;
  for (size_t e = 0; e < g.edges.size(); ++e)
    by_name[{g.nodes[static_cast<size_t>(g.edges[e].src)].name,
             g.nodes[static_cast<size_t>(g.edges[e].dst)].name}] = static_cast<int>(e);
  EdgeMask mask = empty_mask(g);
  for (const auto& pair : j.at("edges")) {
    auto key = std::make_pair(pair[0].get<std::string>(), pair[1].get<std::string>());
    auto it = by_name.find(key);
    require(it != by_name.end(), "unknown edge " + key.first + " -> " + key.second);
    mask[static_cast<size_t>(it->second)] = 1;
  }
  return mask;
}

inline std::string repelled_hash(const std::vector<int>& repelled) {
  std::string s;
  for (int e : repelled) s += std::to_string(e) + ",";
  return hex64(fnv1a(s));
}

inline Json sheaf_record_json(const ComputationGraph& g, const ModelConfig& cfg,
                              const Sheaf& sheaf, const DiscoveryConfig& dc) {
  Json j;
  j["config_hash"] = sheaf.config_hash;
  j["model_config"] = to_json(cfg);
  j["method"] = sheaf.method;
  j["seed"] = sheaf.seed;
  j["repelled_hash"] = repelled_hash(dc.repelled_set);
  Json disc;
  disc["lambda_sparsity"] = dc.lambda_sparsity;
  disc["lambda_complete"] = dc.lambda_complete;
  disc["lambda_overlap"] = dc.lambda_overlap;
  disc["loss_type"] = dc.loss_type == DiscoveryConfig::LossType::pair_ce ? "pair_ce" : "full_kl";
  disc["steps"] = dc.steps;
  disc["learning_rate"] = dc.learning_rate;
  disc["tau"] = dc.tau;
  disc["logit_init"] = dc.logit_init;
  disc["logit_init_noise"] = dc.logit_init_noise;
  disc["batch_size"] = dc.batch_size;
  disc["excluded_edges"] = dc.excluded_edges;
  j["discovery_config"] = disc;
  Json metrics;
  metrics["accuracy"] = sheaf.accuracy;
  metrics["complement_accuracy"] = sheaf.complement_accuracy;
  metrics["density"] = sheaf.density;
  metrics["edge_count"] = sheaf.edge_count;
  j["metrics"] = metrics;
  j["edge_set"] = edge_set_json(g, sheaf.mask, sheaf.config_hash);
  j["mask_logits"] = sheaf.mask_logits;
  return j;
}

inline Sheaf sheaf_from_record(const ComputationGraph& g, const Json& j) {
  Sheaf s;
  s.config_hash = j.at("config_hash").get<std::string>();
  s.method = j.at("method").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.mask = edge_mask_from_json(g, j.at("edge_set"));
  if (j.contains("mask_logits")) s.mask_logits = j.at("mask_logits").get<std::vector<double>>();
  const Json& m = j.at("metrics");
  s.accuracy = m.at("accuracy").get<double>();
  s.complement_accuracy = m.at("complement_accuracy").get<double>();
  s.density = m.at("density").get<double>();
  s.edge_count = m.at("edge_count").get<std::int64_t>();
  return s;
}

// ---------------------------------------------------------------------------
// Collision witnesses.
// ---------------------------------------------------------------------------

inline Json witness_json(const CollisionWitness& w, const SignatureMatrix& sig,
                         const std::string& provenance_hash) {
  auto sorted_edges = [&](const std::vector<int>& subset) {
    std::vector<int> edges;
    for (int pos : subset) edges.push_back(sig.edge_universe[static_cast<size_t>(pos)]);
    std::sort(edges.begin(), edges.end());
    return edges;
  };
  Json j;
  j["subset_a"] = sorted_edges(w.subset_a);
  j["subset_b"] = sorted_edges(w.subset_b);
  j["delta"] = w.delta;
  if (w.tau >= 0) j["tau"] = w.tau;
  j["linf_gap"] = w.linf_gap;
  j["iou"] = w.iou;
  j["bin"] = w.bin;
  j["provenance_hash"] = provenance_hash;
  return j;
}

// ---------------------------------------------------------------------------
// CSV reports. Numbers are printed with %.6f / %d, fixed column order.
// ---------------------------------------------------------------------------

namespace detail {

inline std::string csv_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace detail

inline void write_overlap_csv(const OverlapReport& rep, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_overlap_csv: cannot open " + path.string());
  out << "prefix,e_cap,e_cup,mutual_iou\n";
  for (const auto& row : rep.prefixes)
    out << row.prefix << "," << row.e_intersection << "," << row.e_union << ","
        << detail::csv_num(row.mutual_iou) << "\n";
}

inline void write_pairwise_iou_csv(const OverlapReport& rep,
                                   const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_pairwise_iou_csv: cannot open " + path.string());
  out << "i,j,iou\n";
  for (size_t i = 0; i < rep.pairwise_iou.size(); ++i)
    for (size_t j = i + 1; j < rep.pairwise_iou.size(); ++j)
      out << i << "," << j << "," << detail::csv_num(rep.pairwise_iou[i][j]) << "\n";
}

inline void write_profile_csv(const std::vector<std::pair<std::string, LayerProfile>>& profiles,
                              const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_profile_csv: cannot open " + path.string());
  out << "sheaf,layer,dst_kind,count\n";
  for (const auto& [name, prof] : profiles)
    for (const auto& row : prof.rows)
      out << name << "," << row.layer << "," << row.kind << "," << row.count << "\n";
}

inline void write_ablation_csv(
    const std::vector<std::tuple<std::string, int, double>>& rows,
    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_ablation_csv: cannot open " + path.string());
  out << "removed_edges,kept_core_count,accuracy\n";
  for (const auto& [removed, kept, acc] : rows)
    out << removed << "," << kept << "," << detail::csv_num(acc) << "\n";
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "read_file: cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), "write_file: cannot open " + path.string());
  out << content;
}

}  // namespace sheaflab

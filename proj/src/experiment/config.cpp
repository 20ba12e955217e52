#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include "semtok/error.hpp"
#include "semtok/experiment.hpp"
#include "semtok/hash.hpp"

namespace semtok::experiment {

namespace {

constexpr int kSchemaVersion = 1;

// Reads known keys from one mapping and rejects everything else.
class Section {
 public:
  Section(YAML::Node node, std::string prefix) : node_(std::move(node)), prefix_(std::move(prefix)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) {
      throw ValidationError(prefix_.empty() ? "config" : prefix_.substr(0, prefix_.size() - 1),
                            "expected a mapping");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const YAML::Node v = lookup(key);
    if (!v || v.IsNull()) return;
    try {
      out = v.as<T>();
    } catch (const YAML::Exception&) {
      throw ValidationError(prefix_ + key, "has the wrong type");
    }
  }

  YAML::Node raw(const std::string& key) {
    seen_.insert(key);
    return lookup(key);
  }

  Section sub(const std::string& key) {
    seen_.insert(key);
    return Section(lookup(key), prefix_ + key + ".");
  }

  void finish() const {
    if (!node_ || !node_.IsMap()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ValidationError(prefix_ + key, "unknown key");
    }
  }

 private:
  YAML::Node lookup(const std::string& key) const {
    if (!node_ || !node_.IsMap()) return YAML::Node();
    for (const auto& kv : node_) {
      if (kv.first.as<std::string>() == key) return kv.second;
    }
    return YAML::Node();
  }

  YAML::Node node_;
  std::string prefix_;
  std::set<std::string> seen_;
};

void read_stage(Section s, StageHyper& h) {
  s.get("epochs", h.epochs);
  s.get("batch_size", h.batch_size);
  s.get("lr", h.lr);
  s.finish();
}

void read_train_snr(const YAML::Node& n, pipeline::SnrPolicy& p) {
  if (!n || n.IsNull()) return;
  if (n.IsScalar()) {
    const auto s = n.as<std::string>();
    if (s == "random") {
      p.random = true;
      return;
    }
    try {
      p.fixed_db = n.as<double>();
      p.random = false;
    } catch (const YAML::Exception&) {
      throw ValidationError("train_snr", "expected a number, \"random\" or a mapping");
    }
    return;
  }
  Section s(n, "train_snr.");
  std::string policy = p.random ? "random" : "fixed";
  s.get("policy", policy);
  s.get("value", p.fixed_db);
  s.get("choices", p.choices);
  s.finish();
  if (policy != "fixed" && policy != "random") throw ValidationError("train_snr.policy", "must be fixed or random");
  p.random = policy == "random";
}

std::string recovery_name(pipeline::Recovery r) { return r == pipeline::Recovery::kSplice ? "splice" : "replace"; }

}  // namespace

ExperimentConfig ExperimentConfig::defaults(const std::string& preset) {
  ExperimentConfig c;
  c.preset = preset;
  if (preset == "desk") {
    c.codec = codec::CodecConfig::desk();
    c.memory.codebook_size = 256;
    c.memory.neighbors = 64;
    c.memory.epochs = 3;
    c.memory.batch_size = 256;
    c.memory.lr = 1e-3;
    c.stage1 = {20, 16, 1e-3};
    c.stage3 = {5, 16, 5e-4};
  } else if (preset == "paper") {
    c.codec = codec::CodecConfig::paper();
    c.dataset.size = 64;
    c.memory.codebook_size = 10240;
    c.memory.neighbors = 512;
    c.memory.dim = 768;
    c.memory.heads = 12;
    c.memory.blocks = 3;
    c.memory.epochs = 100;
    c.memory.batch_size = 1024;
    c.memory.lr = 1e-4;
    c.memory.index.mode = memory::IndexMode::kIvfPq;
    c.memory.index.nlist = 2048;
    c.memory.index.code_size = 32;
    c.memory.index.nprobe = 32;
    c.stage1 = {500, 32, 1e-4};
    c.stage3 = {500, 32, 5e-5};
  } else {
    throw ValidationError("preset", "unknown preset '" + preset + "' (expected desk or paper)");
  }
  c.memory.tau = 8.0;
  c.memory.alpha = 0.5;
  return c;
}

ExperimentConfig parse_config(const std::string& yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception& e) {
    throw ValidationError("config", std::string("parse error: ") + e.what());
  }
  Section top(root, "");
  int version = kSchemaVersion;
  top.get("version", version);
  if (version != kSchemaVersion) throw ValidationError("version", "unsupported schema version");
  std::string preset = "desk";
  top.get("preset", preset);
  ExperimentConfig c = ExperimentConfig::defaults(preset);

  top.get("rho", c.rho);
  top.get("snr_db", c.snr_db);
  read_train_snr(top.raw("train_snr"), c.train_snr);
  std::string recovery = recovery_name(c.recovery);
  top.get("recovery", recovery);
  if (recovery == "splice") {
    c.recovery = pipeline::Recovery::kSplice;
  } else if (recovery == "replace") {
    c.recovery = pipeline::Recovery::kReplace;
  } else {
    throw ValidationError("recovery", "must be replace or splice");
  }
  top.get("seeds", c.seeds);
  top.get("eval_batch", c.eval_batch);
  top.get("output_dir", c.output_dir);

  {
    Section d = top.sub("dataset");
    d.get("kind", c.dataset.kind);
    d.get("path", c.dataset.path);
    d.get("size", c.dataset.size);
    d.get("train", c.dataset.train);
    d.get("test", c.dataset.test);
    d.get("stream", c.dataset.stream);
    d.get("shift_test", c.dataset.shift_test);
    d.get("shift_stream", c.dataset.shift_stream);
    Section t = d.sub("texture");
    t.get("sigma_min", c.dataset.texture.sigma_min);
    t.get("sigma_max", c.dataset.texture.sigma_max);
    t.get("contrast", c.dataset.texture.contrast);
    t.get("color_mix", c.dataset.texture.color_mix);
    t.get("brightness_jitter", c.dataset.texture.brightness_jitter);
    t.finish();
    d.finish();
  }
  {
    Section s = top.sub("codec");
    std::string cp;
    s.get("preset", cp);
    if (!cp.empty()) c.codec = ExperimentConfig::defaults(cp).codec;
    s.get("dims", c.codec.dims);
    s.get("depths", c.codec.depths);
    s.get("heads", c.codec.heads);
    s.get("window", c.codec.window);
    s.get("mlp_ratio", c.codec.mlp_ratio);
    s.get("patch", c.codec.patch);
    s.get("token_len", c.codec.token_len);
    s.finish();
  }
  {
    Section s = top.sub("channel");
    s.get("n_t", c.link.n_t);
    s.get("n_r", c.link.n_r);
    s.get("power", c.link.power);
    s.get("csi_error_var", c.link.csi_error_var);
    s.get("block_columns", c.link.block_columns);
    s.finish();
  }
  {
    Section s = top.sub("memory");
    auto& m = c.memory;
    s.get("codebook_size", m.codebook_size);
    s.get("neighbors", m.neighbors);
    s.get("tau", m.tau);
    s.get("alpha", m.alpha);
    s.get("dim", m.dim);
    s.get("blocks", m.blocks);
    s.get("heads", m.heads);
    s.get("mlp_ratio", m.mlp_ratio);
    s.get("epochs", m.epochs);
    s.get("batch_size", m.batch_size);
    s.get("lr", m.lr);
    s.get("augment", m.augment);
    s.get("warm_start", m.warm_start);
    s.get("pretrained_blocks", m.pretrained_blocks);
    Section ix = s.sub("index");
    std::string mode = m.index.mode == memory::IndexMode::kIvfPq ? "ivfpq" : "exact";
    ix.get("mode", mode);
    if (mode == "ivfpq") {
      m.index.mode = memory::IndexMode::kIvfPq;
    } else if (mode == "exact") {
      m.index.mode = memory::IndexMode::kExact;
    } else {
      throw ValidationError("memory.index.mode", "must be exact or ivfpq");
    }
    ix.get("nlist", m.index.nlist);
    ix.get("code_size", m.index.code_size);
    ix.get("nprobe", m.index.nprobe);
    ix.finish();
    Section km = s.sub("kmeans");
    km.get("max_iters", m.kmeans.max_iters);
    km.get("rel_tol", m.kmeans.rel_tol);
    km.finish();
    s.finish();
  }
  read_stage(top.sub("stage1"), c.stage1);
  read_stage(top.sub("stage3"), c.stage3);
  {
    Section s = top.sub("evolution");
    s.get("enabled", c.evolution.enabled);
    s.get("interval", c.evolution.interval);
    s.get("final_update", c.evolution.final_update);
    s.get("shuffle", c.evolution.shuffle);
    s.finish();
  }
  top.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

void ExperimentConfig::validate() const {
  if (!(rho > 0.0 && rho <= 1.0)) throw ValidationError("rho", "must lie in (0, 1]");
  if (snr_db.empty()) throw ValidationError("snr_db", "at least one SNR required");
  for (double s : snr_db) {
    if (std::isnan(s)) throw ValidationError("snr_db", "must be numbers");
  }
  train_snr.validate();
  if (seeds.empty()) throw ValidationError("seeds", "at least one seed required");
  if (eval_batch == 0) throw ValidationError("eval_batch", "must be positive");
  if (output_dir.empty()) throw ValidationError("output_dir", "must not be empty");

  if (dataset.kind != "synthetic" && dataset.kind != "directory") {
    throw ValidationError("dataset.kind", "must be synthetic or directory");
  }
  if (dataset.kind == "directory" && dataset.path.empty()) {
    throw ValidationError("dataset.path", "required for directory datasets");
  }
  if (dataset.train == 0) throw ValidationError("dataset.train", "must be positive");
  if (dataset.test == 0) throw ValidationError("dataset.test", "must be positive");
  dataset.texture.validate();
  try {
    codec.check_geometry(dataset.size, dataset.size, codec.channels);
  } catch (const GeometryError& e) {
    throw ValidationError("dataset.size", e.what());
  }

  if (link.n_t == 0) throw ValidationError("channel.n_t", "must be positive");
  if (link.n_r == 0) throw ValidationError("channel.n_r", "must be positive");
  if (!(link.power > 0.0)) throw ValidationError("channel.power", "must be positive");
  if (!(link.csi_error_var >= 0.0)) throw ValidationError("channel.csi_error_var", "must be non-negative");

  const auto& m = memory;
  if (m.codebook_size == 0) throw ValidationError("memory.codebook_size", "must be positive");
  if (m.neighbors == 0) throw ValidationError("memory.neighbors", "must be positive");
  if (!(m.tau > 0.0)) throw ValidationError("memory.tau", "must be positive");
  if (!(m.alpha >= 0.0 && m.alpha <= 1.0)) throw ValidationError("memory.alpha", "must lie in [0, 1]");
  if (m.dim == 0 || m.heads == 0 || m.dim % m.heads != 0) {
    throw ValidationError("memory.heads", "memory.dim must be a positive multiple of the head count");
  }
  if (m.blocks == 0) throw ValidationError("memory.blocks", "must be positive");
  if (m.mlp_ratio == 0) throw ValidationError("memory.mlp_ratio", "must be positive");
  if (m.batch_size == 0) throw ValidationError("memory.batch_size", "must be positive");
  if (!(m.lr > 0.0)) throw ValidationError("memory.lr", "must be positive");
  if (m.index.nlist == 0) throw ValidationError("memory.index.nlist", "must be positive");
  if (m.index.code_size == 0) throw ValidationError("memory.index.code_size", "must be positive");
  if (m.index.nprobe == 0) throw ValidationError("memory.index.nprobe", "must be positive");
  if (m.kmeans.max_iters == 0) throw ValidationError("memory.kmeans.max_iters", "must be positive");
  if (!(m.kmeans.rel_tol >= 0.0)) throw ValidationError("memory.kmeans.rel_tol", "must be non-negative");

  for (const auto& [name, h] : {std::pair{"stage1", stage1}, std::pair{"stage3", stage3}}) {
    if (h.batch_size == 0) throw ValidationError(std::string(name) + ".batch_size", "must be positive");
    if (!(h.lr > 0.0)) throw ValidationError(std::string(name) + ".lr", "must be positive");
  }
  if (!(evolution.interval > 0.0 && evolution.interval <= 1.0)) {
    throw ValidationError("evolution.interval", "must lie in (0, 1]");
  }
  if (evolution.enabled) {
    pipeline::EvolutionSchedule s;
    s.interval = evolution.interval;
    if (dataset.stream < s.chunk_count()) {
      throw ValidationError("dataset.stream", "too short for the evolution interval");
    }
  }
}

std::string ExperimentConfig::canonical() const {
  using nlohmann::json;
  const auto& m = memory;
  json j;
  j["version"] = kSchemaVersion;
  j["preset"] = preset;
  j["dataset"] = {{"kind", dataset.kind},
                  {"path", dataset.path},
                  {"size", dataset.size},
                  {"train", dataset.train},
                  {"test", dataset.test},
                  {"stream", dataset.stream},
                  {"shift_test", dataset.shift_test},
                  {"shift_stream", dataset.shift_stream},
                  {"texture",
                   {{"sigma_min", dataset.texture.sigma_min},
                    {"sigma_max", dataset.texture.sigma_max},
                    {"contrast", dataset.texture.contrast},
                    {"color_mix", dataset.texture.color_mix},
                    {"brightness_jitter", dataset.texture.brightness_jitter}}}};
  j["codec"] = codec.canonical();
  j["rho"] = rho;
  j["snr_db"] = snr_db;
  j["train_snr"] = {{"random", train_snr.random}, {"value", train_snr.fixed_db}, {"choices", train_snr.choices}};
  j["channel"] = {{"n_t", link.n_t}, {"n_r", link.n_r}, {"power", link.power}, {"csi_error_var", link.csi_error_var},
                  {"block_columns", link.block_columns}};
  j["memory"] = {{"codebook_size", m.codebook_size},
                 {"neighbors", m.neighbors},
                 {"tau", m.tau},
                 {"alpha", m.alpha},
                 {"dim", m.dim},
                 {"blocks", m.blocks},
                 {"heads", m.heads},
                 {"mlp_ratio", m.mlp_ratio},
                 {"epochs", m.epochs},
                 {"batch_size", m.batch_size},
                 {"lr", m.lr},
                 {"augment", m.augment},
                 {"warm_start", m.warm_start},
                 {"pretrained_blocks", m.pretrained_blocks},
                 {"index",
                  {{"mode", m.index.mode == memory::IndexMode::kIvfPq ? "ivfpq" : "exact"},
                   {"nlist", m.index.nlist},
                   {"code_size", m.index.code_size},
                   {"nprobe", m.index.nprobe}}},
                 {"kmeans", {{"max_iters", m.kmeans.max_iters}, {"rel_tol", m.kmeans.rel_tol}}}};
  j["recovery"] = recovery_name(recovery);
  j["stage1"] = {{"epochs", stage1.epochs}, {"batch_size", stage1.batch_size}, {"lr", stage1.lr}};
  j["stage3"] = {{"epochs", stage3.epochs}, {"batch_size", stage3.batch_size}, {"lr", stage3.lr}};
  j["evolution"] = {{"enabled", evolution.enabled},
                    {"interval", evolution.interval},
                    {"final_update", evolution.final_update},
                    {"shuffle", evolution.shuffle}};
  j["seeds"] = seeds;
  j["eval_batch"] = eval_batch;
  return j.dump();
}

std::string ExperimentConfig::hash() const { return hex64(Fnv1a().text(canonical()).value()); }

}  // namespace semtok::experiment

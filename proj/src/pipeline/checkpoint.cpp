#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "semtok/error.hpp"
#include "semtok/hash.hpp"
#include "semtok/pipeline.hpp"

namespace semtok::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kCheckpointVersion = 1;

void save_params(const nn::ParamList& p, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path.string() + "'");
  p.save(os);
  if (!os) throw IoError("write to '" + path.string() + "' failed");
}

void load_params(const nn::ParamList& p, const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open '" + path.string() + "'");
  p.load(is);
}

}  // namespace

void save_checkpoint(const SystemState& state, const std::string& dir, const std::string& config_hash) {
  state.check();
  const fs::path root(dir);
  fs::create_directories(root);
  const auto& cc = state.codec.config();
  const auto& geo = state.codec.geometry();
  json m;
  m["version"] = kCheckpointVersion;
  m["config_hash"] = config_hash;
  m["stage"] = stage_name(state.stage);
  m["rho"] = state.rho;
  m["recovery"] = state.recovery == Recovery::kSplice ? "splice" : "replace";
  m["seed"] = state.seed;
  m["round"] = state.round;
  m["snr"] = {{"random", state.snr.random}, {"fixed_db", state.snr.fixed_db}, {"choices", state.snr.choices}};
  m["codec"] = {{"dims", cc.dims},           {"depths", cc.depths}, {"heads", cc.heads},
                {"window", cc.window},       {"mlp_ratio", cc.mlp_ratio}, {"patch", cc.patch},
                {"token_len", cc.token_len}, {"channels", cc.channels}, {"hash", hex64(cc.hash())}};
  m["geometry"] = {{"height", geo.height}, {"width", geo.width}, {"channels", geo.channels}};
  save_params(state.codec.params(), root / "codec.bin");
  if (state.memory_net) {
    const auto& mc = state.memory_net->config();
    m["memory"] = {{"token_len", mc.token_len}, {"codebook_size", mc.codebook_size}, {"dim", mc.dim},
                   {"blocks", mc.blocks},       {"heads", mc.heads},                 {"mlp_ratio", mc.mlp_ratio}};
    save_params(state.memory_net->params(), root / "memory.bin");
  }
  if (state.codebook) {
    memory::save_codebook(*state.codebook, (root / "codebook.bin").string());
    m["codebook_source_hash"] = hex64(state.codebook->source_hash);
  }
  // The manifest goes last so its presence marks a complete checkpoint.
  const fs::path tmp = root / "manifest.json.tmp";
  {
    std::ofstream os(tmp);
    os << m.dump(2) << "\n";
    if (!os) throw IoError("cannot write manifest in '" + dir + "'");
  }
  fs::rename(tmp, root / "manifest.json");
}

SystemState load_checkpoint(const std::string& dir) {
  const fs::path root(dir);
  std::ifstream is(root / "manifest.json");
  if (!is) throw IoError("no checkpoint manifest in '" + dir + "'");
  json m;
  try {
    m = json::parse(is);
    if (m.at("version").get<int>() != kCheckpointVersion) throw IoError("unsupported checkpoint version in '" + dir + "'");
    codec::CodecConfig cc;
    const auto& jc = m.at("codec");
    cc.dims = jc.at("dims").get<std::vector<std::size_t>>();
    cc.depths = jc.at("depths").get<std::vector<std::size_t>>();
    cc.heads = jc.at("heads").get<std::vector<std::size_t>>();
    cc.window = jc.at("window");
    cc.mlp_ratio = jc.at("mlp_ratio");
    cc.patch = jc.at("patch");
    cc.token_len = jc.at("token_len");
    cc.channels = jc.at("channels");
    const auto& jg = m.at("geometry");
    codec::Geometry geo{jg.at("height"), jg.at("width"), jg.at("channels")};
    SystemState s(codec::TokenCodec(cc, 0, geo));
    load_params(s.codec.params(), root / "codec.bin");
    s.stage = parse_stage(m.at("stage"));
    s.rho = m.at("rho");
    s.recovery = m.at("recovery") == "splice" ? Recovery::kSplice : Recovery::kReplace;
    s.seed = m.at("seed");
    s.round = m.at("round");
    s.snr.random = m.at("snr").at("random");
    s.snr.fixed_db = m.at("snr").at("fixed_db");
    s.snr.choices = m.at("snr").at("choices").get<std::vector<double>>();
    if (m.contains("memory")) {
      const auto& jm = m.at("memory");
      memory::MemoryNetConfig mc;
      mc.token_len = jm.at("token_len");
      mc.codebook_size = jm.at("codebook_size");
      mc.dim = jm.at("dim");
      mc.blocks = jm.at("blocks");
      mc.heads = jm.at("heads");
      mc.mlp_ratio = jm.at("mlp_ratio");
      s.memory_net.emplace(mc, 0);
      load_params(s.memory_net->params(), root / "memory.bin");
    }
    if (m.contains("codebook_source_hash")) s.codebook = memory::load_codebook((root / "codebook.bin").string());
    s.check();
    return s;
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint manifest in '" + dir + "': " + e.what());
  }
}

}  // namespace semtok::pipeline

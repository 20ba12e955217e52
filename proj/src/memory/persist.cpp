#include <cstring>
#include <fstream>

#include <json.hpp>

#include "semtok/error.hpp"
#include "semtok/hash.hpp"
#include "semtok/memory.hpp"

namespace semtok::memory {

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  Writer(const std::string& path, const char (&magic)[5]) : os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot open '" + path + "' for writing");
    os_.write(magic, 4);
    u32(kVersion);
  }
  void u32(std::uint32_t v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void u64(std::uint64_t v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void f64(double v) { os_.write(reinterpret_cast<const char*>(&v), sizeof v); }
  void matrix(const Matrix& m) {
    u64(m.rows());
    u64(m.cols());
    os_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  void finish(const std::string& path) {
    os_.flush();
    if (!os_) throw IoError("write to '" + path + "' failed");
  }

 private:
  std::ofstream os_;
};

class Reader {
 public:
  Reader(const std::string& path, const char (&magic)[5]) : path_(path), is_(path, std::ios::binary) {
    if (!is_) throw IoError("cannot open '" + path + "'");
    char m[4];
    is_.read(m, 4);
    if (!is_ || std::memcmp(m, magic, 4) != 0) throw IoError("'" + path + "' has the wrong format");
    if (u32() != kVersion) throw IoError("'" + path + "' has an unsupported version");
  }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  double f64() { return get<double>(); }
  Matrix matrix() {
    const std::uint64_t r = u64(), c = u64();
    if (r != 0 && c > (std::uint64_t{1} << 40) / r) throw IoError("'" + path_ + "' is corrupt");
    Matrix m(r, c);
    is_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
    check();
    return m;
  }

 private:
  template <typename T>
  T get() {
    T v{};
    is_.read(reinterpret_cast<char*>(&v), sizeof v);
    check();
    return v;
  }
  void check() {
    if (!is_) throw IoError("'" + path_ + "' is truncated");
  }
  std::string path_;
  std::ifstream is_;
};

void write_manifest(const std::string& path, const nlohmann::json& j) {
  std::ofstream os(path + ".json");
  if (!os) throw IoError("cannot write manifest for '" + path + "'");
  os << j.dump(2) << "\n";
}

nlohmann::json read_manifest(const std::string& path) {
  std::ifstream is(path + ".json");
  if (!is) throw IoError("missing manifest for '" + path + "'");
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("unreadable manifest for '" + path + "': " + e.what());
  }
}

void expect(const nlohmann::json& m, const char* key, std::uint64_t v, const std::string& path) {
  if (!m.contains(key) || m[key].get<std::uint64_t>() != v) {
    throw IoError("manifest of '" + path + "' disagrees on " + key);
  }
}

}  // namespace

void save_codebook(const Codebook& cb, const std::string& path) {
  Writer w(path, "STCB");
  w.u64(cb.build_seed);
  w.u64(cb.source_hash);
  w.matrix(cb.codewords);
  w.u64(cb.objective.size());
  for (double v : cb.objective) w.f64(v);
  w.finish(path);
  write_manifest(path, {{"kind", "codebook"},
                        {"version", kVersion},
                        {"K", cb.size()},
                        {"L", cb.length()},
                        {"seed", cb.build_seed},
                        {"source_hash", hex64(cb.source_hash)}});
}

Codebook load_codebook(const std::string& path) {
  Reader r(path, "STCB");
  Codebook cb;
  cb.build_seed = r.u64();
  cb.source_hash = r.u64();
  cb.codewords = r.matrix();
  const std::uint64_t n = r.u64();
  for (std::uint64_t i = 0; i < n; ++i) cb.objective.push_back(r.f64());
  const auto m = read_manifest(path);
  expect(m, "K", cb.size(), path);
  expect(m, "L", cb.length(), path);
  return cb;
}

void save_datastore(const Datastore& ds, const std::string& path) {
  Writer w(path, "STDS");
  w.u64(ds.prefix_len);
  w.u64(ds.full_len);
  w.f64(ds.keep_ratio);
  w.matrix(ds.keys);
  w.u64(ds.labels.size());
  for (auto l : ds.labels) w.u32(l);
  w.finish(path);
  write_manifest(path, {{"kind", "datastore"},
                        {"version", kVersion},
                        {"N", ds.size()},
                        {"L", ds.full_len},
                        {"L_p", ds.prefix_len},
                        {"rho", ds.keep_ratio}});
}

Datastore load_datastore(const std::string& path) {
  Reader r(path, "STDS");
  Datastore ds;
  ds.prefix_len = r.u64();
  ds.full_len = r.u64();
  ds.keep_ratio = r.f64();
  ds.keys = r.matrix();
  const std::uint64_t n = r.u64();
  if (n != ds.keys.rows()) throw IoError("'" + path + "': label count does not match keys");
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = r.u32();
  const auto m = read_manifest(path);
  expect(m, "N", ds.size(), path);
  expect(m, "L_p", ds.prefix_len, path);
  return ds;
}

void save_teachers(const std::vector<TeacherDistribution>& t, const std::string& path) {
  Writer w(path, "STTD");
  w.u64(t.size());
  for (const auto& d : t) {
    w.u64(static_cast<std::uint64_t>(d.query_id));
    w.u64(d.labels.size());
    for (std::size_t i = 0; i < d.labels.size(); ++i) {
      w.u32(d.labels[i]);
      w.f64(d.probs[i]);
    }
  }
  w.finish(path);
  write_manifest(path, {{"kind", "teachers"}, {"version", kVersion}, {"N", t.size()}});
}

std::vector<TeacherDistribution> load_teachers(const std::string& path) {
  Reader r(path, "STTD");
  std::vector<TeacherDistribution> out(r.u64());
  for (auto& d : out) {
    d.query_id = static_cast<std::int64_t>(r.u64());
    const std::uint64_t n = r.u64();
    if (n > (std::uint64_t{1} << 32)) throw IoError("'" + path + "' is corrupt");
    d.labels.resize(n);
    d.probs.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      d.labels[i] = r.u32();
      d.probs[i] = r.f64();
    }
  }
  expect(read_manifest(path), "N", out.size(), path);
  return out;
}

}  // namespace semtok::memory

#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "sida/tape.hpp"
#include "sida/tensor.hpp"

namespace sida {

static_assert(std::numeric_limits<double>::is_iec559, "checkpoint format requires IEEE doubles");

// Versioned binary checkpoint container: fixed header plus named parameter
// blobs.  Round-trips are bit-exact.
struct CheckpointHeader {
  uint32_t version = 1;
  uint64_t config_hash = 0;   // hash of the full resolved config of the producing run
  uint64_t compat_hash = 0;   // hash of the architecture/data subset, used for load checks
  uint64_t images_seen = 0;
  uint32_t stage_b = 0;
  std::string role;           // "train", "ema", "teacher"
};

struct Checkpoint {
  CheckpointHeader header;
  std::vector<std::pair<std::string, ParamSet>> sections;

  const ParamSet& section(const std::string& name) const {
    for (auto& [k, v] : sections)
      if (k == name) return v;
    throw IoError("checkpoint has no section '" + name + "'");
  }
};

namespace detail {

inline void put_u32(std::string& buf, uint32_t x) { buf.append(reinterpret_cast<char*>(&x), 4); }
inline void put_u64(std::string& buf, uint64_t x) { buf.append(reinterpret_cast<char*>(&x), 8); }
inline void put_str(std::string& buf, const std::string& s) {
  put_u32(buf, uint32_t(s.size()));
  buf.append(s);
}

struct Reader {
  const char* p;
  const char* end;
  explicit Reader(const std::string& s) : p(s.data()), end(s.data() + s.size()) {}
  void need(std::size_t n) const {
    if (std::size_t(end - p) < n) throw IoError("checkpoint truncated");
  }
  uint32_t u32() {
    need(4);
    uint32_t x;
    std::memcpy(&x, p, 4);
    p += 4;
    return x;
  }
  uint64_t u64() {
    need(8);
    uint64_t x;
    std::memcpy(&x, p, 8);
    p += 8;
    return x;
  }
  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(p, p + n);
    p += n;
    return s;
  }
};

}  // namespace detail

// Serialize to a temporary file and rename, so interrupted writes never leave
// a corrupt artifact behind.
inline void atomic_write_file(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(contents.data(), std::streamsize(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::string buf;
  buf.append("SIDACKP1");
  detail::put_u32(buf, ck.header.version);
  detail::put_u64(buf, ck.header.config_hash);
  detail::put_u64(buf, ck.header.compat_hash);
  detail::put_u64(buf, ck.header.images_seen);
  detail::put_u32(buf, ck.header.stage_b);
  detail::put_str(buf, ck.header.role);
  detail::put_u32(buf, uint32_t(ck.sections.size()));
  for (auto& [name, params] : ck.sections) {
    detail::put_str(buf, name);
    detail::put_u32(buf, uint32_t(params.items.size()));
    for (auto& [pname, t] : params.items) {
      detail::put_str(buf, pname);
      detail::put_u32(buf, uint32_t(t.shape.size()));
      for (std::size_t e : t.shape) detail::put_u64(buf, uint64_t(e));
      buf.append(reinterpret_cast<const char*>(t.v.data()), t.v.size() * sizeof(double));
    }
  }
  atomic_write_file(path, buf);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  detail::Reader r(buf);
  r.need(8);
  if (std::string(r.p, r.p + 8) != "SIDACKP1") throw IoError("bad checkpoint magic: " + path.string());
  r.p += 8;
  Checkpoint ck;
  ck.header.version = r.u32();
  if (ck.header.version != 1) throw IoError("unsupported checkpoint version");
  ck.header.config_hash = r.u64();
  ck.header.compat_hash = r.u64();
  ck.header.images_seen = r.u64();
  ck.header.stage_b = r.u32();
  ck.header.role = r.str();
  uint32_t nsec = r.u32();
  for (uint32_t s = 0; s < nsec; ++s) {
    std::string name = r.str();
    ParamSet ps;
    uint32_t nparam = r.u32();
    for (uint32_t i = 0; i < nparam; ++i) {
      std::string pname = r.str();
      uint32_t ndim = r.u32();
      Shape shape(ndim);
      for (uint32_t k = 0; k < ndim; ++k) shape[k] = std::size_t(r.u64());
      Tensor t(shape);
      std::size_t bytes = t.size() * sizeof(double);
      r.need(bytes);
      std::memcpy(t.v.data(), r.p, bytes);
      r.p += bytes;
      ps.add(pname, std::move(t));
    }
    ck.sections.emplace_back(std::move(name), std::move(ps));
  }
  return ck;
}

// FNV-1a, used for config hashing.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace sida

#include "fmkit/checkpoint.hpp"

#include <cstring>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "fmkit/config.hpp"
#include "fmkit/io_util.hpp"

namespace fmkit {

namespace {
constexpr char kMagic[4] = {'F', 'M', 'C', 'K'};
constexpr uint16_t kVersion = 1;
}  // namespace

void save_checkpoint(Model& m, const std::string& path) {
  ByteWriter body;
  body.str(kv_text(model_config_kv(m.cfg)));
  std::vector<Param*> ps;
  m.collect_params(ps);
  body.u32(static_cast<uint32_t>(ps.size()));
  for (Param* p : ps) {
    body.str(p->name);
    body.u32(static_cast<uint32_t>(p->value.rank()));
    for (int d : p->value.shape) body.u32(static_cast<uint32_t>(d));
    for (double v : p->value.data) body.f64(v);
  }
  ByteWriter file;
  file.bytes(kMagic, 4);
  file.u16(kVersion);
  file.bytes(body.buf.data(), body.buf.size());
  file.u32(crc32(body.buf.data(), body.buf.size()));
  write_file_bytes(path, file.buf.data(), file.buf.size());
}

Model load_checkpoint(const std::string& path) {
  std::vector<unsigned char> raw = read_file_bytes(path);
  if (raw.size() < 10 || std::memcmp(raw.data(), kMagic, 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  ByteReader hdr(raw.data() + 4, 2);
  if (hdr.u16() != kVersion) throw std::runtime_error("checkpoint: unsupported version in " + path);
  const unsigned char* body = raw.data() + 6;
  size_t body_len = raw.size() - 10;
  ByteReader tail(raw.data() + raw.size() - 4, 4);
  if (tail.u32() != crc32(body, body_len))
    throw std::runtime_error("checkpoint: checksum mismatch in " + path);

  ByteReader r(body, body_len);
  ModelConfig cfg = model_config_from_kv(parse_kv_text(r.str()));
  Model m = make_model(cfg);
  std::vector<Param*> ps;
  m.collect_params(ps);
  std::unordered_map<std::string, Param*> by_name;
  for (Param* p : ps) by_name[p->name] = p;

  uint32_t n = r.u32();
  if (n != ps.size())
    throw std::runtime_error("checkpoint: parameter count mismatch (file " + std::to_string(n) +
                             ", model " + std::to_string(ps.size()) + ")");
  std::set<std::string> seen;
  for (uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: unknown parameter " + name);
    if (!seen.insert(name).second)
      throw std::runtime_error("checkpoint: duplicate parameter " + name);
    uint32_t rank = r.u32();
    std::vector<int> shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    Tensor& dst = it->second->value;
    if (shape != dst.shape)
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    for (double& v : dst.data) v = r.f64();
  }
  if (r.remaining() != 0) throw std::runtime_error("checkpoint: trailing bytes in " + path);
  return m;
}

}  // namespace fmkit

#include "fmkit/io_util.hpp"

#include <array>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace fmkit {

namespace {

std::array<uint32_t, 256> build_crc_table() {
  std::array<uint32_t, 256> t{};
  for (uint32_t i = 0; i < 256; ++i) {
    uint32_t c = i;
    for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
    t[i] = c;
  }
  return t;
}

}  // namespace

uint32_t crc32(const void* data, size_t n) {
  static const std::array<uint32_t, 256> table = build_crc_table();
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint32_t c = 0xFFFFFFFFu;
  for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

void ByteWriter::u8(uint8_t v) { buf.push_back(v); }

void ByteWriter::u16(uint16_t v) {
  buf.push_back(static_cast<unsigned char>(v & 0xFF));
  buf.push_back(static_cast<unsigned char>(v >> 8));
}

void ByteWriter::u32(uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void ByteWriter::u64(uint64_t v) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void ByteWriter::f64(double v) {
  uint64_t bits;
  static_assert(sizeof(bits) == sizeof(v));
  std::memcpy(&bits, &v, sizeof(bits));
  u64(bits);
}

void ByteWriter::bytes(const void* p, size_t n) {
  const unsigned char* q = static_cast<const unsigned char*>(p);
  buf.insert(buf.end(), q, q + n);
}

void ByteWriter::str(const std::string& s) {
  u32(static_cast<uint32_t>(s.size()));
  bytes(s.data(), s.size());
}

uint8_t ByteReader::u8() {
  if (remaining() < 1) throw std::runtime_error("byte stream truncated");
  return p[off++];
}

uint16_t ByteReader::u16() {
  if (remaining() < 2) throw std::runtime_error("byte stream truncated");
  uint16_t v = static_cast<uint16_t>(p[off]) | static_cast<uint16_t>(p[off + 1]) << 8;
  off += 2;
  return v;
}

uint32_t ByteReader::u32() {
  if (remaining() < 4) throw std::runtime_error("byte stream truncated");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[off + i]) << (8 * i);
  off += 4;
  return v;
}

uint64_t ByteReader::u64() {
  if (remaining() < 8) throw std::runtime_error("byte stream truncated");
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[off + i]) << (8 * i);
  off += 8;
  return v;
}

double ByteReader::f64() {
  uint64_t bits = u64();
  double v;
  std::memcpy(&v, &bits, sizeof(v));
  return v;
}

void ByteReader::bytes(void* dst, size_t k) {
  if (remaining() < k) throw std::runtime_error("byte stream truncated");
  std::memcpy(dst, p + off, k);
  off += k;
}

std::string ByteReader::str() {
  uint32_t len = u32();
  if (remaining() < len) throw std::runtime_error("byte stream truncated");
  std::string s(reinterpret_cast<const char*>(p + off), len);
  off += len;
  return s;
}

std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open file: " + path);
  std::fseek(f, 0, SEEK_END);
  long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<unsigned char> out(sz > 0 ? static_cast<size_t>(sz) : 0);
  if (!out.empty() && std::fread(out.data(), 1, out.size(), f) != out.size()) {
    std::fclose(f);
    throw std::runtime_error("short read: " + path);
  }
  std::fclose(f);
  return out;
}

void write_file_bytes(const std::string& path, const void* data, size_t n) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open file for write: " + path);
  if (n > 0 && std::fwrite(data, 1, n, f) != n) {
    std::fclose(f);
    throw std::runtime_error("short write: " + path);
  }
  if (std::fclose(f) != 0) throw std::runtime_error("close failed: " + path);
}

}  // namespace fmkit

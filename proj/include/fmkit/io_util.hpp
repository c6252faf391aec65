#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace fmkit {

// IEEE 802.3 CRC-32 (reflected, poly 0xEDB88320). crc32("123456789") == 0xCBF43926.
uint32_t crc32(const void* data, size_t n);

// Little-endian byte buffer. All multi-byte fields in the fmkit file formats
// go through these two, so the formats are identical across hosts.
struct ByteWriter {
  std::vector<unsigned char> buf;

  void u8(uint8_t v);
  void u16(uint16_t v);
  void u32(uint32_t v);
  void u64(uint64_t v);
  void f64(double v);
  void bytes(const void* p, size_t n);
  void str(const std::string& s);  // u32 length prefix + raw bytes
};

struct ByteReader {
  const unsigned char* p = nullptr;
  size_t n = 0;
  size_t off = 0;

  ByteReader(const void* data, size_t len)
      : p(static_cast<const unsigned char*>(data)), n(len) {}

  size_t remaining() const { return n - off; }
  uint8_t u8();
  uint16_t u16();
  uint32_t u32();
  uint64_t u64();
  double f64();
  void bytes(void* dst, size_t k);
  std::string str();
};

// Whole-file helpers. Throw std::runtime_error on I/O failure.
std::vector<unsigned char> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const void* data, size_t n);

}  // namespace fmkit

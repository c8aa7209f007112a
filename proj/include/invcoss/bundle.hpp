#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "invcoss/errors.hpp"

namespace invcoss {

// Named-tensor container. Little-endian layout:
//   magic "IVCS" | u16 version | u16 flags | u32 record count
//   per record: u16 name length | name bytes | u8 dtype (0 = f32) |
//               u8 ndim | ndim x u64 dims | row-major f32 payload
//   trailing u64: FNV-1a over all preceding bytes
struct BundleRecord {
  std::string name;
  std::vector<uint64_t> dims;
  std::vector<float> data;

  size_t numel() const {
    size_t n = 1;
    for (auto d : dims) n *= static_cast<size_t>(d);
    return n;
  }
};

class Bundle {
 public:
  static constexpr uint16_t kVersion = 1;

  void add(std::string name, std::vector<uint64_t> dims, std::vector<float> data);
  void add_scalar(std::string name, float v) { add(std::move(name), {1}, {v}); }
  void add_string(std::string name, const std::string& text);

  bool has(const std::string& name) const;
  const BundleRecord& get(const std::string& name) const;
  std::string get_string(const std::string& name) const;
  const std::vector<BundleRecord>& records() const { return records_; }

  std::vector<uint8_t> serialize() const;
  void write(const std::string& path) const;
  static Bundle parse(const std::vector<uint8_t>& bytes);
  static Bundle read(const std::string& path);

 private:
  std::vector<BundleRecord> records_;
};

// FNV-1a content hash of a file on disk.
uint64_t file_hash(const std::string& path);
uint64_t file_size_bytes(const std::string& path);

}  // namespace invcoss

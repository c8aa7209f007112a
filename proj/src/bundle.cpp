#include "invcoss/bundle.hpp"

#include <cstring>
#include <fstream>

#include "invcoss/rng.hpp"

namespace invcoss {

namespace {

void put_u16(std::vector<uint8_t>& out, uint16_t v) {
  out.push_back(static_cast<uint8_t>(v & 0xff));
  out.push_back(static_cast<uint8_t>(v >> 8));
}

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

struct Reader {
  const std::vector<uint8_t>& b;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > b.size()) throw FormatError("bundle: truncated file");
  }
  uint8_t u8() {
    need(1);
    return b[pos++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(b[pos] | (b[pos + 1] << 8));
    pos += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
};

}  // namespace

void Bundle::add(std::string name, std::vector<uint64_t> dims, std::vector<float> data) {
  size_t n = 1;
  for (auto d : dims) n *= static_cast<size_t>(d);
  if (n != data.size()) {
    throw FormatError("bundle: record '" + name + "' dims do not match payload size");
  }
  if (has(name)) throw FormatError("bundle: duplicate record name '" + name + "'");
  records_.push_back({std::move(name), std::move(dims), std::move(data)});
}

void Bundle::add_string(std::string name, const std::string& text) {
  std::vector<float> data(text.size());
  for (size_t i = 0; i < text.size(); ++i) data[i] = static_cast<float>(static_cast<uint8_t>(text[i]));
  add(std::move(name), {static_cast<uint64_t>(text.size())}, std::move(data));
}

bool Bundle::has(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return true;
  }
  return false;
}

const BundleRecord& Bundle::get(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return r;
  }
  throw FormatError("bundle: missing record '" + name + "'");
}

std::string Bundle::get_string(const std::string& name) const {
  const auto& r = get(name);
  std::string s(r.data.size(), '\0');
  for (size_t i = 0; i < r.data.size(); ++i) s[i] = static_cast<char>(static_cast<int>(r.data[i]));
  return s;
}

std::vector<uint8_t> Bundle::serialize() const {
  std::vector<uint8_t> out;
  out.push_back('I');
  out.push_back('V');
  out.push_back('C');
  out.push_back('S');
  put_u16(out, kVersion);
  put_u16(out, 0);  // flags
  put_u32(out, static_cast<uint32_t>(records_.size()));
  for (const auto& r : records_) {
    if (r.name.size() > 0xffff) throw FormatError("bundle: record name too long");
    put_u16(out, static_cast<uint16_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(0);  // dtype 0 = f32 LE
    if (r.dims.size() > 0xff) throw FormatError("bundle: too many dims");
    out.push_back(static_cast<uint8_t>(r.dims.size()));
    for (auto d : r.dims) put_u64(out, d);
    size_t at = out.size();
    out.resize(at + r.data.size() * 4);
    static_assert(sizeof(float) == 4);
    std::memcpy(out.data() + at, r.data.data(), r.data.size() * 4);
  }
  put_u64(out, fnv1a(out.data(), out.size()));
  return out;
}

void Bundle::write(const std::string& path) const {
  auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifactError("bundle: cannot open for write: " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError("bundle: short write: " + path);
}

Bundle Bundle::parse(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < 20) throw FormatError("bundle: file too small");
  uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= static_cast<uint64_t>(bytes[bytes.size() - 8 + i]) << (8 * i);
  }
  uint64_t computed = fnv1a(bytes.data(), bytes.size() - 8);
  if (stored != computed) throw FormatError("bundle: checksum mismatch");

  Reader rd{bytes};
  if (rd.u8() != 'I' || rd.u8() != 'V' || rd.u8() != 'C' || rd.u8() != 'S') {
    throw FormatError("bundle: bad magic");
  }
  uint16_t version = rd.u16();
  if (version != kVersion) {
    throw FormatError("bundle: unsupported version " + std::to_string(version));
  }
  rd.u16();  // flags
  uint32_t count = rd.u32();
  Bundle b;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = rd.u16();
    rd.need(name_len);
    std::string name(reinterpret_cast<const char*>(bytes.data() + rd.pos), name_len);
    rd.pos += name_len;
    uint8_t dtype = rd.u8();
    if (dtype != 0) throw FormatError("bundle: unknown dtype " + std::to_string(dtype));
    uint8_t ndim = rd.u8();
    std::vector<uint64_t> dims(ndim);
    size_t n = 1;
    for (uint8_t d = 0; d < ndim; ++d) {
      dims[d] = rd.u64();
      n *= static_cast<size_t>(dims[d]);
    }
    rd.need(n * 4);
    std::vector<float> data(n);
    std::memcpy(data.data(), bytes.data() + rd.pos, n * 4);
    rd.pos += n * 4;
    b.add(std::move(name), std::move(dims), std::move(data));
  }
  if (rd.pos != bytes.size() - 8) {
    throw FormatError("bundle: declared payload does not match file length");
  }
  return b;
}

Bundle Bundle::read(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("bundle: cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse(bytes);
}

uint64_t file_hash(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifactError("file_hash: cannot open: " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return fnv1a(bytes.data(), bytes.size());
}

uint64_t file_size_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw MissingArtifactError("file_size: cannot open: " + path);
  return static_cast<uint64_t>(f.tellg());
}

}  // namespace invcoss

#include "pltnet/serialize.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pltnet {

namespace {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

void put_u16(std::ostream& os, uint16_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

void put_u64(std::ostream& os, uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint16_t get_u16(std::istream& is) {
  uint16_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

uint64_t get_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  return v;
}

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
  if (!t.defined()) fail("write_tensor: undefined tensor");
  os.write("PLTN", 4);
  put_u16(os, kTensorFormatVersion);
  put_u16(os, static_cast<uint16_t>(t.rank()));
  for (int i = 0; i < t.rank(); ++i) put_u64(os, static_cast<uint64_t>(t.dim(i)));
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (!os) fail("write_tensor: stream write failed");
}

Tensor read_tensor(std::istream& is) {
  char magic[4] = {};
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PLTN", 4) != 0) fail("read_tensor: bad magic, not a tensor file");
  const uint16_t version = get_u16(is);
  if (version != kTensorFormatVersion) {
    fail("read_tensor: unsupported format version " + std::to_string(version));
  }
  const uint16_t rank = get_u16(is);
  if (rank > 8) fail("read_tensor: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  int64_t numel = 1;
  for (uint16_t i = 0; i < rank; ++i) {
    const uint64_t d = get_u64(is);
    if (d == 0 || d > (1ull << 32)) fail("read_tensor: bad extent " + std::to_string(d));
    shape[i] = static_cast<int64_t>(d);
    numel *= shape[i];
  }
  std::vector<float> data(static_cast<size_t>(numel));
  is.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  if (!is) fail("read_tensor: truncated tensor data");
  return Tensor(std::move(shape), std::move(data));
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t);
  atomic_write_bytes(path, os.str());
}

Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("load_tensor: cannot open " + path);
  return read_tensor(is);
}

std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("read_text_file: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void atomic_write_bytes(const std::string& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) fail("atomic_write: cannot open " + tmp.string());
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) fail("atomic_write: write failed for " + tmp.string());
  }
  fs::rename(tmp, target);
}

}  // namespace pltnet

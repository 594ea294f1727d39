#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "transpose/model.hpp"

namespace transpose {

namespace {

// Container layout (all integers and doubles little-endian):
//   magic "TPSE", u32 version,
//   u64 config-json length, config JSON,
//   u32 block count, then per block:
//     u16 name length, name bytes, u8 rank, u32 extents..., f64 values...
constexpr char kMagic[4] = {'T', 'P', 'S', 'E'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  unsigned char buf[sizeof(T)];
  for (size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<unsigned char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xFF);
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  uint64_t v = 0;
  for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

void write_f64(std::ostream& out, double v) {
  write_le<uint64_t>(out, std::bit_cast<uint64_t>(v));
}

double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<uint64_t>(in)); }

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("model file: " + msg); }

}  // namespace

void save_model(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  write_le<uint32_t>(out, kVersion);
  const std::string cfg = model.config.to_json();
  write_le<uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = model.parameters();
  write_le<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_le<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_le<uint8_t>(out, static_cast<uint8_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) write_le<uint32_t>(out, static_cast<uint32_t>(t.dim(i)));
    for (double v : t.value()) write_f64(out, v);
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

Model load_model(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) fail("bad magic in " + path);
  const uint32_t version = read_le<uint32_t>(in);
  if (version != kVersion) fail("unsupported version " + std::to_string(version));
  const uint64_t cfg_len = read_le<uint64_t>(in);
  if (cfg_len > (1u << 20)) fail("implausible config length");
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) fail("truncated config");

  Model model = detail::build_model_skeleton(ModelConfig::from_json(cfg));
  auto params = model.parameters();

  const uint32_t blocks = read_le<uint32_t>(in);
  if (blocks != params.size()) {
    fail("parameter block count " + std::to_string(blocks) + " != expected " +
         std::to_string(params.size()));
  }
  for (auto& [name, t] : params) {
    const uint16_t name_len = read_le<uint16_t>(in);
    std::string stored(name_len, '\0');
    in.read(stored.data(), name_len);
    if (!in || stored != name) fail("expected block '" + name + "', found '" + stored + "'");
    const uint8_t rank = read_le<uint8_t>(in);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(read_le<uint32_t>(in));
    if (shape != t.shape()) {
      fail("block '" + name + "' has shape " + shape_str(shape) + ", expected " +
           shape_str(t.shape()));
    }
    for (double& v : t.value()) v = read_f64(in);
    if (!in) fail("truncated block '" + name + "'");
  }
  return model;
}

}  // namespace transpose

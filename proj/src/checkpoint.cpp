#include "checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>

namespace unext {

namespace {

constexpr char kMagic[4] = {'U', 'N', 'X', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

struct Cursor {
  const uint8_t* data;
  size_t size;
  size_t pos = 0;
  const std::string& path;

  void need(size_t n) const {
    if (pos + n > size) throw FormatError("checkpoint truncated: " + path);
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(data[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(data[pos + i]) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string str(size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(data + pos), n);
    pos += n;
    return s;
  }
};

void append_tensor(std::string& out, const std::string& name, const Tensor<float>& t) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(t.shape().size()));
  for (int64_t e : t.shape()) put_u64(out, static_cast<uint64_t>(e));
  for (int64_t i = 0; i < t.numel(); ++i) put_f32(out, t.data()[i]);
}

}  // namespace

void save_checkpoint(const Model<float>& model, const std::string& path) {
  std::string out;
  out.append(kMagic, 4);
  put_u32(out, kVersion);
  const std::string cfg = config_to_text(model.config);
  put_u32(out, static_cast<uint32_t>(cfg.size()));
  out.append(cfg);
  put_u32(out, static_cast<uint32_t>(model.params.size() + model.buffers.size()));
  for (const auto& [name, t] : model.params) append_tensor(out, name, t);
  for (const auto& [name, t] : model.buffers) append_tensor(out, name, t);
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(out.data()), static_cast<uInt>(out.size()));
  put_u32(out, crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write checkpoint: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed to write checkpoint: " + path);
}

Model<float> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12) throw FormatError("checkpoint truncated: " + path);

  uint32_t stored_crc = 0;
  for (int i = 0; i < 4; ++i) {
    stored_crc |= uint32_t(uint8_t(bytes[bytes.size() - 4 + static_cast<size_t>(i)])) << (8 * i);
  }
  uint32_t crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()),
              static_cast<uInt>(bytes.size() - 4));
  if (crc != stored_crc) throw FormatError("checkpoint CRC mismatch: " + path);

  Cursor c{reinterpret_cast<const uint8_t*>(bytes.data()), bytes.size() - 4, 0, path};
  if (c.str(4) != std::string(kMagic, 4)) throw FormatError("not a checkpoint file: " + path);
  const uint32_t version = c.u32();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  }
  const uint32_t cfg_len = c.u32();
  const UNeXtConfig cfg = parse_config_text(c.str(cfg_len));
  Model<float> model = build_model<float>(cfg, 0);

  const uint32_t count = c.u32();
  const size_t expected = model.params.size() + model.buffers.size();
  if (count != expected) {
    throw FormatError("checkpoint holds " + std::to_string(count) + " tensors but the config needs " +
                      std::to_string(expected) + ": " + path);
  }
  auto find_tensor = [&model](const std::string& name) -> Tensor<float>* {
    for (auto& [n, t] : model.params) {
      if (n == name) return &t;
    }
    for (auto& [n, t] : model.buffers) {
      if (n == name) return &t;
    }
    return nullptr;
  };
  std::vector<std::string> seen;
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t name_len = c.u32();
    const std::string name = c.str(name_len);
    if (std::find(seen.begin(), seen.end(), name) != seen.end()) {
      throw FormatError("duplicate checkpoint tensor: " + name);
    }
    seen.push_back(name);
    const uint32_t rank = c.u32();
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int64_t>(c.u64());
    Tensor<float>* dst = find_tensor(name);
    if (dst == nullptr) throw FormatError("checkpoint tensor not in architecture: " + name);
    if (dst->shape() != shape) {
      throw FormatError("checkpoint tensor " + name + " has shape " + shape_str(shape) +
                        " but the config builds " + shape_str(dst->shape()));
    }
    for (int64_t k = 0; k < dst->numel(); ++k) dst->data()[k] = c.f32();
  }
  model.eval();
  return model;
}

}  // namespace unext

#include "image.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace unext {

namespace {

std::vector<uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open file: " + path);
  f.seekg(0, std::ios::end);
  const std::streamoff size = f.tellg();
  f.seekg(0);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0) f.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!f) throw IoError("failed to read file: " + path);
  return bytes;
}

uint32_t be32(const uint8_t* p) {
  return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(uint8_t(v >> 24));
  out.push_back(uint8_t(v >> 16));
  out.push_back(uint8_t(v >> 8));
  out.push_back(uint8_t(v));
}

uint8_t paeth(uint8_t a, uint8_t b, uint8_t c) {
  const int p = int(a) + int(b) - int(c);
  const int pa = std::abs(p - int(a));
  const int pb = std::abs(p - int(b));
  const int pc = std::abs(p - int(c));
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

constexpr uint8_t kPngSig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};

ImageU8 decode_png(const std::vector<uint8_t>& bytes, const std::string& path) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kPngSig, 8) != 0) {
    throw FormatError("not a PNG file: " + path);
  }
  size_t pos = 8;
  int64_t width = 0, height = 0, channels = 0;
  std::vector<uint8_t> idat;
  bool saw_ihdr = false, saw_iend = false;
  while (pos + 8 <= bytes.size() && !saw_iend) {
    const uint32_t len = be32(&bytes[pos]);
    if (pos + 12 + len > bytes.size()) throw FormatError("truncated PNG chunk in " + path);
    const char* type = reinterpret_cast<const char*>(&bytes[pos + 4]);
    const uint8_t* data = &bytes[pos + 8];
    const uint32_t stored_crc = be32(&bytes[pos + 8 + len]);
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, &bytes[pos + 4], len + 4);
    if (crc != stored_crc) throw FormatError("PNG chunk CRC mismatch in " + path);
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw FormatError("bad IHDR in " + path);
      width = be32(data);
      height = be32(data + 4);
      const uint8_t bit_depth = data[8];
      const uint8_t color_type = data[9];
      const uint8_t interlace = data[12];
      if (bit_depth != 8) throw FormatError("unsupported PNG bit depth in " + path);
      if (interlace != 0) throw FormatError("interlaced PNG is unsupported: " + path);
      if (color_type == 0) channels = 1;
      else if (color_type == 2) channels = 3;
      else throw FormatError("unsupported PNG color type (need gray or RGB): " + path);
      saw_ihdr = true;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_iend = true;
    }
    pos += 12 + len;
  }
  if (!saw_ihdr || !saw_iend || width < 1 || height < 1) throw FormatError("malformed PNG: " + path);

  const int64_t stride = width * channels;
  const uint64_t raw_size = static_cast<uint64_t>(height) * (stride + 1);
  std::vector<uint8_t> raw(raw_size);
  uLongf out_len = raw_size;
  const int rc = uncompress(raw.data(), &out_len, idat.data(), idat.size());
  if (rc != Z_OK || out_len != raw_size) throw FormatError("PNG inflate failed: " + path);

  ImageU8 img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(static_cast<size_t>(height * stride), 0);
  const int64_t bpp = channels;
  for (int64_t y = 0; y < height; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y * (stride + 1))];
    const uint8_t* src = &raw[static_cast<size_t>(y * (stride + 1) + 1)];
    uint8_t* dst = &img.pixels[static_cast<size_t>(y * stride)];
    const uint8_t* up = y > 0 ? &img.pixels[static_cast<size_t>((y - 1) * stride)] : nullptr;
    for (int64_t x = 0; x < stride; ++x) {
      const uint8_t left = x >= bpp ? dst[x - bpp] : 0;
      const uint8_t above = up ? up[x] : 0;
      const uint8_t ul = (up && x >= bpp) ? up[x - bpp] : 0;
      uint8_t v = src[x];
      switch (filter) {
        case 0: break;
        case 1: v = uint8_t(v + left); break;
        case 2: v = uint8_t(v + above); break;
        case 3: v = uint8_t(v + uint8_t((int(left) + int(above)) / 2)); break;
        case 4: v = uint8_t(v + paeth(left, above, ul)); break;
        default: throw FormatError("unknown PNG filter type in " + path);
      }
      dst[x] = v;
    }
  }
  return img;
}

void skip_pnm_space(const std::vector<uint8_t>& b, size_t& pos) {
  while (pos < b.size()) {
    if (b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
    } else if (std::isspace(b[pos])) {
      ++pos;
    } else {
      break;
    }
  }
}

int64_t read_pnm_int(const std::vector<uint8_t>& b, size_t& pos, const std::string& path) {
  skip_pnm_space(b, pos);
  int64_t v = 0;
  bool any = false;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + (b[pos] - '0');
    ++pos;
    any = true;
  }
  if (!any) throw FormatError("malformed PNM header: " + path);
  return v;
}

ImageU8 decode_pnm(const std::vector<uint8_t>& bytes, const std::string& path) {
  if (bytes.size() < 2) throw FormatError("not a PNM file: " + path);
  const int64_t channels = bytes[1] == '5' ? 1 : bytes[1] == '6' ? 3 : 0;
  if (bytes[0] != 'P' || channels == 0) {
    throw FormatError("unsupported image format (need PNG, P5 PGM or P6 PPM): " + path);
  }
  size_t pos = 2;
  const int64_t width = read_pnm_int(bytes, pos, path);
  const int64_t height = read_pnm_int(bytes, pos, path);
  const int64_t maxval = read_pnm_int(bytes, pos, path);
  if (maxval != 255) throw FormatError("PNM maxval must be 255: " + path);
  ++pos;  // single whitespace after maxval
  const int64_t count = width * height * channels;
  if (pos + static_cast<size_t>(count) > bytes.size()) throw FormatError("truncated PNM: " + path);
  ImageU8 img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(bytes.begin() + static_cast<int64_t>(pos),
                    bytes.begin() + static_cast<int64_t>(pos) + count);
  return img;
}

}  // namespace

ImageU8 read_image(const std::string& path) {
  const std::vector<uint8_t> bytes = read_file_bytes(path);
  if (bytes.size() >= 8 && std::memcmp(bytes.data(), kPngSig, 8) == 0) {
    return decode_png(bytes, path);
  }
  return decode_pnm(bytes, path);
}

void write_png_gray(const std::string& path, const uint8_t* data, int64_t width, int64_t height) {
  std::vector<uint8_t> raw(static_cast<size_t>(height * (width + 1)));
  for (int64_t y = 0; y < height; ++y) {
    raw[static_cast<size_t>(y * (width + 1))] = 0;  // filter: none
    std::memcpy(&raw[static_cast<size_t>(y * (width + 1) + 1)], data + y * width,
                static_cast<size_t>(width));
  }
  uLongf comp_cap = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_cap);
  if (compress2(comp.data(), &comp_cap, raw.data(), raw.size(), 6) != Z_OK) {
    throw IoError("PNG deflate failed: " + path);
  }
  comp.resize(comp_cap);

  std::vector<uint8_t> out;
  out.insert(out.end(), kPngSig, kPngSig + 8);
  auto chunk = [&out](const char* type, const std::vector<uint8_t>& payload) {
    put_be32(out, static_cast<uint32_t>(payload.size()));
    const size_t start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    uint32_t crc = crc32(0L, Z_NULL, 0);
    crc = crc32(crc, &out[start], static_cast<uInt>(out.size() - start));
    put_be32(out, crc);
  };
  std::vector<uint8_t> ihdr;
  put_be32(ihdr, static_cast<uint32_t>(width));
  put_be32(ihdr, static_cast<uint32_t>(height));
  ihdr.push_back(8);  // bit depth
  ihdr.push_back(0);  // grayscale
  ihdr.push_back(0);  // deflate
  ihdr.push_back(0);  // adaptive filtering
  ihdr.push_back(0);  // no interlace
  chunk("IHDR", ihdr);
  chunk("IDAT", comp);
  chunk("IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write file: " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("failed to write file: " + path);
}

}  // namespace unext

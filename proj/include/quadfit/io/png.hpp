#pragma once

#include "quadfit/core/errors.hpp"
#include "quadfit/core/image.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace quadfit::io {

namespace pngdetail {

inline void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v >> 24));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v));
}

inline uint32_t get_u32(const uint8_t* p) {
  return (static_cast<uint32_t>(p[0]) << 24) | (static_cast<uint32_t>(p[1]) << 16) |
         (static_cast<uint32_t>(p[2]) << 8) | static_cast<uint32_t>(p[3]);
}

inline void write_chunk(std::vector<uint8_t>& out, const char type[4],
                        const std::vector<uint8_t>& data) {
  put_u32(out, static_cast<uint32_t>(data.size()));
  const size_t crc_start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  const uint32_t crc = static_cast<uint32_t>(
      crc32(0, out.data() + crc_start, static_cast<uInt>(4 + data.size())));
  put_u32(out, crc);
}

inline int paeth(int a, int b, int c) {
  const int p = a + b - c;
  const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  if (pb <= pc) return b;
  return c;
}

}  // namespace pngdetail

/// 8-bit grayscale (1 channel) or RGB (3 channels) PNG; values clamped to
/// [0,1] and rounded to 255ths.
inline void save_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3)
    throw IoError("png: only 1- or 3-channel images are supported");
  if (img.height < 1 || img.width < 1) throw IoError("png: empty image");
  const int H = img.height, W = img.width, C = img.channels;

  std::vector<uint8_t> raw(static_cast<size_t>(H) * (1 + static_cast<size_t>(W) * C));
  size_t at = 0;
  for (int y = 0; y < H; ++y) {
    raw[at++] = 0;  // filter: none
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        raw[at++] = static_cast<uint8_t>(std::lround(v * 255.0));
      }
  }

  uLongf comp_size = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> comp(comp_size);
  if (compress2(comp.data(), &comp_size, raw.data(), static_cast<uLong>(raw.size()), 6) != Z_OK)
    throw IoError("png: compression failed");
  comp.resize(comp_size);

  std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
  std::vector<uint8_t> ihdr;
  pngdetail::put_u32(ihdr, static_cast<uint32_t>(W));
  pngdetail::put_u32(ihdr, static_cast<uint32_t>(H));
  ihdr.push_back(8);                                    // bit depth
  ihdr.push_back(C == 1 ? 0 : 2);                       // gray / truecolor
  ihdr.push_back(0);
  ihdr.push_back(0);
  ihdr.push_back(0);
  pngdetail::write_chunk(out, "IHDR", ihdr);
  pngdetail::write_chunk(out, "IDAT", comp);
  pngdetail::write_chunk(out, "IEND", {});

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path);
}

/// Decodes 8-bit gray or RGB PNGs with scanline filters 0-4.
inline Image load_png(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open " + path);
  const auto n = static_cast<size_t>(f.tellg());
  f.seekg(0);
  std::vector<uint8_t> buf(n);
  f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (!f) throw IoError("short read: " + path);

  static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
  if (n < 8 || std::memcmp(buf.data(), sig, 8) != 0)
    throw IoError("not a png: " + path);

  int W = 0, H = 0, C = 0;
  std::vector<uint8_t> idat;
  size_t at = 8;
  bool saw_end = false;
  while (at + 12 <= n && !saw_end) {
    const uint32_t len = pngdetail::get_u32(buf.data() + at);
    if (at + 12 + len > n) throw IoError("png: truncated chunk in " + path);
    const uint8_t* type = buf.data() + at + 4;
    const uint8_t* data = buf.data() + at + 8;
    const uint32_t crc_want = pngdetail::get_u32(data + len);
    const uint32_t crc_have =
        static_cast<uint32_t>(crc32(0, type, static_cast<uInt>(4 + len)));
    if (crc_want != crc_have) throw IoError("png: bad chunk crc in " + path);
    if (std::memcmp(type, "IHDR", 4) == 0) {
      if (len != 13) throw IoError("png: bad IHDR in " + path);
      W = static_cast<int>(pngdetail::get_u32(data));
      H = static_cast<int>(pngdetail::get_u32(data + 4));
      const int depth = data[8], color = data[9];
      if (depth != 8 || (color != 0 && color != 2))
        throw IoError("png: only 8-bit gray/rgb supported: " + path);
      if (data[10] != 0 || data[11] != 0 || data[12] != 0)
        throw IoError("png: unsupported compression/filter/interlace: " + path);
      C = color == 0 ? 1 : 3;
    } else if (std::memcmp(type, "IDAT", 4) == 0) {
      idat.insert(idat.end(), data, data + len);
    } else if (std::memcmp(type, "IEND", 4) == 0) {
      saw_end = true;
    }
    at += 12 + len;
  }
  if (W <= 0 || H <= 0 || C == 0) throw IoError("png: missing IHDR in " + path);
  if (idat.empty()) throw IoError("png: missing IDAT in " + path);

  const size_t stride = 1 + static_cast<size_t>(W) * C;
  std::vector<uint8_t> raw(static_cast<size_t>(H) * stride);
  uLongf raw_size = static_cast<uLongf>(raw.size());
  if (uncompress(raw.data(), &raw_size, idat.data(), static_cast<uLong>(idat.size())) != Z_OK ||
      raw_size != raw.size())
    throw IoError("png: inflate failed for " + path);

  // undo scanline filters in place (prior = reconstructed previous row)
  const int bpp = C;
  std::vector<uint8_t> recon(static_cast<size_t>(H) * W * C);
  for (int y = 0; y < H; ++y) {
    const uint8_t filter = raw[static_cast<size_t>(y) * stride];
    const uint8_t* src = raw.data() + static_cast<size_t>(y) * stride + 1;
    uint8_t* dst = recon.data() + static_cast<size_t>(y) * W * C;
    const uint8_t* up = y > 0 ? dst - static_cast<size_t>(W) * C : nullptr;
    for (int i = 0; i < W * C; ++i) {
      const int left = i >= bpp ? dst[i - bpp] : 0;
      const int above = up ? up[i] : 0;
      const int corner = (up && i >= bpp) ? up[i - bpp] : 0;
      int v = src[i];
      switch (filter) {
        case 0: break;
        case 1: v += left; break;
        case 2: v += above; break;
        case 3: v += (left + above) / 2; break;
        case 4: v += pngdetail::paeth(left, above, corner); break;
        default: throw IoError("png: unknown filter type in " + path);
      }
      dst[i] = static_cast<uint8_t>(v & 0xff);
    }
  }

  Image img(C, H, W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        img.at(c, y, x) = recon[(static_cast<size_t>(y) * W + x) * C + c] / 255.0;
  return img;
}

}  // namespace quadfit::io

#pragma once

// Exchange formats: PFM (little-endian float maps, 1 or 3 channels), 8-bit
// PNG via libpng, and binary PPM. All writes go to a temporary file that is
// renamed into place.

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "d2t/core_geometry.hpp"
#include "d2t/errors.hpp"

namespace d2t::io {

namespace fs = std::filesystem;

inline void write_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace detail {

inline bool host_little_endian() {
  const std::uint16_t x = 1;
  unsigned char b;
  std::memcpy(&b, &x, 1);
  return b == 1;
}

inline void append_f32_le(std::string& out, float v) {
  unsigned char b[4];
  std::memcpy(b, &v, 4);
  if (!host_little_endian()) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
  out.append(reinterpret_cast<const char*>(b), 4);
}

inline float read_f32(const unsigned char* p, bool little) {
  unsigned char b[4] = {p[0], p[1], p[2], p[3]};
  if (little != host_little_endian()) std::swap(b[0], b[3]), std::swap(b[1], b[2]);
  float v;
  std::memcpy(&v, b, 4);
  return v;
}

// Reads one whitespace-delimited header token, tracking the byte offset.
inline std::string header_token(const std::string& bytes, std::size_t& pos, const std::string& file) {
  while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  const std::size_t start = pos;
  while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
  if (start == pos) throw ParseError(file, start, "unexpected end of header");
  return bytes.substr(start, pos - start);
}

inline int parse_positive_int(const std::string& tok, std::size_t offset, const std::string& file) {
  try {
    std::size_t used = 0;
    const long v = std::stol(tok, &used);
    if (used != tok.size() || v <= 0 || v > (1 << 20)) throw std::invalid_argument(tok);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw ParseError(file, offset, "expected a positive integer, got '" + tok + "'");
  }
}

}  // namespace detail

struct FloatImage {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<float> values;  // row-major, top row first, interleaved channels
};

// PFM stores rows bottom-to-top; this encoder and the decoder below both
// flip so that in-memory row 0 is the top image row.
inline std::string encode_pfm(const FloatImage& img) {
  std::string out = (img.channels == 3 ? "PF\n" : "Pf\n");
  out += std::to_string(img.width) + " " + std::to_string(img.height) + "\n-1.0\n";
  const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  out.reserve(out.size() + img.values.size() * 4);
  for (int y = img.height - 1; y >= 0; --y) {
    for (std::size_t k = 0; k < row; ++k) {
      detail::append_f32_le(out, img.values[static_cast<std::size_t>(y) * row + k]);
    }
  }
  return out;
}

inline FloatImage decode_pfm(const std::string& bytes, const std::string& file) {
  std::size_t pos = 0;
  const std::string magic = detail::header_token(bytes, pos, file);
  FloatImage img;
  if (magic == "Pf") {
    img.channels = 1;
  } else if (magic == "PF") {
    img.channels = 3;
  } else {
    throw ParseError(file, 0, "bad PFM magic '" + magic + "'");
  }
  std::size_t at = pos;
  img.width = detail::parse_positive_int(detail::header_token(bytes, pos, file), at, file);
  at = pos;
  img.height = detail::parse_positive_int(detail::header_token(bytes, pos, file), at, file);
  at = pos;
  const std::string scale_tok = detail::header_token(bytes, pos, file);
  double scale = 0.0;
  try {
    scale = std::stod(scale_tok);
  } catch (const std::exception&) {
    throw ParseError(file, at, "bad PFM scale '" + scale_tok + "'");
  }
  if (scale == 0.0 || !std::isfinite(scale)) throw ParseError(file, at, "PFM scale must be non-zero");
  const bool little = scale < 0.0;
  if (pos >= bytes.size()) throw ParseError(file, pos, "missing data section");
  ++pos;  // single whitespace after the scale
  const std::size_t row = static_cast<std::size_t>(img.width) * img.channels;
  const std::size_t need = row * img.height * 4;
  if (bytes.size() - pos < need) {
    throw ParseError(file, bytes.size(),
                     "truncated data: expected " + std::to_string(need) + " bytes, found " +
                         std::to_string(bytes.size() - pos));
  }
  img.values.resize(row * img.height);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + pos;
  for (int y = img.height - 1; y >= 0; --y) {
    for (std::size_t k = 0; k < row; ++k, p += 4) {
      img.values[static_cast<std::size_t>(y) * row + k] = detail::read_f32(p, little);
    }
  }
  return img;
}

inline void write_pfm(const fs::path& path, const ScalarMap& map) {
  FloatImage img{map.width(), map.height(), 1, {}};
  img.values.reserve(map.size());
  for (double v : map.data()) img.values.push_back(static_cast<float>(v));
  write_atomic(path, encode_pfm(img));
}

inline void write_pfm(const fs::path& path, const ColorImage& image) {
  FloatImage img{image.width(), image.height(), 3, {}};
  img.values.reserve(image.size() * 3);
  for (const Vec3& v : image.data())
    for (int c = 0; c < 3; ++c) img.values.push_back(static_cast<float>(v[c]));
  write_atomic(path, encode_pfm(img));
}

inline ScalarMap read_pfm_scalar(const fs::path& path) {
  const FloatImage img = decode_pfm(read_file(path), path.string());
  if (img.channels != 1) throw ParseError(path.string(), 0, "expected a single-channel PFM");
  ScalarMap out(img.width, img.height);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = img.values[i];
  return out;
}

inline ColorImage read_pfm_color(const fs::path& path) {
  const FloatImage img = decode_pfm(read_file(path), path.string());
  if (img.channels != 3) throw ParseError(path.string(), 0, "expected a three-channel PFM");
  std::vector<Vec3> px(static_cast<std::size_t>(img.width) * img.height);
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = Vec3(img.values[3 * i], img.values[3 * i + 1], img.values[3 * i + 2]);
  }
  return ColorImage(img.width, img.height, std::move(px));
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

namespace detail {

// channels: 1 (gray) or 3 (RGB), 8 bits per sample.
inline std::string encode_png(int width, int height, int channels, const std::vector<std::uint8_t>& px) {
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, px.data(), 0, nullptr)) {
    throw Error(std::string("libpng: ") + image.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, px.data(), 0, nullptr)) {
    throw Error(std::string("libpng: ") + image.message);
  }
  out.resize(size);
  return out;
}

// Decodes any PNG into 8-bit RGB.
inline std::vector<std::uint8_t> decode_png_rgb(const std::string& bytes, const std::string& file,
                                                int& width, int& height) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw ParseError(file, 0, "not a PNG file");
  }
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ParseError(file, 8, std::string("libpng: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  width = static_cast<int>(image.width);
  height = static_cast<int>(image.height);
  std::vector<std::uint8_t> rgb(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, rgb.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ParseError(file, bytes.size(), "libpng: " + msg);
  }
  return rgb;
}

}  // namespace detail

inline std::string encode_png(const ColorImage& img) {
  std::vector<std::uint8_t> px;
  px.reserve(img.size() * 3);
  for (const Vec3& v : img.data())
    for (int c = 0; c < 3; ++c) px.push_back(to_byte(v[c]));
  return detail::encode_png(img.width(), img.height(), 3, px);
}

inline std::string encode_png(const BinaryMask& mask) {
  std::vector<std::uint8_t> px;
  px.reserve(mask.size());
  for (auto v : mask.data()) px.push_back(v ? 255 : 0);
  return detail::encode_png(mask.width(), mask.height(), 1, px);
}

inline void write_png(const fs::path& path, const ColorImage& img) { write_atomic(path, encode_png(img)); }
inline void write_png(const fs::path& path, const BinaryMask& m) { write_atomic(path, encode_png(m)); }

inline std::string encode_ppm(const ColorImage& img) {
  std::string out = "P6\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
  for (const Vec3& v : img.data())
    for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(to_byte(v[c])));
  return out;
}

inline ColorImage decode_ppm(const std::string& bytes, const std::string& file) {
  std::size_t pos = 0;
  if (detail::header_token(bytes, pos, file) != "P6") throw ParseError(file, 0, "bad PPM magic");
  std::size_t at = pos;
  const int w = detail::parse_positive_int(detail::header_token(bytes, pos, file), at, file);
  at = pos;
  const int h = detail::parse_positive_int(detail::header_token(bytes, pos, file), at, file);
  at = pos;
  if (detail::parse_positive_int(detail::header_token(bytes, pos, file), at, file) != 255) {
    throw ParseError(file, at, "only 8-bit PPM is supported");
  }
  ++pos;
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() < pos + need) throw ParseError(file, bytes.size(), "truncated PPM data");
  std::vector<Vec3> px(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < px.size(); ++i) {
    for (int c = 0; c < 3; ++c) {
      px[i][c] = static_cast<unsigned char>(bytes[pos + 3 * i + static_cast<std::size_t>(c)]) / 255.0;
    }
  }
  return ColorImage(w, h, std::move(px));
}

// PNG or PPM, chosen by extension.
inline ColorImage read_image(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (path.extension() == ".ppm") return decode_ppm(bytes, path.string());
  int w = 0, h = 0;
  const auto rgb = detail::decode_png_rgb(bytes, path.string(), w, h);
  std::vector<Vec3> px(static_cast<std::size_t>(w) * h);
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = Vec3(rgb[3 * i], rgb[3 * i + 1], rgb[3 * i + 2]) / 255.0;
  }
  return ColorImage(w, h, std::move(px));
}

inline void write_image(const fs::path& path, const ColorImage& img) {
  write_atomic(path, path.extension() == ".ppm" ? encode_ppm(img) : encode_png(img));
}

// Any non-zero luminance counts as true.
inline BinaryMask read_mask(const fs::path& path) {
  const ColorImage img = read_image(path);
  BinaryMask m(img.width(), img.height(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = img[i].sum() > 0.0 ? 1 : 0;
  return m;
}

}  // namespace d2t::io

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "psfm/error.hpp"
#include "psfm/geom.hpp"

namespace psfm {

// Dense per-frame depth grid, row-major, float32 storage.
// A pixel is valid iff its value is finite and strictly positive.
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int width, int height, float fill = 0.0f)
      : width_(width), height_(height),
        values_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width <= 0 || height <= 0) {
      Throw(ErrorCode::kInvalidArgument, "depth map dimensions must be positive");
    }
  }
  DepthMap(int width, int height, std::vector<float> values)
      : width_(width), height_(height), values_(std::move(values)) {
    if (width <= 0 || height <= 0 ||
        values_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
      Throw(ErrorCode::kInvalidArgument, "depth map dimensions do not match value count");
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  const std::vector<float>& values() const { return values_; }
  std::vector<float>& mutable_values() { return values_; }

  float at(int x, int y) const { return values_[Index(x, y)]; }
  float& at(int x, int y) { return values_[Index(x, y)]; }

  static bool IsValidValue(double v) { return std::isfinite(v) && v > 0.0; }
  bool IsValid(int x, int y) const { return IsValidValue(at(x, y)); }

  bool operator==(const DepthMap& o) const {
    return width_ == o.width_ && height_ == o.height_ &&
           std::memcmp(values_.data(), o.values_.data(), values_.size() * sizeof(float)) == 0;
  }

 private:
  std::size_t Index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<float> values_;
};

// Bilinear depth at a continuous pixel position. Absent when any of the
// four support pixels is invalid; no renormalization over valid neighbors.
inline std::optional<double> DepthLookup(const DepthMap& map, const Point2& p) {
  const double x = p.x();
  const double y = p.y();
  if (!(x >= 0.0 && y >= 0.0 && x <= map.width() - 1 && y <= map.height() - 1)) {
    Throw(ErrorCode::kOutOfBounds, "depth lookup outside the grid");
  }
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, map.width() - 1);
  const int y1 = std::min(y0 + 1, map.height() - 1);
  const double ax = x - x0;
  const double ay = y - y0;
  const double v00 = map.at(x0, y0);
  const double v10 = map.at(x1, y0);
  const double v01 = map.at(x0, y1);
  const double v11 = map.at(x1, y1);
  if (!DepthMap::IsValidValue(v00) || !DepthMap::IsValidValue(v10) ||
      !DepthMap::IsValidValue(v01) || !DepthMap::IsValidValue(v11)) {
    return std::nullopt;
  }
  const double top = (1.0 - ax) * v00 + ax * v10;
  const double bottom = (1.0 - ax) * v01 + ax * v11;
  const double d = (1.0 - ay) * top + ay * bottom;
  if (!DepthMap::IsValidValue(d)) return std::nullopt;
  return d;
}

// Source index for nearest-neighbour resampling of pixel centers.
inline int NearestSourceIndex(int target, int target_size, int source_size) {
  const double s = (target + 0.5) * static_cast<double>(source_size) / target_size;
  return std::clamp(static_cast<int>(std::floor(s)), 0, source_size - 1);
}

template <typename Grid>
Grid ResizeNearest(const Grid& src, int target_w, int target_h) {
  if (target_w <= 0 || target_h <= 0) {
    Throw(ErrorCode::kInvalidArgument, "resize target must be positive");
  }
  if (target_w == src.width() && target_h == src.height()) return src;
  Grid out(target_w, target_h);
  for (int y = 0; y < target_h; ++y) {
    const int sy = NearestSourceIndex(y, target_h, src.height());
    for (int x = 0; x < target_w; ++x) {
      out.at(x, y) = src.at(NearestSourceIndex(x, target_w, src.width()), sy);
    }
  }
  return out;
}

inline DepthMap ResizeDepth(const DepthMap& map, int target_w, int target_h) {
  return ResizeNearest(map, target_w, target_h);
}

// Binary mask; nonzero marks pixels excluded from depth priors.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height, std::uint8_t fill = 0)
      : width_(width), height_(height),
        values_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width <= 0 || height <= 0) {
      Throw(ErrorCode::kInvalidArgument, "mask dimensions must be positive");
    }
  }

  int width() const { return width_; }
  int height() const { return height_; }
  std::uint8_t at(int x, int y) const { return values_[Index(x, y)]; }
  std::uint8_t& at(int x, int y) { return values_[Index(x, y)]; }
  const std::vector<std::uint8_t>& values() const { return values_; }

  // True when any of the four bilinear support pixels of p is masked.
  bool IsMasked(const Point2& p) const {
    const int x0 = std::clamp(static_cast<int>(std::floor(p.x())), 0, width_ - 1);
    const int y0 = std::clamp(static_cast<int>(std::floor(p.y())), 0, height_ - 1);
    const int x1 = std::min(x0 + 1, width_ - 1);
    const int y1 = std::min(y0 + 1, height_ - 1);
    return at(x0, y0) != 0 || at(x1, y0) != 0 || at(x0, y1) != 0 || at(x1, y1) != 0;
  }

  bool operator==(const Mask&) const = default;

 private:
  std::size_t Index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> values_;
};

namespace detail {

inline std::vector<char> ReadAll(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) Throw(ErrorCode::kIoError, "cannot open " + path.string());
  return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void WriteAll(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) Throw(ErrorCode::kIoError, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) Throw(ErrorCode::kIoError, "write failed for " + path.string());
}

inline std::uint32_t LoadU32Le(const char* p) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<std::uint8_t>(p[i]);
  return v;
}

inline void AppendU32Le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline float LoadF32(const char* p, bool little_endian) {
  std::uint32_t bits = 0;
  if (little_endian) {
    bits = LoadU32Le(p);
  } else {
    for (int i = 0; i < 4; ++i) bits = (bits << 8) | static_cast<std::uint8_t>(p[i]);
  }
  return std::bit_cast<float>(bits);
}

// Whitespace-separated header tokens as used by the netpbm family.
class HeaderScanner {
 public:
  HeaderScanner(const std::vector<char>& data, std::string name) : data_(data), name_(std::move(name)) {}

  std::string Token() {
    SkipSpaceAndComments();
    const std::size_t start = pos_;
    while (pos_ < data_.size() && !std::isspace(static_cast<unsigned char>(data_[pos_]))) ++pos_;
    if (start == pos_) Fail("truncated header");
    return std::string(data_.data() + start, pos_ - start);
  }

  long Integer() {
    const std::string tok = Token();
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size()) Fail("bad integer '" + tok + "'");
      return v;
    } catch (const std::logic_error&) {
      Fail("bad integer '" + tok + "'");
    }
  }

  double Real() {
    const std::string tok = Token();
    try {
      std::size_t used = 0;
      const double v = std::stod(tok, &used);
      if (used != tok.size()) Fail("bad number '" + tok + "'");
      return v;
    } catch (const std::logic_error&) {
      Fail("bad number '" + tok + "'");
    }
  }

  // Consumes exactly one whitespace byte separating the header from data.
  std::size_t DataOffset() {
    if (pos_ >= data_.size() || !std::isspace(static_cast<unsigned char>(data_[pos_]))) {
      Fail("missing separator before raster");
    }
    return pos_ + 1;
  }

  [[noreturn]] void Fail(const std::string& what) const {
    Throw(ErrorCode::kParseError, name_ + " at byte " + std::to_string(pos_) + ": " + what);
  }

 private:
  void SkipSpaceAndComments() {
    while (pos_ < data_.size()) {
      if (std::isspace(static_cast<unsigned char>(data_[pos_]))) {
        ++pos_;
      } else if (data_[pos_] == '#') {
        while (pos_ < data_.size() && data_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  const std::vector<char>& data_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace detail

// PFM: "Pf\n<w> <h>\n<scale>\n" then float32 rows, bottom row first.
// A negative scale means little-endian samples.
inline DepthMap ParsePfm(const std::vector<char>& data, const std::string& name = "pfm") {
  detail::HeaderScanner scan(data, name);
  const std::string magic = scan.Token();
  if (magic != "Pf") scan.Fail("expected single-channel 'Pf' magic, got '" + magic + "'");
  const long w = scan.Integer();
  const long h = scan.Integer();
  const double scale = scan.Real();
  if (w <= 0 || h <= 0) scan.Fail("non-positive dimensions");
  if (scale == 0.0 || !std::isfinite(scale)) scan.Fail("invalid scale");
  const std::size_t offset = scan.DataOffset();
  const std::size_t count = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  if (data.size() - offset != count * 4) {
    Throw(ErrorCode::kParseError, name + " at byte " + std::to_string(offset) + ": expected " +
                                      std::to_string(count * 4) + " raster bytes, found " +
                                      std::to_string(data.size() - offset));
  }
  const bool little = scale < 0.0;
  std::vector<float> values(count);
  for (long row = 0; row < h; ++row) {
    const long y = h - 1 - row;
    for (long x = 0; x < w; ++x) {
      values[static_cast<std::size_t>(y * w + x)] =
          detail::LoadF32(data.data() + offset + 4 * static_cast<std::size_t>(row * w + x), little);
    }
  }
  return DepthMap(static_cast<int>(w), static_cast<int>(h), std::move(values));
}

inline std::string EncodePfm(const DepthMap& map) {
  std::string out = "Pf\n" + std::to_string(map.width()) + " " + std::to_string(map.height()) + "\n-1\n";
  out.reserve(out.size() + map.values().size() * 4);
  for (int y = map.height() - 1; y >= 0; --y) {
    for (int x = 0; x < map.width(); ++x) {
      detail::AppendU32Le(out, std::bit_cast<std::uint32_t>(map.at(x, y)));
    }
  }
  return out;
}

// Raw layout: "DPTH", u32 width, u32 height, u32 reserved, float32 LE row-major.
inline DepthMap ParseRawDepth(const std::vector<char>& data, const std::string& name = "depth") {
  if (data.size() < 16 || std::memcmp(data.data(), "DPTH", 4) != 0) {
    Throw(ErrorCode::kParseError, name + " at byte 0: missing DPTH magic");
  }
  const std::uint32_t w = detail::LoadU32Le(data.data() + 4);
  const std::uint32_t h = detail::LoadU32Le(data.data() + 8);
  if (w == 0 || h == 0) Throw(ErrorCode::kParseError, name + " at byte 4: zero dimension");
  const std::size_t count = static_cast<std::size_t>(w) * h;
  if (data.size() != 16 + 4 * count) {
    Throw(ErrorCode::kParseError, name + " at byte 16: expected " + std::to_string(4 * count) +
                                      " raster bytes, found " + std::to_string(data.size() - 16));
  }
  std::vector<float> values(count);
  for (std::size_t i = 0; i < count; ++i) values[i] = detail::LoadF32(data.data() + 16 + 4 * i, true);
  return DepthMap(static_cast<int>(w), static_cast<int>(h), std::move(values));
}

inline std::string EncodeRawDepth(const DepthMap& map) {
  std::string out = "DPTH";
  detail::AppendU32Le(out, static_cast<std::uint32_t>(map.width()));
  detail::AppendU32Le(out, static_cast<std::uint32_t>(map.height()));
  detail::AppendU32Le(out, 0);
  for (float v : map.values()) detail::AppendU32Le(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

// Detects PFM or raw DPTH by magic.
inline DepthMap ReadDepthMap(const std::filesystem::path& path) {
  const std::vector<char> data = detail::ReadAll(path);
  if (data.size() >= 4 && std::memcmp(data.data(), "DPTH", 4) == 0) {
    return ParseRawDepth(data, path.string());
  }
  return ParsePfm(data, path.string());
}

inline void WritePfm(const std::filesystem::path& path, const DepthMap& map) {
  detail::WriteAll(path, EncodePfm(map));
}

inline void WriteRawDepth(const std::filesystem::path& path, const DepthMap& map) {
  detail::WriteAll(path, EncodeRawDepth(map));
}

// PGM, binary (P5) or ASCII (P2), maxval <= 255.
inline Mask ParsePgm(const std::vector<char>& data, const std::string& name = "pgm") {
  detail::HeaderScanner scan(data, name);
  const std::string magic = scan.Token();
  if (magic != "P5" && magic != "P2") scan.Fail("expected P5 or P2 magic");
  const long w = scan.Integer();
  const long h = scan.Integer();
  const long maxval = scan.Integer();
  if (w <= 0 || h <= 0) scan.Fail("non-positive dimensions");
  if (maxval <= 0 || maxval > 255) scan.Fail("only 8-bit PGM masks are supported");
  Mask mask(static_cast<int>(w), static_cast<int>(h));
  if (magic == "P5") {
    const std::size_t offset = scan.DataOffset();
    const std::size_t count = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
    if (data.size() - offset < count) scan.Fail("truncated raster");
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x)
        mask.at(static_cast<int>(x), static_cast<int>(y)) =
            static_cast<std::uint8_t>(data[offset + static_cast<std::size_t>(y * w + x)]);
  } else {
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const long v = scan.Integer();
        if (v < 0 || v > maxval) scan.Fail("sample out of range");
        mask.at(static_cast<int>(x), static_cast<int>(y)) = static_cast<std::uint8_t>(v);
      }
  }
  return mask;
}

inline Mask ReadMask(const std::filesystem::path& path) {
  return ParsePgm(detail::ReadAll(path), path.string());
}

inline void WritePgm(const std::filesystem::path& path, const Mask& mask) {
  std::string out = "P5\n" + std::to_string(mask.width()) + " " + std::to_string(mask.height()) + "\n255\n";
  out.append(reinterpret_cast<const char*>(mask.values().data()), mask.values().size());
  detail::WriteAll(path, out);
}

}  // namespace psfm

#pragma once

// Binary PNM (P5/P6, maxval 255) images and the IVGF checkpoint format.
//
// Checkpoint layout, all integers unsigned 32-bit little-endian:
//   "IVGF" | format_version | entry_count |
//   entry_count x ( name_len | name bytes | ndim | dims... | float32 LE values )

#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>
#include <string>
#include <vector>

#include "ivgf/params.hpp"
#include "ivgf/tensor.hpp"

namespace ivgf {

using Bytes = std::vector<std::uint8_t>;

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t n) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

inline void write_file(const std::filesystem::path& path, const Bytes& b) { write_file(path, b.data(), b.size()); }
inline void write_file(const std::filesystem::path& path, const std::string& s) { write_file(path, s.data(), s.size()); }

// ---------------------------------------------------------------------------
// PNM

namespace detail {

// Header cursor: whitespace and `#` comments separate tokens.
struct PnmCursor {
  const Bytes& b;
  std::size_t p = 2;

  void skip() {
    while (p < b.size()) {
      if (b[p] == '#') {
        while (p < b.size() && b[p] != '\n') ++p;
      } else if (std::isspace(b[p])) {
        ++p;
      } else {
        return;
      }
    }
  }

  std::size_t number(const char* what) {
    skip();
    const std::size_t start = p;
    std::size_t v = 0;
    while (p < b.size() && b[p] >= '0' && b[p] <= '9') {
      v = v * 10 + static_cast<std::size_t>(b[p] - '0');
      if (v > (1u << 24)) throw FormatError(std::string("PNM: ") + what + " too large", start);
      ++p;
    }
    if (p == start) throw FormatError(std::string("PNM: expected ") + what, start);
    return v;
  }
};

}  // namespace detail

/// Decodes binary P5 (gray, replicated to 3 channels) or P6 into [3,H,W] in [0,1].
inline Tensor read_pnm(const Bytes& bytes) {
  if (bytes.size() < 3 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6') ||
      !(std::isspace(bytes[2]) || bytes[2] == '#'))
    throw FormatError("PNM: bad magic (expected P5 or P6)", 0);
  const bool gray = bytes[1] == '5';
  detail::PnmCursor c{bytes};
  const std::size_t W = c.number("width");
  const std::size_t H = c.number("height");
  c.skip();
  const std::size_t maxval_at = c.p;
  const std::size_t maxval = c.number("maxval");
  if (maxval != 255) throw FormatError("PNM: maxval must be 255, got " + std::to_string(maxval), maxval_at);
  if (c.p >= bytes.size() || !std::isspace(bytes[c.p])) throw FormatError("PNM: expected whitespace after maxval", c.p);
  ++c.p;
  if (W == 0 || H == 0) throw FormatError("PNM: zero image dimension", c.p);
  const std::size_t channels = gray ? 1 : 3;
  const std::size_t need = W * H * channels;
  if (bytes.size() - c.p < need)
    throw FormatError("PNM: payload has " + std::to_string(bytes.size() - c.p) + " bytes, expected " +
                          std::to_string(need),
                      bytes.size());
  Tensor out({3, H, W});
  const std::uint8_t* px = bytes.data() + c.p;
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.at(ch, h, w) = static_cast<double>(px[(h * W + w) * channels + (gray ? 0 : ch)]) / 255.0;
  return out;
}

inline Tensor read_pnm(const std::filesystem::path& path) { return read_pnm(read_file(path)); }

/// Rounds half away from zero; values outside [0,1] are rejected.
inline std::uint8_t to_byte(double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error("write_pnm: value " + std::to_string(v) + " outside [0,1]");
  return static_cast<std::uint8_t>(std::round(v * 255.0));
}

/// Encodes [3,H,W] as P6 or [1,H,W] as P5 with the canonical header.
inline Bytes encode_pnm(const Tensor& img) {
  if (img.rank() != 3 || (img.dim(0) != 3 && img.dim(0) != 1))
    throw DimensionError("write_pnm: expected [3,H,W] or [1,H,W], got " + shape_str(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  const std::string header =
      std::string(C == 3 ? "P6" : "P5") + "\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(header.size() + C * H * W);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t ch = 0; ch < C; ++ch) out.push_back(to_byte(img.at(ch, h, w)));
  return out;
}

inline void write_pnm(const Tensor& img, const std::filesystem::path& path) { write_file(path, encode_pnm(img)); }

/// Class-id map [H,W] as P5 with raw ids as gray levels.
inline Bytes encode_label_pgm(const Tensor& ids) {
  if (ids.rank() != 2) throw DimensionError("label map must be [H,W], got " + shape_str(ids.shape()));
  const std::string header = "P5\n" + std::to_string(ids.dim(1)) + " " + std::to_string(ids.dim(0)) + "\n255\n";
  Bytes out(header.begin(), header.end());
  for (double v : ids.data()) {
    if (v < 0 || v > 255) throw std::domain_error("label id out of byte range");
    out.push_back(static_cast<std::uint8_t>(v));
  }
  return out;
}

/// Reads a P5 label map back to raw ids [H,W].
inline Tensor read_label_pgm(const Bytes& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') throw FormatError("label map: expected P5", 0);
  Tensor rgb = read_pnm(bytes);
  Tensor out({rgb.dim(1), rgb.dim(2)});
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::round(rgb[i] * 255.0);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(Bytes& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_f32(Bytes& b, float f) { put_u32(b, std::bit_cast<std::uint32_t>(f)); }

class ByteReader {
 public:
  explicit ByteReader(const Bytes& b) : b_(b) {}
  std::size_t pos() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return b_.size() - pos_; }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(b_.begin() + static_cast<std::ptrdiff_t>(pos_), b_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
  }
  const Bytes& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline Bytes encode_checkpoint(const ParamStore& ps) {
  Bytes b{'I', 'V', 'G', 'F'};
  detail::put_u32(b, kCheckpointVersion);
  detail::put_u32(b, static_cast<std::uint32_t>(ps.size()));
  for (const auto& [name, t] : ps) {
    if (!t.all_finite()) throw NonFiniteError("checkpoint: parameter " + name + " is not finite");
    detail::put_u32(b, static_cast<std::uint32_t>(name.size()));
    b.insert(b.end(), name.begin(), name.end());
    detail::put_u32(b, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put_u32(b, static_cast<std::uint32_t>(d));
    for (double v : t.data()) detail::put_f32(b, static_cast<float>(v));
  }
  return b;
}

/// Parses a whole checkpoint; any defect rejects the stream with no partial result.
inline ParamStore decode_checkpoint(const Bytes& bytes) {
  detail::ByteReader r(bytes);
  if (r.str(4, "magic") != "IVGF") throw FormatError("checkpoint: bad magic", 0);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported format version " + std::to_string(version), 4);
  const std::uint32_t count = r.u32("entry count");
  ParamStore ps;
  std::set<std::string> names;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::size_t at = r.pos();
    const std::uint32_t len = r.u32("name length");
    if (len > r.remaining()) throw FormatError("checkpoint truncated while reading name", r.pos());
    std::string name = r.str(len, "name");
    if (!names.insert(name).second) throw FormatError("checkpoint: duplicate entry " + name, at);
    const std::uint32_t ndim = r.u32("ndim");
    if (ndim == 0 || ndim > 8) throw FormatError("checkpoint: bad rank " + std::to_string(ndim) + " for " + name, at);
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      const std::uint32_t dim = r.u32("dims");
      if (dim == 0) throw FormatError("checkpoint: zero dimension in " + name, r.pos() - 4);
      shape.push_back(dim);
      n *= dim;
      if (n * 4 > r.remaining()) throw FormatError("checkpoint truncated in values of " + name, r.pos());
    }
    std::vector<double> vals(static_cast<std::size_t>(n));
    for (auto& v : vals) v = static_cast<double>(r.f32("values"));
    ps.add(name, Tensor(std::move(shape), std::move(vals)));
  }
  if (r.remaining() != 0)
    throw FormatError("checkpoint: " + std::to_string(r.remaining()) + " trailing bytes after last entry", r.pos());
  return ps;
}

inline void save_checkpoint(const ParamStore& ps, const std::filesystem::path& path) {
  write_file(path, encode_checkpoint(ps));
}

inline ParamStore load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

}  // namespace ivgf

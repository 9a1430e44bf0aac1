#pragma once

// Input-space transform: zero-padding, the binary frame mask and additive
// application of the trainable pattern, plus the pattern checkpoint format.
//
// Checkpoint layout (all integers little-endian):
//
//   offset  size  field
//   0       7     magic "ATTRVR1"
//   7       1     format version (currently 1)
//   8       1     placement (0 = pad, 1 = overlay)
//   9       4     channels
//   13      4     target height
//   17      4     target width
//   21      4     frame
//   25      8     config hash
//   33      8     number of delta values (= channels * height * width)
//   41      8*n   delta, IEEE-754 binary64, channel-major
//
// The mask is not stored; it is rebuilt from the frame on load.

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include "attrvr/core.hpp"

namespace attrvr {

struct ImageSample {
  Tensor pixels;  // (C, H_T, W_T), values nominally in [0, 1]
  std::size_t label = 0;
};

/// How a pattern meets the image: padded around it (AR, AttrVR) or overlaid on a
/// full-size resize of it (VP).
enum class Placement : std::uint8_t { pad = 0, overlay = 1 };

inline std::string_view to_string(Placement p) { return p == Placement::pad ? "pad" : "overlay"; }

struct VRPattern {
  Tensor delta;  // (C, H_S, W_S); zero wherever mask is zero
  Tensor mask;   // binary, 0 on the centered interior
  std::size_t frame = 0;
  Shape3 shape{};

  std::size_t target_height() const noexcept { return shape.height; }
  std::size_t target_width() const noexcept { return shape.width; }
  Shape3 interior() const noexcept {
    return {shape.channels, shape.height - 2 * frame, shape.width - 2 * frame};
  }
  bool in_frame(std::size_t y, std::size_t x) const noexcept {
    return y < frame || x < frame || y >= shape.height - frame || x >= shape.width - frame;
  }
};

/// C * (H*W - (H - 2f)(W - 2f)).
constexpr std::size_t trainable_parameter_count(std::size_t height, std::size_t width,
                                                std::size_t channels, std::size_t frame) {
  return channels * (height * width - (height - 2 * frame) * (width - 2 * frame));
}

inline std::size_t trainable_parameter_count(const VRPattern& p) {
  return trainable_parameter_count(p.shape.height, p.shape.width, p.shape.channels, p.frame);
}

inline Tensor frame_mask(Shape3 shape, std::size_t frame) {
  Tensor mask(shape, 0.0);
  for (std::size_t c = 0; c < shape.channels; ++c) {
    for (std::size_t y = 0; y < shape.height; ++y) {
      for (std::size_t x = 0; x < shape.width; ++x) {
        const bool border =
            y < frame || x < frame || y >= shape.height - frame || x >= shape.width - frame;
        mask.at(c, y, x) = border ? 1.0 : 0.0;
      }
    }
  }
  return mask;
}

inline VRPattern make_pattern(std::pair<std::size_t, std::size_t> target_hw, std::size_t channels,
                              std::size_t frame) {
  const auto [h, w] = target_hw;
  if (channels == 0 || h == 0 || w == 0) {
    throw GeometryError(detail::concat("empty target geometry ", channels, "x", h, "x", w));
  }
  if (2 * frame >= std::min(h, w)) {
    throw GeometryError(detail::concat("frame ", frame, " leaves no interior in a ", h, "x", w,
                                       " target (need 2*frame < min(H, W))"));
  }
  VRPattern p;
  p.shape = {channels, h, w};
  p.frame = frame;
  p.delta = Tensor(p.shape, 0.0);
  p.mask = frame_mask(p.shape, frame);
  return p;
}

/// Bilinear resize with half-pixel centers (align_corners = false), no antialiasing.
inline Tensor resize_bilinear(const Tensor& src, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || src.size() == 0) {
    throw GeometryError("resize to or from an empty image");
  }
  Tensor out({src.channels(), out_h, out_w});
  const double sy = static_cast<double>(src.height()) / static_cast<double>(out_h);
  const double sx = static_cast<double>(src.width()) / static_cast<double>(out_w);
  const double max_y = static_cast<double>(src.height() - 1);
  const double max_x = static_cast<double>(src.width() - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - static_cast<double>(x0);
      for (std::size_t c = 0; c < src.channels(); ++c) {
        const double top = src.at(c, y0, x0) * (1.0 - wx) + src.at(c, y0, x1) * wx;
        const double bot = src.at(c, y1, x0) * (1.0 - wx) + src.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1.0 - wy) + bot * wy;
      }
    }
  }
  return out;
}

/// Zero-pads an interior-sized image into the pattern's target geometry.
inline Tensor pad(const Tensor& x, const VRPattern& p) {
  const Shape3 inner = p.interior();
  if (x.shape() != inner) {
    throw GeometryError(detail::concat("image is ", to_string(x.shape()), ", pattern interior is ",
                                       to_string(inner)));
  }
  Tensor out(p.shape, 0.0);
  for (std::size_t c = 0; c < inner.channels; ++c) {
    for (std::size_t y = 0; y < inner.height; ++y) {
      for (std::size_t xx = 0; xx < inner.width; ++xx) {
        out.at(c, y + p.frame, xx + p.frame) = x.at(c, y, xx);
      }
    }
  }
  return out;
}

namespace detail {

inline void add_masked_delta(Tensor& out, const VRPattern& p, bool clamp) {
  auto o = out.values();
  const auto d = p.delta.values();
  const auto m = p.mask.values();
  for (std::size_t i = 0; i < o.size(); ++i) {
    o[i] += d[i] * m[i];
    if (clamp) o[i] = std::clamp(o[i], 0.0, 1.0);
  }
}

}  // namespace detail

/// Pad(x) + delta * M. With `resize_interior` the image is first resized to the
/// interior; otherwise it must already have the interior shape. `clamp` clips
/// the result to [0, 1] (off by default).
inline Tensor pad_and_apply(const Tensor& x, const VRPattern& p, bool resize_interior,
                            bool clamp = false) {
  if (x.channels() != p.shape.channels) {
    throw GeometryError(detail::concat("image has ", x.channels(), " channels, pattern has ",
                                       p.shape.channels));
  }
  Tensor out = resize_interior
                   ? pad(resize_bilinear(x, p.interior().height, p.interior().width), p)
                   : pad(x, p);
  detail::add_masked_delta(out, p, clamp);
  return out;
}

/// resize(x) + delta * M, the image stretched to the full target.
inline Tensor overlay_apply(const Tensor& x, const VRPattern& p, bool clamp = false) {
  if (x.channels() != p.shape.channels) {
    throw GeometryError(detail::concat("image has ", x.channels(), " channels, pattern has ",
                                       p.shape.channels));
  }
  Tensor out = resize_bilinear(x, p.shape.height, p.shape.width);
  detail::add_masked_delta(out, p, clamp);
  return out;
}

inline Tensor apply_pattern(const Tensor& x, const VRPattern& p, Placement placement,
                            bool resize_interior, bool clamp = false) {
  return placement == Placement::pad ? pad_and_apply(x, p, resize_interior, clamp)
                                     : overlay_apply(x, p, clamp);
}

// ---------------------------------------------------------------------------
// Checkpoint
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 7> kCheckpointMagic{'A', 'T', 'T', 'R', 'V', 'R', '1'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct PatternCheckpoint {
  VRPattern pattern;
  Placement placement = Placement::pad;
  std::uint64_t config_hash = 0;
};

namespace detail {

template <typename T>
void put_le(std::string& buf, T value) {
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf.push_back(static_cast<char>(u & 0xFF));
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw ParseError("", "checkpoint truncated");
  std::make_unsigned_t<T> u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<std::make_unsigned_t<T>>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return static_cast<T>(u);
}

}  // namespace detail

inline std::string serialize_checkpoint(const PatternCheckpoint& ck) {
  const VRPattern& p = ck.pattern;
  std::string buf(kCheckpointMagic.begin(), kCheckpointMagic.end());
  buf.push_back(static_cast<char>(kCheckpointVersion));
  buf.push_back(static_cast<char>(ck.placement));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.shape.channels));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.shape.height));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.shape.width));
  detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(p.frame));
  detail::put_le<std::uint64_t>(buf, ck.config_hash);
  detail::put_le<std::uint64_t>(buf, static_cast<std::uint64_t>(p.delta.size()));
  for (double v : p.delta.values()) {
    detail::put_le<std::uint64_t>(buf, std::bit_cast<std::uint64_t>(v));
  }
  return buf;
}

inline PatternCheckpoint deserialize_checkpoint(const std::string& buf) {
  if (buf.size() < 8 || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), buf.begin())) {
    throw ParseError("", "not an ATTRVR1 pattern checkpoint");
  }
  std::size_t pos = 7;
  const auto version = static_cast<std::uint8_t>(buf[pos++]);
  if (version != kCheckpointVersion) {
    throw ParseError("", detail::concat("unsupported checkpoint version ", int{version}));
  }
  const auto placement = static_cast<std::uint8_t>(buf.at(pos++));
  if (placement > 1) throw ParseError("", "invalid placement byte");
  const auto channels = detail::get_le<std::uint32_t>(buf, pos);
  const auto height = detail::get_le<std::uint32_t>(buf, pos);
  const auto width = detail::get_le<std::uint32_t>(buf, pos);
  const auto frame = detail::get_le<std::uint32_t>(buf, pos);
  PatternCheckpoint ck;
  ck.placement = static_cast<Placement>(placement);
  ck.config_hash = detail::get_le<std::uint64_t>(buf, pos);
  const auto count = detail::get_le<std::uint64_t>(buf, pos);
  ck.pattern = make_pattern({height, width}, channels, frame);
  if (count != ck.pattern.delta.size()) {
    throw ParseError("", detail::concat("checkpoint holds ", count, " values, geometry needs ",
                                        ck.pattern.delta.size()));
  }
  auto d = ck.pattern.delta.values();
  for (std::size_t i = 0; i < count; ++i) {
    d[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(buf, pos));
  }
  if (pos != buf.size()) throw ParseError("", "trailing bytes after checkpoint payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const PatternCheckpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string buf = serialize_checkpoint(ck);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

inline PatternCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(buf);
}

}  // namespace attrvr

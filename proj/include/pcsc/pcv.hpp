#pragma once

// Point cloud videos (T frames x N points x 3 coordinates, meters) and the
// PCV1 file format:
//
//   "PCV1" | u32 T | u32 N | u8 flags (bit0 video label, bit1 point labels)
//   [u32 video label] | T*N*3 f32 coordinates | [T*N u16 point labels]
//
// all little-endian.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pcsc/binary_io.hpp"
#include "pcsc/errors.hpp"

namespace pcsc {

struct PointCloudVideo {
  std::size_t frames = 0;
  std::size_t points = 0;
  std::vector<float> coords;  // frames * points * 3, frame-major
  std::optional<std::uint32_t> video_label;
  std::optional<std::vector<std::uint16_t>> point_labels;  // frames * points

  std::span<const float> frame(std::size_t t) const {
    return std::span<const float>(coords).subspan(t * points * 3, points * 3);
  }
  std::span<float> frame(std::size_t t) { return std::span<float>(coords).subspan(t * points * 3, points * 3); }

  void validate() const {
    if (coords.size() != frames * points * 3) throw DimensionError("video coordinate count does not match T*N*3");
    if (point_labels && point_labels->size() != frames * points) throw DimensionError("point label count does not match T*N");
    for (float v : coords) {
      if (!std::isfinite(v)) throw NumericError("video has non-finite coordinates");
    }
  }

  friend bool operator==(const PointCloudVideo&, const PointCloudVideo&) = default;
};

struct Segment {
  std::size_t index = 0;  // position in [0, L)
  std::size_t frames = 0;
  std::size_t points = 0;
  std::vector<float> coords;  // frames * points * 3

  std::span<const float> frame(std::size_t t) const {
    return std::span<const float>(coords).subspan(t * points * 3, points * 3);
  }
};

// Splits a video into L equal contiguous segments, in order.
inline std::vector<Segment> split_segments(const PointCloudVideo& video, std::size_t count) {
  if (count == 0 || video.frames % count != 0) {
    throw ConfigError("cannot split " + std::to_string(video.frames) + " frames into " + std::to_string(count) +
                          " equal segments",
                      "data.segments");
  }
  const std::size_t len = video.frames / count;
  const std::size_t stride = len * video.points * 3;
  std::vector<Segment> out;
  out.reserve(count);
  for (std::size_t s = 0; s < count; ++s) {
    Segment seg{s, len, video.points, {}};
    seg.coords.assign(video.coords.begin() + static_cast<std::ptrdiff_t>(s * stride),
                      video.coords.begin() + static_cast<std::ptrdiff_t>((s + 1) * stride));
    out.push_back(std::move(seg));
  }
  return out;
}

inline std::vector<unsigned char> encode_pcv(const PointCloudVideo& video) {
  video.validate();
  io::ByteWriter w;
  w.put_bytes("PCV1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(video.frames));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(video.points));
  std::uint8_t flags = 0;
  if (video.video_label) flags |= 1u;
  if (video.point_labels) flags |= 2u;
  w.put<std::uint8_t>(flags);
  if (video.video_label) w.put<std::uint32_t>(*video.video_label);
  for (float v : video.coords) w.put<float>(v);
  if (video.point_labels) {
    for (std::uint16_t l : *video.point_labels) w.put<std::uint16_t>(l);
  }
  return w.bytes();
}

inline PointCloudVideo decode_pcv(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.get_bytes(4, "magic") != "PCV1") throw FormatError("bad PCV magic", 0);
  PointCloudVideo v;
  v.frames = r.get<std::uint32_t>("frame count");
  v.points = r.get<std::uint32_t>("point count");
  const std::size_t flags_at = r.offset();
  const auto flags = r.get<std::uint8_t>("flags");
  if (flags & ~3u) throw FormatError("unknown PCV flag bits", flags_at);
  if (flags & 1u) v.video_label = r.get<std::uint32_t>("video label");
  const std::size_t n = v.frames * v.points;
  if (n * 3 > r.remaining() / 4) throw FormatError("truncated PCV coordinates", r.offset());
  v.coords.resize(n * 3);
  for (float& c : v.coords) {
    const std::size_t at = r.offset();
    c = r.get<float>("coordinate");
    if (!std::isfinite(c)) throw FormatError("non-finite coordinate", at);
  }
  if (flags & 2u) {
    std::vector<std::uint16_t> labels(n);
    for (auto& l : labels) l = r.get<std::uint16_t>("point label");
    v.point_labels = std::move(labels);
  }
  if (r.remaining() != 0) throw FormatError("trailing bytes after PCV payload", r.offset());
  return v;
}

inline void write_pcv(const PointCloudVideo& video, const std::string& path) { io::write_file(path, encode_pcv(video)); }

inline PointCloudVideo read_pcv(const std::string& path) { return decode_pcv(io::read_file(path)); }

}  // namespace pcsc

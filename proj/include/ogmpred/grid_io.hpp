#pragma once

// OGMS sequence files and PGM/PPM image export.
//
// OGMS layout (all little-endian):
//   "OGMS" | u16 version=1 | u32 T | u32 Y | u32 X | f32 cell_size | u8 flags
//   T*Y*X f32 frame values | T*Y*X u8 visibility | [T*Y*X u8 object masks]
//   T * (f64 x, f64 y, f64 heading)
// flags bit0: object masks present; bit1: sequence is aligned.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ogmpred/errors.hpp"
#include "ogmpred/grid.hpp"

namespace ogmpred::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline constexpr std::uint16_t kOgmsVersion = 1;
inline constexpr std::uint8_t kFlagObjectMasks = 0x1;
inline constexpr std::uint8_t kFlagAligned = 0x2;

namespace detail {

template <class V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V get(std::istream& is, const char* what) {
  V v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) throw DataError(std::string("truncated stream reading ") + what);
  return v;
}

template <class V>
void get_array(std::istream& is, V* dst, std::size_t n, const char* what) {
  if (!is.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n * sizeof(V))))
    throw DataError(std::string("truncated stream reading ") + what);
}

inline std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  return os;
}

inline std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open for reading: " + path.string());
  return is;
}

}  // namespace detail

inline void write_ogms(std::ostream& os, const OgmSequence& seq) {
  seq.validate();
  using detail::put;
  os.write("OGMS", 4);
  put<std::uint16_t>(os, kOgmsVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.length()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.height()));
  put<std::uint32_t>(os, static_cast<std::uint32_t>(seq.width()));
  put<float>(os, static_cast<float>(seq.cell_size()));
  std::uint8_t flags = 0;
  if (seq.object_masks) flags |= kFlagObjectMasks;
  if (seq.aligned) flags |= kFlagAligned;
  put<std::uint8_t>(os, flags);
  for (const auto& f : seq.frames)
    os.write(reinterpret_cast<const char*>(f.values().data()), static_cast<std::streamsize>(f.size() * sizeof(float)));
  for (const auto& m : seq.visibility)
    os.write(reinterpret_cast<const char*>(m.bits().data()), static_cast<std::streamsize>(m.size()));
  if (seq.object_masks)
    for (const auto& m : *seq.object_masks)
      os.write(reinterpret_cast<const char*>(m.bits().data()), static_cast<std::streamsize>(m.size()));
  for (const auto& p : seq.poses) {
    put<double>(os, p.x);
    put<double>(os, p.y);
    put<double>(os, p.heading);
  }
  if (!os) throw DataError("write_ogms: stream failure");
}

/// The format carries no init-phase length; the caller supplies it. A value
/// >= T is clamped to T-1.
inline OgmSequence read_ogms(std::istream& is, int tau_init) {
  using detail::get;
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "OGMS", 4) != 0) throw DataError("read_ogms: bad magic");
  const auto version = get<std::uint16_t>(is, "version");
  if (version != kOgmsVersion) throw DataError("read_ogms: unsupported version " + std::to_string(version));
  const auto t = get<std::uint32_t>(is, "T");
  const auto y = get<std::uint32_t>(is, "Y");
  const auto x = get<std::uint32_t>(is, "X");
  const auto cs = get<float>(is, "cell_size");
  const auto flags = get<std::uint8_t>(is, "flags");
  if (t < 2 || y < 1 || x < 1 || y > 65536 || x > 65536 || t > 1000000) throw DataError("read_ogms: implausible header");
  const std::size_t n = static_cast<std::size_t>(y) * x;
  OgmSequence seq;
  seq.aligned = (flags & kFlagAligned) != 0;
  for (std::uint32_t k = 0; k < t; ++k) {
    std::vector<float> v(n);
    detail::get_array(is, v.data(), n, "frame values");
    seq.frames.emplace_back(static_cast<int>(y), static_cast<int>(x), static_cast<double>(cs), std::move(v));
  }
  auto read_masks = [&](std::vector<BinaryMask>& out, const char* what) {
    for (std::uint32_t k = 0; k < t; ++k) {
      BinaryMask m(static_cast<int>(y), static_cast<int>(x));
      detail::get_array(is, m.bits().data(), n, what);
      out.push_back(std::move(m));
    }
  };
  read_masks(seq.visibility, "visibility");
  if (flags & kFlagObjectMasks) {
    seq.object_masks.emplace();
    read_masks(*seq.object_masks, "object masks");
  }
  for (std::uint32_t k = 0; k < t; ++k) {
    const double px = get<double>(is, "pose");
    const double py = get<double>(is, "pose");
    const double ph = get<double>(is, "pose");
    seq.poses.push_back({px, py, ph});
  }
  seq.tau_init = std::min(tau_init, static_cast<int>(t) - 1);
  seq.validate();
  return seq;
}

inline void save_ogms(const std::filesystem::path& path, const OgmSequence& seq) {
  auto os = detail::open_out(path);
  write_ogms(os, seq);
}

inline OgmSequence load_ogms(const std::filesystem::path& path, int tau_init) {
  auto is = detail::open_in(path);
  try {
    return read_ogms(is, tau_init);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Binary PGM (P5, maxval 255); pixel = round(255 * value), clamped.
inline void write_pgm(std::ostream& os, int height, int width, std::span<const float> values) {
  os << "P5\n" << width << ' ' << height << "\n255\n";
  for (float v : values) {
    const double p = std::round(255.0 * std::clamp(static_cast<double>(v), 0.0, 1.0));
    os.put(static_cast<char>(static_cast<std::uint8_t>(p)));
  }
}

inline void save_pgm(const std::filesystem::path& path, const OgmFrame& frame) {
  auto os = detail::open_out(path);
  write_pgm(os, frame.height(), frame.width(), frame.values());
}

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

/// Binary PPM (P6).
inline void save_ppm(const std::filesystem::path& path, int height, int width, const std::vector<Rgb>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(height) * width) throw ShapeError("save_ppm: pixel count mismatch");
  auto os = detail::open_out(path);
  os << "P6\n" << width << ' ' << height << "\n255\n";
  for (const auto& p : pixels) {
    os.put(static_cast<char>(p.r));
    os.put(static_cast<char>(p.g));
    os.put(static_cast<char>(p.b));
  }
}

/// Reads a P5 PGM back into [0,1] values (used by tests and tools).
inline OgmFrame read_pgm(std::istream& is, double cell_size) {
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  if (magic != "P5" || w < 1 || h < 1 || maxval != 255) throw DataError("read_pgm: unsupported header");
  is.get();
  OgmFrame f(h, w, cell_size);
  for (auto& v : f.values()) {
    const int c = is.get();
    if (c == EOF) throw DataError("read_pgm: truncated");
    v = static_cast<float>(c) / 255.0f;
  }
  return f;
}

}  // namespace ogmpred::io

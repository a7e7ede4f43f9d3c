#pragma once

// Motion features between consecutive frames: the signed two-channel
// difference and a dense Farneback optical flow.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "ogmpred/errors.hpp"
#include "ogmpred/grid.hpp"
#include "ogmpred/tensor.hpp"

namespace ogmpred {

enum class MotionFeatureKind { two_channel_diff, farneback_flow };

/// Two H x W channels. two_channel_diff: (positive part, negative part) of
/// curr - prev. farneback_flow: (dx, dy) in cells per frame, dx along columns
/// and dy along rows, such that curr(p + d) ~ prev(p).
struct MotionFeatures {
  MotionFeatureKind kind = MotionFeatureKind::two_channel_diff;
  int height = 0;
  int width = 0;
  std::vector<float> channel0;
  std::vector<float> channel1;

  [[nodiscard]] float c0(int r, int c) const { return channel0[static_cast<std::size_t>(r) * width + c]; }
  [[nodiscard]] float c1(int r, int c) const { return channel1[static_cast<std::size_t>(r) * width + c]; }

  /// (1, 2, H, W) tensor for the feature encoder.
  template <class T>
  [[nodiscard]] nn::Tensor<T> tensor() const {
    nn::Tensor<T> t({1, 2, height, width});
    const std::size_t n = channel0.size();
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = static_cast<T>(channel0[i]);
      t[n + i] = static_cast<T>(channel1[i]);
    }
    return t;
  }
};

inline MotionFeatures two_channel_diff(const OgmFrame& prev, const OgmFrame& curr) {
  if (prev.height() != curr.height() || prev.width() != curr.width())
    throw ShapeError("two_channel_diff: frame shapes differ");
  MotionFeatures mf{MotionFeatureKind::two_channel_diff, curr.height(), curr.width(), {}, {}};
  mf.channel0.resize(curr.size());
  mf.channel1.resize(curr.size());
  auto p = prev.values();
  auto c = curr.values();
  for (std::size_t i = 0; i < c.size(); ++i) {
    const float d = c[i] - p[i];
    mf.channel0[i] = d > 0.0f ? d : 0.0f;
    mf.channel1[i] = d < 0.0f ? -d : 0.0f;
  }
  return mf;
}

/// Differentiable form on (N,1,H,W) tensors, output (N,2,H,W).
template <class T>
nn::Var<T> two_channel_diff(const nn::Var<T>& prev, const nn::Var<T>& curr) {
  auto d = nn::sub(curr, prev);
  return nn::concat_channels<T>({nn::relu(d), nn::relu(nn::neg(d))});
}

struct FarnebackParams {
  int pyramid_levels = 3;
  int window = 9;
  int poly_n = 5;
  double poly_sigma = 1.1;
  int iterations = 3;
  /// Gaussian pre-smoothing of the inputs, in cells; 0 disables it.
  double presmooth_sigma = 1.0;

  void validate() const {
    if (pyramid_levels < 1 || iterations < 1) throw ConfigError("farneback: levels and iterations must be >= 1");
    if (window < 3 || window % 2 == 0) throw ConfigError("farneback: window must be odd and >= 3");
    if (poly_n < 3 || poly_n % 2 == 0) throw ConfigError("farneback: poly_n must be odd and >= 3");
    if (!(poly_sigma > 0.0) || presmooth_sigma < 0.0) throw ConfigError("farneback: bad sigma");
  }
};

namespace detail {

struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int h_, int w_) : h(h_), w(w_), v(static_cast<std::size_t>(h_) * w_, 0.0) {}
  double& operator()(int r, int c) { return v[static_cast<std::size_t>(r) * w + c]; }
  double operator()(int r, int c) const { return v[static_cast<std::size_t>(r) * w + c]; }
  /// Replicated border.
  [[nodiscard]] double at(int r, int c) const { return (*this)(std::clamp(r, 0, h - 1), std::clamp(c, 0, w - 1)); }

  /// Bilinear sample at continuous (row, col), cell centers at integers.
  [[nodiscard]] double sample(double r, double c) const {
    const double r0f = std::floor(r), c0f = std::floor(c);
    const int r0 = static_cast<int>(r0f), c0 = static_cast<int>(c0f);
    const double fr = r - r0f, fc = c - c0f;
    return (1 - fr) * ((1 - fc) * at(r0, c0) + fc * at(r0, c0 + 1)) + fr * ((1 - fc) * at(r0 + 1, c0) + fc * at(r0 + 1, c0 + 1));
  }
};

inline std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double s = 0.0;
  for (int i = -radius; i <= radius; ++i) s += k[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= s;
  return k;
}

// Separable filtering with replicated borders; the kernel is symmetric, so
// the sum is accumulated from the outside in for mirror-exact results.
inline Plane separable_blur(const Plane& in, const std::vector<double>& k) {
  const int rad = static_cast<int>(k.size() / 2);
  auto tap = [&](auto&& get) {
    double s = k[static_cast<std::size_t>(rad)] * get(0);
    for (int i = rad; i >= 1; --i) s += k[static_cast<std::size_t>(rad + i)] * (get(-i) + get(i));
    return s;
  };
  Plane tmp(in.h, in.w), out(in.h, in.w);
  for (int r = 0; r < in.h; ++r)
    for (int c = 0; c < in.w; ++c) tmp(r, c) = tap([&](int d) { return in.at(r, c + d); });
  for (int r = 0; r < in.h; ++r)
    for (int c = 0; c < in.w; ++c) out(r, c) = tap([&](int d) { return tmp.at(r + d, c); });
  return out;
}

inline Plane gaussian_blur(const Plane& in, double sigma) {
  if (sigma <= 0.0) return in;
  const int rad = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  return separable_blur(in, gaussian_kernel(sigma, rad));
}

// 2x2 block average; a trailing odd row/column is dropped.
inline Plane downsample(const Plane& in) {
  Plane out(in.h / 2, in.w / 2);
  for (int r = 0; r < out.h; ++r)
    for (int c = 0; c < out.w; ++c)
      out(r, c) = 0.25 * ((in(2 * r, 2 * c) + in(2 * r + 1, 2 * c + 1)) + (in(2 * r, 2 * c + 1) + in(2 * r + 1, 2 * c)));
  return out;
}

// Center-aligned bilinear upsampling to (h, w), values multiplied by `scale`.
inline Plane upsample(const Plane& in, int h, int w, double scale) {
  Plane out(h, w);
  const double sy = static_cast<double>(in.h) / h, sx = static_cast<double>(in.w) / w;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) out(r, c) = scale * in.sample((r + 0.5) * sy - 0.5, (c + 0.5) * sx - 0.5);
  return out;
}

// Quadratic fit f(y, x) ~ c + bx x + by y + axx x^2 + ayy y^2 + axy x y over
// a Gaussian-weighted (2n+1)^2 neighbourhood, per pixel.
struct PolyExpansion {
  Plane bx, by, axx, ayy, axy;
};

inline PolyExpansion poly_expand(const Plane& img, int poly_n, double sigma) {
  const int n = poly_n / 2;
  // Dual basis: rows of (B^T W B)^{-1} B^T W for the 6-term basis.
  std::vector<std::array<double, 6>> basis;
  std::vector<double> wts;
  for (int y = -n; y <= n; ++y)
    for (int x = -n; x <= n; ++x) {
      basis.push_back({1.0, double(x), double(y), double(x * x), double(y * y), double(x * y)});
      wts.push_back(std::exp(-0.5 * (x * x + y * y) / (sigma * sigma)));
    }
  const std::size_t m = basis.size();
  double g[6][12] = {};
  for (std::size_t j = 0; j < m; ++j)
    for (int a = 0; a < 6; ++a)
      for (int b = 0; b < 6; ++b) g[a][b] += wts[j] * basis[j][a] * basis[j][b];
  for (int a = 0; a < 6; ++a) g[a][6 + a] = 1.0;
  for (int col = 0; col < 6; ++col) {  // Gauss-Jordan with partial pivoting
    int piv = col;
    for (int r = col + 1; r < 6; ++r)
      if (std::abs(g[r][col]) > std::abs(g[piv][col])) piv = r;
    for (int c = 0; c < 12; ++c) std::swap(g[col][c], g[piv][c]);
    const double d = g[col][col];
    for (int c = 0; c < 12; ++c) g[col][c] /= d;
    for (int r = 0; r < 6; ++r) {
      if (r == col) continue;
      const double f = g[r][col];
      for (int c = 0; c < 12; ++c) g[r][c] -= f * g[col][c];
    }
  }
  std::vector<std::array<double, 6>> dual(m);
  for (std::size_t j = 0; j < m; ++j)
    for (int a = 0; a < 6; ++a) {
      double s = 0.0;
      for (int b = 0; b < 6; ++b) s += g[a][6 + b] * basis[j][b];
      dual[j][static_cast<std::size_t>(a)] = s * wts[j];
    }

  PolyExpansion pe{Plane(img.h, img.w), Plane(img.h, img.w), Plane(img.h, img.w), Plane(img.h, img.w), Plane(img.h, img.w)};
  for (int r = 0; r < img.h; ++r)
    for (int c = 0; c < img.w; ++c) {
      double acc[6] = {};
      std::size_t j = 0;
      for (int y = -n; y <= n; ++y)
        for (int x = -n; x <= n; ++x, ++j) {
          const double v = img.at(r + y, c + x);
          for (int a = 1; a < 6; ++a) acc[a] += dual[j][static_cast<std::size_t>(a)] * v;
        }
      pe.bx(r, c) = acc[1];
      pe.by(r, c) = acc[2];
      pe.axx(r, c) = acc[3];
      pe.ayy(r, c) = acc[4];
      pe.axy(r, c) = 0.5 * acc[5];
    }
  return pe;
}

// One displacement update at a pyramid level. flow_x / flow_y hold the prior
// displacement and receive the new estimate.
inline void update_flow(const PolyExpansion& p1, const PolyExpansion& p2, Plane& flow_x, Plane& flow_y,
                        const std::vector<double>& window) {
  const int h = flow_x.h, w = flow_x.w;
  // Per-pixel products A^T A (3 terms) and A^T db (2 terms).
  Plane g11(h, w), g12(h, w), g22(h, w), h1(h, w), h2(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double dx = flow_x(r, c), dy = flow_y(r, c);
      const double sr = r + dy, sc = c + dx;
      const double a11 = 0.5 * (p1.axx(r, c) + p2.axx.sample(sr, sc));
      const double a22 = 0.5 * (p1.ayy(r, c) + p2.ayy.sample(sr, sc));
      const double a12 = 0.5 * (p1.axy(r, c) + p2.axy.sample(sr, sc));
      const double bx = -0.5 * (p2.bx.sample(sr, sc) - p1.bx(r, c)) + a11 * dx + a12 * dy;
      const double by = -0.5 * (p2.by.sample(sr, sc) - p1.by(r, c)) + a12 * dx + a22 * dy;
      g11(r, c) = a11 * a11 + a12 * a12;
      g12(r, c) = a12 * (a11 + a22);
      g22(r, c) = a12 * a12 + a22 * a22;
      h1(r, c) = a11 * bx + a12 * by;
      h2(r, c) = a12 * bx + a22 * by;
    }
  g11 = separable_blur(g11, window);
  g12 = separable_blur(g12, window);
  g22 = separable_blur(g22, window);
  h1 = separable_blur(h1, window);
  h2 = separable_blur(h2, window);
  constexpr double lambda = 1e-9;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const double a = g11(r, c) + lambda, b = g12(r, c), d = g22(r, c) + lambda;
      const double det = a * d - b * b;
      if (!(det > 0.0)) {
        flow_x(r, c) = flow_y(r, c) = 0.0;
        continue;
      }
      flow_x(r, c) = (d * h1(r, c) - b * h2(r, c)) / det;
      flow_y(r, c) = (a * h2(r, c) - b * h1(r, c)) / det;
    }
}

}  // namespace detail

/// Dense flow on raw row-major H x W arrays; returns (dx, dy) planes.
inline std::pair<std::vector<double>, std::vector<double>> farneback_flow(const std::vector<double>& prev,
                                                                          const std::vector<double>& curr, int height,
                                                                          int width, const FarnebackParams& params) {
  params.validate();
  if (prev.size() != curr.size() || prev.size() != static_cast<std::size_t>(height) * width)
    throw ShapeError("farneback_flow: input sizes differ");
  if (height < params.window || width < params.window)
    throw ContractError("farneback_flow: grid smaller than the averaging window");
  // A constant frame has no structure to track.
  auto constant = [](const std::vector<double>& v) { return std::ranges::all_of(v, [&](double x) { return x == v[0]; }); };
  if (constant(prev) || constant(curr)) return {std::vector<double>(prev.size()), std::vector<double>(prev.size())};

  detail::Plane a(height, width), b(height, width);
  a.v = prev;
  b.v = curr;
  a = detail::gaussian_blur(a, params.presmooth_sigma);
  b = detail::gaussian_blur(b, params.presmooth_sigma);

  std::vector<detail::Plane> pa{a}, pb{b};
  while (static_cast<int>(pa.size()) < params.pyramid_levels) {
    const auto& last = pa.back();
    if (last.h / 2 < params.window || last.w / 2 < params.window) break;
    pa.push_back(detail::downsample(last));
    pb.push_back(detail::downsample(pb.back()));
  }

  const int m = params.window / 2;
  const auto window = detail::gaussian_kernel(0.3 * m, m);
  detail::Plane fx, fy;
  for (int level = static_cast<int>(pa.size()) - 1; level >= 0; --level) {
    const auto& l1 = pa[static_cast<std::size_t>(level)];
    const auto& l2 = pb[static_cast<std::size_t>(level)];
    if (fx.v.empty()) {
      fx = detail::Plane(l1.h, l1.w);
      fy = detail::Plane(l1.h, l1.w);
    } else {
      fx = detail::upsample(fx, l1.h, l1.w, 2.0);
      fy = detail::upsample(fy, l1.h, l1.w, 2.0);
    }
    const auto p1 = detail::poly_expand(l1, params.poly_n, params.poly_sigma);
    const auto p2 = detail::poly_expand(l2, params.poly_n, params.poly_sigma);
    for (int it = 0; it < params.iterations; ++it) detail::update_flow(p1, p2, fx, fy, window);
  }
  return {std::move(fx.v), std::move(fy.v)};
}

inline MotionFeatures farneback_flow(const OgmFrame& prev, const OgmFrame& curr, const FarnebackParams& params = {}) {
  if (prev.height() != curr.height() || prev.width() != curr.width()) throw ShapeError("farneback_flow: frame shapes differ");
  std::vector<double> a(prev.values().begin(), prev.values().end());
  std::vector<double> b(curr.values().begin(), curr.values().end());
  auto [dx, dy] = farneback_flow(a, b, curr.height(), curr.width(), params);
  MotionFeatures mf{MotionFeatureKind::farneback_flow, curr.height(), curr.width(), {}, {}};
  mf.channel0.assign(dx.begin(), dx.end());
  mf.channel1.assign(dy.begin(), dy.end());
  return mf;
}

}  // namespace ogmpred

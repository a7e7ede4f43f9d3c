#pragma once

// Training cost: visibility-masked class-balanced cross-entropy, an L2 term on
// the compensation matrix and a multi-scale SSIM term on the classifier input.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "ogmpred/errors.hpp"
#include "ogmpred/grid.hpp"
#include "ogmpred/model.hpp"
#include "ogmpred/tensor.hpp"

namespace ogmpred {

struct LossConfig {
  double lambda_ce = 1.0;
  double lambda_l2 = 0.1;
  double lambda_ssim = 0.1;
  double eps = 1e-7;
  int ssim_scales = 3;

  void validate() const {
    if (lambda_ce < 0.0 || lambda_l2 < 0.0 || lambda_ssim < 0.0) throw ConfigError("loss weights must be >= 0");
    if (!(eps > 0.0 && eps < 0.5)) throw ConfigError("loss eps must lie in (0, 0.5)");
    if (ssim_scales < 1 || ssim_scales > 5) throw ConfigError("ssim_scales must lie in [1, 5]");
  }
};

/// Mean cross-entropy over visible occupied cells and over visible free cells,
/// averaged; a class with no visible cells contributes 0. `pred` is (1,1,H,W)
/// or any tensor with H*W elements in row-major order.
template <class T>
nn::Var<T> balanced_masked_ce(const nn::Var<T>& pred, const OgmFrame& target, const VisibilityMask& vis, double eps) {
  if (pred->value.size() != target.size() || vis.size() != target.size())
    throw ShapeError("balanced_masked_ce: prediction, target and visibility sizes differ");
  const auto tv = target.values();
  const auto vb = vis.bits();
  std::size_t n_occ = 0, n_free = 0;
  for (std::size_t i = 0; i < tv.size(); ++i) {
    if (!vb[i]) continue;
    if (tv[i] >= 0.5f) ++n_occ;
    else ++n_free;
  }
  const T lo = static_cast<T>(eps), hi = static_cast<T>(1.0 - eps);
  const T w_occ = n_occ ? T(0.5) / static_cast<T>(n_occ) : T(0);
  const T w_free = n_free ? T(0.5) / static_cast<T>(n_free) : T(0);
  T occ = T(0), fr = T(0);
  for (std::size_t i = 0; i < tv.size(); ++i) {
    if (!vb[i]) continue;
    const T p = std::clamp(pred->value[i], lo, hi);
    if (tv[i] >= 0.5f) occ -= std::log(p);
    else fr -= std::log(T(1) - p);
  }
  const T loss = w_occ * occ + w_free * fr;
  std::vector<float> targets(tv.begin(), tv.end());
  std::vector<std::uint8_t> mask(vb.begin(), vb.end());
  return nn::detail::make_op<T>(nn::Tensor<T>({1}, loss), {pred},
      [pred, targets = std::move(targets), mask = std::move(mask), lo, hi, w_occ, w_free](nn::Node<T>& self) {
        auto& g = pred->ensure_grad();
        const T go = self.grad[0];
        for (std::size_t i = 0; i < targets.size(); ++i) {
          if (!mask[i]) continue;
          const T p = pred->value[i];
          if (!(p > lo && p < hi)) continue;
          if (targets[i] >= 0.5f) g[i] -= go * w_occ / p;
          else g[i] += go * w_free / (T(1) - p);
        }
      },
      "balanced_masked_ce");
}

inline double balanced_masked_ce(const OgmFrame& pred, const OgmFrame& target, const VisibilityMask& vis, double eps) {
  nn::NoGradGuard guard;
  nn::Tensor<double> t({1, 1, pred.height(), pred.width()});
  for (std::size_t i = 0; i < pred.size(); ++i) t[i] = pred.values()[i];
  return balanced_masked_ce<double>(nn::constant(std::move(t)), target, vis, eps)->value[0];
}

// ---------------------------------------------------------------------------
// SSIM

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;
inline constexpr std::array<double, 5> kMsSsimWeights = {0.0448, 0.2856, 0.3001, 0.2363, 0.1333};

namespace detail {

/// Normalized 2D Gaussian window (1,1,k,k); k = 11 unless the image is
/// smaller, in which case the largest odd size that fits.
template <class T>
nn::Var<T> ssim_window(int h, int w) {
  int k = std::min({11, h, w});
  if (k % 2 == 0) --k;
  const int r = k / 2;
  std::vector<double> g1(static_cast<std::size_t>(k));
  for (int i = -r; i <= r; ++i) g1[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (1.5 * 1.5));
  double s = 0.0;
  nn::Tensor<T> t({1, 1, k, k});
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) s += g1[static_cast<std::size_t>(i)] * g1[static_cast<std::size_t>(j)];
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j)
      t.at(0, 0, i, j) = static_cast<T>(g1[static_cast<std::size_t>(i)] * g1[static_cast<std::size_t>(j)] / s);
  return nn::constant(std::move(t));
}

/// Mean SSIM map and mean contrast-structure map at one scale.
template <class T>
std::pair<nn::Var<T>, nn::Var<T>> ssim_means(const nn::Var<T>& a, const nn::Var<T>& b) {
  const auto win = ssim_window<T>(a->value.dim(2), a->value.dim(3));
  const auto g = nn::ConvGeometry::valid();
  auto filt = [&](const nn::Var<T>& x) { return nn::conv2d<T>(x, win, nullptr, g); };
  const auto mu_a = filt(a), mu_b = filt(b);
  const auto mu_aa = nn::mul(mu_a, mu_a), mu_bb = nn::mul(mu_b, mu_b), mu_ab = nn::mul(mu_a, mu_b);
  const auto var_a = nn::sub(filt(nn::mul(a, a)), mu_aa);
  const auto var_b = nn::sub(filt(nn::mul(b, b)), mu_bb);
  const auto cov = nn::sub(filt(nn::mul(a, b)), mu_ab);
  const T c1 = static_cast<T>(kSsimC1), c2 = static_cast<T>(kSsimC2);
  const auto cs = nn::div(nn::affine(cov, T(2), c2), nn::affine(nn::add(var_a, var_b), T(1), c2));
  const auto lum = nn::div(nn::affine(mu_ab, T(2), c1), nn::affine(nn::add(mu_aa, mu_bb), T(1), c1));
  return {nn::mean(nn::mul(lum, cs)), nn::mean(cs)};
}

}  // namespace detail

/// Multi-scale SSIM of two (1,1,H,W) tensors with unit dynamic range. With one
/// scale this is plain mean SSIM. For several scales the per-scale means are
/// floored at a small positive value before the fractional powers.
template <class T>
nn::Var<T> ms_ssim(const nn::Var<T>& a, const nn::Var<T>& b, int scales) {
  nn::detail::require_same_shape(a, b, "ms_ssim");
  nn::detail::require_rank4(a, "ms_ssim");
  if (scales < 1 || scales > 5) throw ConfigError("ms_ssim: scales must lie in [1,5]");
  const int h = a->value.dim(2), w = a->value.dim(3);
  const int f = 1 << (scales - 1);
  if (h % f != 0 || w % f != 0) throw ShapeError("ms_ssim: dims must be divisible by 2^(scales-1)");
  if (scales == 1) return detail::ssim_means(a, b).first;
  double wsum = 0.0;
  for (int i = 0; i < scales; ++i) wsum += kMsSsimWeights[static_cast<std::size_t>(i)];
  nn::Var<T> x = a, y = b, result;
  const T floor = T(1e-6);
  for (int i = 0; i < scales; ++i) {
    auto [ssim, cs] = detail::ssim_means(x, y);
    const T e = static_cast<T>(kMsSsimWeights[static_cast<std::size_t>(i)] / wsum);
    const auto term = nn::pow(nn::clamp(i + 1 == scales ? ssim : cs, floor, T(1)), e);
    result = result ? nn::mul(result, term) : term;
    if (i + 1 < scales) {
      x = nn::avgpool2(x);
      y = nn::avgpool2(y);
    }
  }
  return result;
}

inline double ms_ssim(const OgmFrame& a, const OgmFrame& b, int scales) {
  if (a.height() != b.height() || a.width() != b.width()) throw ShapeError("ms_ssim: frame shapes differ");
  nn::NoGradGuard guard;
  return ms_ssim<double>(frame_to_var<double>(a), frame_to_var<double>(b), scales)->value[0];
}

/// Single-scale SSIM.
inline double ssim(const OgmFrame& a, const OgmFrame& b) { return ms_ssim(a, b, 1); }

// ---------------------------------------------------------------------------
// Total cost

/// Average over steps [first_step, trace.size()) of the per-step cost; the
/// target of step s is frame s+1. The L2 and SSIM terms apply to difference
/// models only.
template <class T>
nn::Var<T> total_loss(const std::vector<StepOutput<T>>& trace, const OgmSequence& seq, const LossConfig& cfg,
                      bool difference_model, int first_step = 0) {
  cfg.validate();
  const int steps = std::min(static_cast<int>(trace.size()), seq.length() - 1);
  if (first_step < 0 || first_step >= steps) throw ContractError("total_loss: no steps with targets in range");
  std::vector<nn::Var<T>> terms;
  for (int s = first_step; s < steps; ++s) {
    const auto& st = trace[static_cast<std::size_t>(s)];
    const auto& target = seq.frames[static_cast<std::size_t>(s + 1)];
    const auto& vis = seq.visibility[static_cast<std::size_t>(s + 1)];
    nn::Var<T> term = nn::affine(balanced_masked_ce(st.prob, target, vis, cfg.eps), static_cast<T>(cfg.lambda_ce), T(0));
    if (difference_model) {
      if (!st.comp || !st.pre) throw ContractError("total_loss: difference model output lacks the compensation matrix");
      const auto l2 = nn::mean(nn::mul(st.comp, st.comp));
      const auto sim = ms_ssim(st.pre, frame_to_var<T>(target), cfg.ssim_scales);
      term = nn::scalar_sum<T>({term, nn::affine(l2, static_cast<T>(cfg.lambda_l2), T(0)),
                                nn::affine(sim, static_cast<T>(-cfg.lambda_ssim), static_cast<T>(cfg.lambda_ssim))});
    }
    terms.push_back(term);
  }
  return nn::affine(nn::scalar_sum(terms), T(1) / static_cast<T>(terms.size()), T(0));
}

}  // namespace ogmpred

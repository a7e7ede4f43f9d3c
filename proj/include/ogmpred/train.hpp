#pragma once

// Training loop: seeded per-epoch shuffling, closed-loop rollouts, Adam with
// global-norm clipping and optional step-size halving on plateaus.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <vector>

#include "ogmpred/errors.hpp"
#include "ogmpred/loss.hpp"
#include "ogmpred/model.hpp"
#include "ogmpred/nn.hpp"
#include "ogmpred/rng.hpp"

namespace ogmpred {

struct TrainConfig {
  int epochs = 10;
  std::uint64_t seed = 0;
  int batch_size = 1;
  double clip_norm = 5.0;
  bool halve_on_plateau = false;
  /// Epochs without improvement of the mean loss before the step size is halved.
  int plateau_patience = 2;
  /// Wall-clock cap in seconds, 0 for none. Training stops before an epoch
  /// that would overrun it, judged by the longest epoch so far.
  double time_budget_s = 0.0;

  void validate() const {
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(clip_norm > 0.0)) throw ConfigError("train: clip_norm must be > 0");
    if (plateau_patience < 1) throw ConfigError("train: plateau_patience must be >= 1");
    if (!(time_budget_s >= 0.0)) throw ConfigError("train: time_budget_s must be >= 0");
  }
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean total loss per epoch
};

/// Fisher-Yates with the library's own integer draws, so the order is the
/// same on every platform.
inline std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

/// Trains in place. `on_epoch(epoch, mean_loss)` is called after every epoch.
template <class T>
TrainResult train(Model<T>& model, const std::vector<OgmSequence>& data, const TrainConfig& tc, const LossConfig& lc,
                  const nn::AdamConfig& ac, const std::function<void(int, double)>& on_epoch = {}) {
  tc.validate();
  lc.validate();
  if (data.empty()) throw DataError("train: empty dataset");
  auto& params = model.parameters();
  nn::Adam<T> opt(params, ac);
  Rng rng = Rng(tc.seed).split(0x7EA1);
  TrainResult result;
  double best = INFINITY;
  int stale = 0;
  const bool diff = model.config().is_diff();
  const InputMode mode = model.config().input_mode();
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  double longest = 0.0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto epoch_start = Clock::now();
    if (tc.time_budget_s > 0.0 &&
        std::chrono::duration<double>(epoch_start - start).count() + longest > tc.time_budget_s)
      break;
    const auto order = shuffled_indices(data.size(), rng);
    double total = 0.0;
    std::size_t in_batch = 0;
    params.zero_grad();
    for (std::size_t n = 0; n < order.size(); ++n) {
      const auto& seq = data[order[n]];
      const auto trace = rollout_trace(model, seq, mode);
      auto loss = total_loss(trace, seq, lc, diff);
      const double lv = static_cast<double>(loss->value[0]);
      if (!std::isfinite(lv))
        throw NumericFault("train: non-finite loss at epoch " + std::to_string(epoch) + ", sequence " + std::to_string(order[n]));
      total += lv;
      nn::backward(nn::affine(loss, T(1) / static_cast<T>(tc.batch_size), T(0)));
      if (++in_batch == static_cast<std::size_t>(tc.batch_size) || n + 1 == order.size()) {
        nn::clip_grad_norm(params, tc.clip_norm);
        opt.step();
        params.zero_grad();
        in_batch = 0;
      }
    }
    const double mean = total / static_cast<double>(data.size());
    result.epoch_loss.push_back(mean);
    longest = std::max(longest, std::chrono::duration<double>(Clock::now() - epoch_start).count());
    if (on_epoch) on_epoch(epoch, mean);
    if (tc.halve_on_plateau) {
      if (mean < best) {
        best = mean;
        stale = 0;
      } else if (++stale >= tc.plateau_patience) {
        opt.config().lr *= 0.5;
        stale = 0;
      }
    }
  }
  return result;
}

/// Mean total loss over a dataset without gradient recording. With
/// prediction_only set, only the steps whose target is a future frame count.
template <class T>
double dataset_loss(const Model<T>& model, const std::vector<OgmSequence>& data, const LossConfig& lc,
                    bool prediction_only = false) {
  if (data.empty()) throw DataError("dataset_loss: empty dataset");
  nn::NoGradGuard guard;
  double total = 0.0;
  for (const auto& seq : data) {
    const auto trace = rollout_trace(model, seq, model.config().input_mode());
    const int first = prediction_only ? seq.tau_init - 1 : 0;
    total += static_cast<double>(total_loss(trace, seq, lc, model.config().is_diff(), first)->value[0]);
  }
  return total / static_cast<double>(data.size());
}

inline void write_loss_curve(const std::filesystem::path& path, const TrainResult& r) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << "epoch,mean_loss\n";
  char buf[64];
  for (std::size_t i = 0; i < r.epoch_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, r.epoch_loss[i]);
    os << buf;
  }
}

}  // namespace ogmpred

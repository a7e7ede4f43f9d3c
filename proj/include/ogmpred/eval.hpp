#pragma once

// Prediction quality measures: %TP and %TN over visible cells and S100
// (100 x SSIM), for the whole sequence and the prediction phase, on the full
// grid and restricted to moving-object cells; plus per-frame timing.

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "ogmpred/errors.hpp"
#include "ogmpred/grid.hpp"
#include "ogmpred/loss.hpp"
#include "ogmpred/model.hpp"
#include "ogmpred/scene.hpp"

namespace ogmpred {

struct Metrics {
  double tp = 0.0;
  double tn = 0.0;
  double s100 = 0.0;
};

struct EvalReport {
  Metrics whole_seq;
  Metrics whole_seq_objects;
  Metrics prediction_seq;
  Metrics prediction_seq_objects;
  double t_per_frame_ms = 0.0;
  int sequences = 0;
};

/// Raw confusion counts; TP% and TN% are pooled over every scored cell.
struct Confusion {
  std::size_t occupied = 0, occupied_hit = 0;
  std::size_t free = 0, free_hit = 0;
  double ssim_sum = 0.0;
  std::size_t frames = 0;

  /// A class absent from the scored cells reports 100 (nothing was missed).
  [[nodiscard]] Metrics metrics() const {
    Metrics m;
    m.tp = occupied ? 100.0 * static_cast<double>(occupied_hit) / static_cast<double>(occupied) : 100.0;
    m.tn = free ? 100.0 * static_cast<double>(free_hit) / static_cast<double>(free) : 100.0;
    m.s100 = frames ? 100.0 * ssim_sum / static_cast<double>(frames) : 100.0;
    return m;
  }
};

/// Adds one (prediction, target) pair. `scored` selects the cells that count
/// (visible, optionally intersected with an object mask); SSIM is computed on
/// both frames multiplied by that mask.
inline void accumulate(Confusion& acc, const OgmFrame& pred, const OgmFrame& target, const BinaryMask& scored,
                       double threshold) {
  if (!pred.same_geometry(target) || scored.size() != target.size()) throw ShapeError("evaluate: shape mismatch");
  const auto p = pred.values();
  const auto t = target.values();
  const auto m = scored.bits();
  OgmFrame pm(pred.height(), pred.width(), pred.cell_size()), tm(pm);
  auto pmv = pm.values();
  auto tmv = tm.values();
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!m[i]) continue;
    pmv[i] = p[i];
    tmv[i] = t[i];
    const bool pred_occ = p[i] >= threshold;
    if (t[i] >= 0.5f) {
      ++acc.occupied;
      if (pred_occ) ++acc.occupied_hit;
    } else {
      ++acc.free;
      if (!pred_occ) ++acc.free_hit;
    }
  }
  acc.ssim_sum += ssim(pm, tm);
  ++acc.frames;
}

struct ReportAccumulator {
  Confusion whole, whole_obj, pred, pred_obj;
  double threshold = 0.5;

  /// predictions[s] is the prediction of frame s+1; entries beyond T-2 are ignored.
  void add(const OgmSequence& seq, const std::vector<OgmFrame>& predictions) {
    if (!(threshold > 0.0 && threshold < 1.0)) throw ContractError("evaluate: threshold must lie in (0,1)");
    const int steps = seq.length() - 1;
    if (static_cast<int>(predictions.size()) < steps) throw ContractError("evaluate: too few predicted frames");
    for (int s = 0; s < steps; ++s) {
      const auto& target = seq.frames[static_cast<std::size_t>(s + 1)];
      const auto& vis = seq.visibility[static_cast<std::size_t>(s + 1)];
      const auto& pr = predictions[static_cast<std::size_t>(s)];
      const bool in_pred = s + 1 >= seq.tau_init;
      accumulate(whole, pr, target, vis, threshold);
      if (in_pred) accumulate(pred, pr, target, vis, threshold);
      if (seq.object_masks) {
        BinaryMask obj = vis;
        const auto& om = (*seq.object_masks)[static_cast<std::size_t>(s + 1)];
        for (std::size_t i = 0; i < obj.size(); ++i) obj.bits()[i] = obj.bits()[i] & om.bits()[i];
        accumulate(whole_obj, pr, target, obj, threshold);
        if (in_pred) accumulate(pred_obj, pr, target, obj, threshold);
      }
    }
  }

  [[nodiscard]] EvalReport report(int sequences, double t_per_frame_ms) const {
    return {whole.metrics(), whole_obj.metrics(), pred.metrics(), pred_obj.metrics(), t_per_frame_ms, sequences};
  }
};

/// Scores fixed predictions (e.g. the persistence baseline).
inline EvalReport evaluate_predictions(const std::vector<OgmSequence>& seqs,
                                       const std::vector<std::vector<OgmFrame>>& predictions, double threshold = 0.5) {
  if (seqs.empty()) throw DataError("evaluate: empty dataset");
  if (predictions.size() != seqs.size()) throw ContractError("evaluate: one prediction list per sequence required");
  ReportAccumulator acc;
  acc.threshold = threshold;
  for (std::size_t i = 0; i < seqs.size(); ++i) acc.add(seqs[i], predictions[i]);
  return acc.report(static_cast<int>(seqs.size()), 0.0);
}

inline EvalReport evaluate_baseline(const std::vector<OgmSequence>& seqs, double threshold = 0.5) {
  std::vector<std::vector<OgmFrame>> preds;
  for (const auto& s : seqs) preds.push_back(persistence_baseline(s));
  return evaluate_predictions(seqs, preds, threshold);
}

/// Runs the model on every sequence. t_per_frame is the wall-clock time of the
/// steps that produce future frames (motion features included), divided by
/// their count.
template <class T>
EvalReport evaluate(const Model<T>& model, const std::vector<OgmSequence>& seqs, double threshold = 0.5) {
  if (seqs.empty()) throw DataError("evaluate: empty dataset");
  nn::NoGradGuard guard;
  ReportAccumulator acc;
  acc.threshold = threshold;
  double pred_seconds = 0.0;
  long pred_frames = 0;
  for (const auto& seq : seqs) {
    RolloutRunner<T> runner(model, seq, model.config().input_mode());
    std::vector<OgmFrame> preds;
    for (int s = 0; s + 1 < seq.length(); ++s) {
      const bool timed = s + 1 >= seq.tau_init;
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = runner.advance();
      const auto t1 = std::chrono::steady_clock::now();
      if (timed) {
        pred_seconds += std::chrono::duration<double>(t1 - t0).count();
        ++pred_frames;
      }
      preds.push_back(var_to_frame(out.prob, seq.cell_size()));
    }
    acc.add(seq, preds);
  }
  return acc.report(static_cast<int>(seqs.size()), pred_frames ? 1000.0 * pred_seconds / pred_frames : 0.0);
}

inline nlohmann::ordered_json metrics_json(const Metrics& m) {
  return {{"tp", m.tp}, {"tn", m.tn}, {"s100", m.s100}};
}

inline nlohmann::ordered_json report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["sequences"] = r.sequences;
  j["whole_seq"] = {{"whole_ogm", metrics_json(r.whole_seq)}, {"objects_only", metrics_json(r.whole_seq_objects)}};
  j["prediction_seq"] = {{"whole_ogm", metrics_json(r.prediction_seq)},
                         {"objects_only", metrics_json(r.prediction_seq_objects)}};
  j["t_per_frame_ms"] = r.t_per_frame_ms;
  return j;
}

/// Plain-text table with the column layout of the results table.
inline std::string report_table(const EvalReport& r, const std::string& label) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::left << std::setw(16) << "" << "| Whole seq.                                 | Prediction seq.                            |\n";
  os << std::setw(16) << "" << "| Whole OGM            | Objects only         | Whole OGM            | Objects only         |\n";
  os << std::setw(16) << "Model" << "|" << std::right;
  for (int i = 0; i < 4; ++i) os << std::setw(7) << "TP" << std::setw(7) << "TN" << std::setw(7) << "S100" << " |";
  os << std::setw(10) << "t/f (ms)" << "\n";
  os << std::left << std::setw(16) << label << "|" << std::right;
  for (const Metrics* m : {&r.whole_seq, &r.whole_seq_objects, &r.prediction_seq, &r.prediction_seq_objects})
    os << std::setw(7) << m->tp << std::setw(7) << m->tn << std::setw(7) << m->s100 << " |";
  os << std::setw(10) << r.t_per_frame_ms << "\n";
  return os.str();
}

}  // namespace ogmpred

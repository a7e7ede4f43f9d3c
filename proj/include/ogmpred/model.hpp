#pragma once

// The model zoo: encoder / ConvLSTM core / decoder networks with optional
// output feedback, motion-feature branch and difference-learning head, and
// the sequence rollout.
//
// Step s (0-based) consumes input frame s and predicts frame s+1.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ogmpred/errors.hpp"
#include "ogmpred/flow.hpp"
#include "ogmpred/grid.hpp"
#include "ogmpred/nn.hpp"
#include "ogmpred/rng.hpp"
#include "ogmpred/tensor.hpp"

namespace ogmpred {

enum class Family { ED, ED_Di, Diff1, Diff2 };
enum class ConfigKind { Base, Ext1, Ext2 };
enum class MfeKind { none, farneback, two_channel_diff };
enum class ClassifierKind { none, conv2, convlstm1 };

inline const char* to_string(Family f) {
  switch (f) {
    case Family::ED: return "ED";
    case Family::ED_Di: return "ED_Di";
    case Family::Diff1: return "Diff1";
    case Family::Diff2: return "Diff2";
  }
  return "?";
}
inline const char* to_string(ConfigKind c) {
  switch (c) {
    case ConfigKind::Base: return "Base";
    case ConfigKind::Ext1: return "Ext1";
    case ConfigKind::Ext2: return "Ext2";
  }
  return "?";
}
inline const char* to_string(MfeKind m) {
  switch (m) {
    case MfeKind::none: return "none";
    case MfeKind::farneback: return "farneback";
    case MfeKind::two_channel_diff: return "two_channel_diff";
  }
  return "?";
}
inline const char* to_string(ClassifierKind c) {
  switch (c) {
    case ClassifierKind::none: return "none";
    case ClassifierKind::conv2: return "conv2";
    case ClassifierKind::convlstm1: return "convlstm1";
  }
  return "?";
}

namespace detail {
template <class E, std::size_t N>
E enum_from_string(const std::string& s, const E (&all)[N], const char* what) {
  for (E e : all)
    if (s == to_string(e)) return e;
  throw ConfigError(std::string("unknown ") + what + ": " + s);
}
}  // namespace detail

inline Family family_from_string(const std::string& s) {
  static constexpr Family all[] = {Family::ED, Family::ED_Di, Family::Diff1, Family::Diff2};
  return detail::enum_from_string(s, all, "model family");
}
inline ConfigKind config_kind_from_string(const std::string& s) {
  static constexpr ConfigKind all[] = {ConfigKind::Base, ConfigKind::Ext1, ConfigKind::Ext2};
  return detail::enum_from_string(s, all, "model cfg");
}
inline MfeKind mfe_from_string(const std::string& s) {
  static constexpr MfeKind all[] = {MfeKind::none, MfeKind::farneback, MfeKind::two_channel_diff};
  return detail::enum_from_string(s, all, "mfe");
}
inline ClassifierKind classifier_from_string(const std::string& s) {
  static constexpr ClassifierKind all[] = {ClassifierKind::none, ClassifierKind::conv2, ClassifierKind::convlstm1};
  return detail::enum_from_string(s, all, "classifier");
}

struct ModelConfig {
  Family family = Family::Diff2;
  ConfigKind cfg = ConfigKind::Ext2;
  MfeKind mfe = MfeKind::two_channel_diff;
  bool dilation = false;
  ClassifierKind classifier = ClassifierKind::convlstm1;
  int height = 64;
  int width = 64;
  int channels = 32;
  int classifier_channels = 8;
  FarnebackParams flow;

  /// The canonical row for (family, cfg).
  static ModelConfig row(Family family, ConfigKind cfg, int height = 64, int width = 64, int channels = 32) {
    ModelConfig m;
    m.family = family;
    m.cfg = cfg;
    m.mfe = cfg == ConfigKind::Base ? MfeKind::none
            : cfg == ConfigKind::Ext1 ? MfeKind::farneback
                                      : MfeKind::two_channel_diff;
    m.dilation = family == Family::ED_Di;
    m.classifier = family == Family::Diff1   ? ClassifierKind::conv2
                   : family == Family::Diff2 ? ClassifierKind::convlstm1
                                             : ClassifierKind::none;
    m.height = height;
    m.width = width;
    m.channels = channels;
    return m;
  }

  /// 1-based row number in the model table, or 0 if the combination is not one of the 12.
  [[nodiscard]] int table_row() const {
    const ModelConfig canon = row(family, cfg);
    if (mfe != canon.mfe || dilation != canon.dilation || classifier != canon.classifier) return 0;
    return 3 * static_cast<int>(family) + static_cast<int>(cfg) + 1;
  }

  [[nodiscard]] bool is_diff() const { return family == Family::Diff1 || family == Family::Diff2; }

  /// Blank inputs after the init-phase for the plain encoder-decoder rows,
  /// output feedback everywhere else.
  [[nodiscard]] InputMode input_mode() const {
    return (cfg == ConfigKind::Base && !is_diff()) ? InputMode::blank_inputs : InputMode::feedback;
  }

  void validate() const {
    if (table_row() == 0)
      throw ConfigError(std::string("model config is not a valid table row: ") + to_string(family) + "/" +
                        to_string(cfg) + " mfe=" + to_string(mfe) + " dilation=" + (dilation ? "yes" : "no") +
                        " classifier=" + to_string(classifier));
    if (height < 4 || width < 4 || height % 4 != 0 || width % 4 != 0)
      throw ConfigError("model grid must be a multiple of 4 in both dimensions");
    if (channels < 1 || classifier_channels < 1) throw ConfigError("model channel widths must be >= 1");
    if (mfe == MfeKind::farneback) {
      flow.validate();
      if (height < flow.window || width < flow.window) throw ConfigError("grid smaller than the flow window");
    }
  }
};

inline nlohmann::ordered_json model_config_json(const ModelConfig& m) {
  nlohmann::ordered_json j;
  j["family"] = to_string(m.family);
  j["cfg"] = to_string(m.cfg);
  j["mfe"] = to_string(m.mfe);
  j["dilation"] = m.dilation;
  j["classifier"] = to_string(m.classifier);
  j["height"] = m.height;
  j["width"] = m.width;
  j["channels"] = m.channels;
  j["classifier_channels"] = m.classifier_channels;
  return j;
}

/// Parses a model document. Only family and cfg are required; the other
/// row attributes default to the canonical row and are checked if given.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const char* known[] = {"family", "cfg", "mfe", "dilation", "classifier", "height", "width", "channels",
                                "classifier_channels"};
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError("unknown key in model config: " + key);
  }
  try {
    ModelConfig m = ModelConfig::row(family_from_string(j.value("family", std::string("Diff2"))),
                                     config_kind_from_string(j.value("cfg", std::string("Ext2"))));
    if (j.contains("mfe")) m.mfe = mfe_from_string(j.at("mfe").get<std::string>());
    if (j.contains("dilation")) m.dilation = j.at("dilation").get<bool>();
    if (j.contains("classifier")) m.classifier = classifier_from_string(j.at("classifier").get<std::string>());
    m.height = j.value("height", m.height);
    m.width = j.value("width", m.width);
    m.channels = j.value("channels", m.channels);
    m.classifier_channels = j.value("classifier_channels", m.classifier_channels);
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

/// Values in [-1, 1].
struct CompensationMatrix {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  [[nodiscard]] float operator()(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
};

template <class T>
struct ModelState {
  std::vector<nn::ConvLstmState<T>> core;
  std::optional<nn::ConvLstmState<T>> classifier;
};

template <class T>
struct StepOutput {
  nn::Var<T> prob;    // (1,1,H,W) occupancy probability of the next frame
  nn::Var<T> logits;  // pre-sigmoid values
  nn::Var<T> comp;    // compensation matrix, difference families only
  nn::Var<T> pre;     // clamp(input + comp, 0, 1), difference families only
};

template <class T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config.validate();
    const Rng root(seed);
    std::uint64_t stream = 0;
    auto next = [&] { return root.split(stream++); };
    const int c = config.channels;
    using nn::Activation;
    using nn::LayerSpec;
    auto conv = [](int in, int out, int k, Activation a) {
      LayerSpec s;
      s.kind = LayerSpec::Kind::conv;
      s.kernel_h = s.kernel_w = k;
      s.in_channels = in;
      s.out_channels = out;
      s.activation = a;
      return s;
    };
    enc1_ = nn::Conv2d<T>(params_, "enc.conv1", conv(1, c, 3, Activation::relu), next());
    enc2_ = nn::Conv2d<T>(params_, "enc.conv2", conv(c, c, 3, Activation::relu), next());
    if (config.mfe != MfeKind::none) {
      mfe1_ = nn::Conv2d<T>(params_, "mfe.conv1", conv(2, c, 3, Activation::relu), next());
      mfe2_ = nn::Conv2d<T>(params_, "mfe.conv2", conv(c, c, 3, Activation::relu), next());
    }
    const int core_in = config.mfe != MfeKind::none ? 2 * c : c;
    for (int i = 0; i < 4; ++i)
      core_.emplace_back(params_, "core." + std::to_string(i), i == 0 ? core_in : c, c, 3,
                         config.dilation ? i + 1 : 1, next());
    LayerSpec up;
    up.kind = LayerSpec::Kind::conv_transpose;
    up.kernel_h = up.kernel_w = 4;
    up.stride = 2;
    up.in_channels = c;
    up.out_channels = c;
    up.activation = Activation::relu;
    dec1_ = nn::ConvTranspose2d<T>(params_, "dec.up1", up, next());
    up.out_channels = 1;
    up.activation = config.is_diff() ? Activation::tanh : Activation::linear;
    dec2_ = nn::ConvTranspose2d<T>(params_, "dec.up2", up, next());
    const int k = config.classifier_channels;
    if (config.classifier == ClassifierKind::conv2) {
      cls1_ = nn::Conv2d<T>(params_, "cls.conv1", conv(1, k, 3, Activation::relu), next());
      cls2_ = nn::Conv2d<T>(params_, "cls.conv2", conv(k, 1, 3, Activation::linear), next());
    } else if (config.classifier == ClassifierKind::convlstm1) {
      cls_lstm_.emplace(params_, "cls.lstm", 1, k, 3, 1, next());
      cls2_ = nn::Conv2d<T>(params_, "cls.out", conv(k, 1, 1, Activation::linear), next());
    }
  }

  [[nodiscard]] const ModelConfig& config() const { return config_; }
  nn::ParameterSet<T>& parameters() { return params_; }
  [[nodiscard]] const nn::ParameterSet<T>& parameters() const { return params_; }

  [[nodiscard]] ModelState<T> zero_state() const {
    ModelState<T> s;
    const int h = config_.height / 4, w = config_.width / 4;
    for (const auto& cell : core_) s.core.push_back(cell.zero_state(1, h, w));
    if (cls_lstm_) s.classifier = cls_lstm_->zero_state(1, config_.height, config_.width);
    return s;
  }

  /// One step. `input` is (1,1,H,W); `mf` is (1,2,H,W) when the model has a
  /// motion-feature branch, otherwise ignored. Updates `state` in place.
  StepOutput<T> step(const nn::Var<T>& input, const nn::Var<T>& mf, ModelState<T>& state) const {
    const nn::Shape want{1, 1, config_.height, config_.width};
    if (input->shape() != want) throw ShapeError("model step: input shape " + nn::shape_str(input->shape()) + ", expected " + nn::shape_str(want));
    if (state.core.size() != core_.size()) throw ShapeError("model step: state does not match model");
    nn::Var<T> x = nn::maxpool2(enc2_(nn::maxpool2(enc1_(input))));
    if (config_.mfe != MfeKind::none) {
      if (!mf || mf->shape() != nn::Shape{1, 2, config_.height, config_.width})
        throw ShapeError("model step: motion features missing or misshapen");
      x = nn::concat_channels<T>({x, nn::maxpool2(mfe2_(nn::maxpool2(mfe1_(mf))))});
    }
    for (std::size_t i = 0; i < core_.size(); ++i) {
      state.core[i] = core_[i].step(x, state.core[i]);
      x = state.core[i].h;
    }
    nn::Var<T> d = dec2_(dec1_(x));
    StepOutput<T> out;
    if (!config_.is_diff()) {
      out.logits = d;
    } else {
      out.comp = d;
      out.pre = nn::clamp(nn::add(input, d), T(0), T(1));
      if (cls_lstm_) {
        if (!state.classifier) throw ShapeError("model step: missing classifier state");
        state.classifier = cls_lstm_->step(out.pre, *state.classifier);
        out.logits = cls2_(state.classifier->h);
      } else {
        out.logits = cls2_(cls1_(out.pre));
      }
    }
    out.prob = nn::sigmoid(out.logits);
    return out;
  }

  /// Motion features for the pair (prev, curr) of model inputs.
  [[nodiscard]] nn::Var<T> motion_features(const nn::Var<T>& prev, const nn::Var<T>& curr) const {
    if (config_.mfe == MfeKind::two_channel_diff) return two_channel_diff(prev, curr);
    if (config_.mfe == MfeKind::farneback) {
      std::vector<double> a(prev->value.values().begin(), prev->value.values().end());
      std::vector<double> b(curr->value.values().begin(), curr->value.values().end());
      auto [dx, dy] = farneback_flow(a, b, config_.height, config_.width, config_.flow);
      nn::Tensor<T> t({1, 2, config_.height, config_.width});
      for (std::size_t i = 0; i < dx.size(); ++i) {
        t[i] = static_cast<T>(dx[i]);
        t[dx.size() + i] = static_cast<T>(dy[i]);
      }
      return nn::constant(std::move(t));
    }
    return nullptr;
  }

 private:
  ModelConfig config_;
  nn::ParameterSet<T> params_;
  nn::Conv2d<T> enc1_, enc2_, mfe1_, mfe2_, cls1_, cls2_;
  std::vector<nn::ConvLstmCell<T>> core_;
  nn::ConvTranspose2d<T> dec1_, dec2_;
  std::optional<nn::ConvLstmCell<T>> cls_lstm_;
};

template <class T>
nn::Var<T> frame_to_var(const OgmFrame& f) {
  nn::Tensor<T> t({1, 1, f.height(), f.width()});
  auto v = f.values();
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = static_cast<T>(v[i]);
  return nn::constant(std::move(t));
}

template <class T>
OgmFrame var_to_frame(const nn::Var<T>& v, double cell_size) {
  const int h = v->value.dim(2), w = v->value.dim(3);
  OgmFrame f(h, w, cell_size);
  auto dst = f.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(v->value[i]);
  return f;
}

/// Everything needed to continue a rollout from a given step.
template <class T>
struct RolloutSnapshot {
  int next_step = 0;
  ModelState<T> state;
  nn::Var<T> prev_input;
  nn::Var<T> prev_output;
};

/// Steps a model through a sequence one frame at a time.
template <class T>
class RolloutRunner {
 public:
  RolloutRunner(const Model<T>& model, const OgmSequence& seq, InputMode mode)
      : model_(&model), seq_(&seq), mode_(mode), state_(model.zero_state()) {
    check();
  }

  RolloutRunner(const Model<T>& model, const OgmSequence& seq, InputMode mode, const RolloutSnapshot<T>& snap)
      : model_(&model), seq_(&seq), mode_(mode), step_(snap.next_step), state_(snap.state),
        prev_input_(snap.prev_input), prev_output_(snap.prev_output) {
    check();
  }

  [[nodiscard]] int next_step() const { return step_; }
  [[nodiscard]] bool done() const { return step_ >= seq_->length(); }

  StepOutput<T> advance() {
    if (done()) throw ContractError("rollout: sequence exhausted");
    nn::Var<T> input;
    if (step_ < seq_->tau_init) {
      input = frame_to_var<T>(seq_->frames[static_cast<std::size_t>(step_)]);
    } else if (mode_ == InputMode::blank_inputs) {
      input = nn::constant(nn::Tensor<T>({1, 1, seq_->height(), seq_->width()}));
    } else {
      if (!prev_output_) throw ContractError("rollout: feedback mode needs the previous output");
      input = prev_output_;
    }
    nn::Var<T> mf;
    if (model_->config().mfe != MfeKind::none) mf = model_->motion_features(prev_input_ ? prev_input_ : input, input);
    StepOutput<T> out = model_->step(input, mf, state_);
    prev_input_ = input;
    prev_output_ = out.prob;
    ++step_;
    return out;
  }

  /// Detached copy of the current state.
  [[nodiscard]] RolloutSnapshot<T> snapshot() const {
    RolloutSnapshot<T> s;
    s.next_step = step_;
    for (const auto& c : state_.core) s.state.core.push_back({nn::detach(c.h), nn::detach(c.c)});
    if (state_.classifier) s.state.classifier = nn::ConvLstmState<T>{nn::detach(state_.classifier->h), nn::detach(state_.classifier->c)};
    if (prev_input_) s.prev_input = nn::detach(prev_input_);
    if (prev_output_) s.prev_output = nn::detach(prev_output_);
    return s;
  }

 private:
  void check() const {
    seq_->validate();
    if (seq_->height() != model_->config().height || seq_->width() != model_->config().width)
      throw ShapeError("rollout: sequence grid does not match the model grid");
  }

  const Model<T>* model_;
  const OgmSequence* seq_;
  InputMode mode_;
  int step_ = 0;
  ModelState<T> state_;
  nn::Var<T> prev_input_, prev_output_;
};

/// Differentiable rollout over the first `steps` steps (default: every step
/// that has a target, i.e. T-1).
template <class T>
std::vector<StepOutput<T>> rollout_trace(const Model<T>& model, const OgmSequence& seq, InputMode mode, int steps = -1) {
  if (steps < 0) steps = seq.length() - 1;
  RolloutRunner<T> runner(model, seq, mode);
  std::vector<StepOutput<T>> out;
  for (int s = 0; s < steps && !runner.done(); ++s) out.push_back(runner.advance());
  return out;
}

struct RolloutOutput {
  std::vector<OgmFrame> predicted;
  std::optional<std::vector<CompensationMatrix>> comps;
  std::optional<std::vector<OgmFrame>> pre_classifier;
};

template <class T>
RolloutOutput to_rollout_output(const std::vector<StepOutput<T>>& steps, double cell_size) {
  RolloutOutput r;
  for (const auto& s : steps) {
    r.predicted.push_back(var_to_frame(s.prob, cell_size));
    if (s.comp) {
      if (!r.comps) r.comps.emplace();
      if (!r.pre_classifier) r.pre_classifier.emplace();
      const auto f = var_to_frame(s.comp, cell_size);
      r.comps->push_back({f.height(), f.width(), std::vector<float>(f.values().begin(), f.values().end())});
      r.pre_classifier->push_back(var_to_frame(s.pre, cell_size));
    }
  }
  return r;
}

/// Full T-step rollout without gradient recording.
template <class T>
RolloutOutput rollout(const Model<T>& model, const OgmSequence& seq, InputMode mode) {
  nn::NoGradGuard guard;
  return to_rollout_output(rollout_trace(model, seq, mode, seq.length()), seq.cell_size());
}

template <class T>
RolloutOutput rollout(const Model<T>& model, const OgmSequence& seq) {
  return rollout(model, seq, model.config().input_mode());
}

}  // namespace ogmpred

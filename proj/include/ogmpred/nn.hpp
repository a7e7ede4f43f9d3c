#pragma once

// Parameterized layers, the Adam optimizer and parameter checkpoints.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "ogmpred/errors.hpp"
#include "ogmpred/rng.hpp"
#include "ogmpred/tensor.hpp"

namespace ogmpred::nn {

enum class Activation { linear, sigmoid, tanh, relu };

template <class T>
Var<T> activate(const Var<T>& x, Activation a) {
  switch (a) {
    case Activation::linear: return x;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::relu: return relu(x);
  }
  return x;
}

/// Ordered, named parameter list. Order defines checkpoint layout and the
/// per-parameter initialization streams.
template <class T>
class ParameterSet {
 public:
  Var<T> add(std::string name, Tensor<T> init) {
    auto v = parameter(std::move(init));
    params_.emplace_back(std::move(name), v);
    return v;
  }

  [[nodiscard]] const std::vector<std::pair<std::string, Var<T>>>& items() const { return params_; }
  [[nodiscard]] std::size_t size() const { return params_.size(); }

  [[nodiscard]] std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += v->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_)
      if (!v->grad.empty()) v->grad.fill(T(0));
  }

 private:
  std::vector<std::pair<std::string, Var<T>>> params_;
};

/// Fan-in scaled uniform in [-sqrt(3/fan_in), sqrt(3/fan_in)] (unit output variance for unit inputs).
template <class T>
Tensor<T> fan_in_uniform(Shape shape, double fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double bound = std::sqrt(3.0 / fan_in);
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

struct LayerSpec {
  enum class Kind { conv, conv_transpose, maxpool, convlstm, activation };
  Kind kind = Kind::conv;
  int kernel_h = 3, kernel_w = 3;
  int stride = 1;
  int dilation = 1;
  int in_channels = 1, out_channels = 1;
  Activation activation = Activation::linear;

  void validate() const {
    if (kernel_h < 1 || kernel_w < 1 || stride < 1 || dilation < 1)
      throw ConfigError("LayerSpec: kernel, stride and dilation must be positive");
    if (in_channels < 1 || out_channels < 1) throw ConfigError("LayerSpec: channel counts must be >= 1");
  }
};

template <class T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterSet<T>& ps, const std::string& name, const LayerSpec& spec, Rng rng) : spec_(spec) {
    spec.validate();
    const double fan_in = static_cast<double>(spec.in_channels) * spec.kernel_h * spec.kernel_w;
    weight_ = ps.add(name + ".weight",
                     fan_in_uniform<T>({spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w}, fan_in, rng));
    bias_ = ps.add(name + ".bias", Tensor<T>({spec.out_channels}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return activate(conv2d_same(x, weight_, bias_, spec_.stride, spec_.dilation), spec_.activation);
  }

  [[nodiscard]] const Var<T>& weight() const { return weight_; }
  [[nodiscard]] const Var<T>& bias() const { return bias_; }

 private:
  LayerSpec spec_;
  Var<T> weight_, bias_;
};

/// Transposed convolution with padding (k - stride)/2 so the output is exactly
/// stride times the input size.
template <class T>
class ConvTranspose2d {
 public:
  ConvTranspose2d() = default;
  ConvTranspose2d(ParameterSet<T>& ps, const std::string& name, const LayerSpec& spec, Rng rng) : spec_(spec) {
    spec.validate();
    if ((spec.kernel_h - spec.stride) % 2 != 0 || spec.kernel_h != spec.kernel_w || spec.kernel_h < spec.stride)
      throw ConfigError("ConvTranspose2d: need square kernel with (k - stride) even and k >= stride");
    const double fan_in =
        static_cast<double>(spec.in_channels) * spec.kernel_h * spec.kernel_w / (spec.stride * spec.stride);
    weight_ = ps.add(name + ".weight",
                     fan_in_uniform<T>({spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w}, fan_in, rng));
    bias_ = ps.add(name + ".bias", Tensor<T>({spec.out_channels}));
  }

  Var<T> operator()(const Var<T>& x) const {
    return activate(conv_transpose2d(x, weight_, bias_, spec_.stride, (spec_.kernel_h - spec_.stride) / 2),
                    spec_.activation);
  }

 private:
  LayerSpec spec_;
  Var<T> weight_, bias_;
};

template <class T>
struct ConvLstmState {
  Var<T> h;
  Var<T> c;
};

/// Convolutional LSTM cell. Gates i, f, o (sigmoid) and candidate g (tanh)
/// come from one convolution over [x, h]:
///   c' = f*c + i*g,   h' = o*tanh(c').
template <class T>
class ConvLstmCell {
 public:
  ConvLstmCell() = default;
  ConvLstmCell(ParameterSet<T>& ps, const std::string& name, int in_channels, int hidden, int kernel, int dilation,
               Rng rng)
      : in_(in_channels), hidden_(hidden), kernel_(kernel), dilation_(dilation) {
    if (in_channels < 1 || hidden < 1 || kernel < 1 || dilation < 1) throw ConfigError("ConvLstmCell: bad sizes");
    const double fan_in = static_cast<double>(in_channels + hidden) * kernel * kernel;
    weight_ = ps.add(name + ".weight", fan_in_uniform<T>({4 * hidden, in_channels + hidden, kernel, kernel}, fan_in, rng));
    Tensor<T> b({4 * hidden});
    for (int i = hidden; i < 2 * hidden; ++i) b[static_cast<std::size_t>(i)] = T(1);  // forget gate
    bias_ = ps.add(name + ".bias", std::move(b));
  }

  [[nodiscard]] int hidden() const { return hidden_; }
  [[nodiscard]] int in_channels() const { return in_; }

  [[nodiscard]] ConvLstmState<T> zero_state(int n, int h, int w) const {
    return {constant(Tensor<T>({n, hidden_, h, w})), constant(Tensor<T>({n, hidden_, h, w}))};
  }

  /// One step; returns the new state (its h is the cell output).
  ConvLstmState<T> step(const Var<T>& x, const ConvLstmState<T>& s) const {
    detail::require_rank4(x, "convlstm_step");
    if (x->value.dim(1) != in_) throw ShapeError("convlstm_step: input channel mismatch");
    if (x->value.dim(0) != s.h->value.dim(0) || x->value.dim(2) != s.h->value.dim(2) ||
        x->value.dim(3) != s.h->value.dim(3))
      throw ShapeError("convlstm_step: input spatial dims differ from state " + shape_str(s.h->shape()));
    auto z = conv2d_same(concat_channels<T>({x, s.h}), weight_, bias_, 1, dilation_);
    auto i = sigmoid(slice_channels(z, 0, hidden_));
    auto f = sigmoid(slice_channels(z, hidden_, hidden_));
    auto o = sigmoid(slice_channels(z, 2 * hidden_, hidden_));
    auto g = tanh(slice_channels(z, 3 * hidden_, hidden_));
    auto c = add(mul(f, s.c), mul(i, g));
    auto h = mul(o, tanh(c));
    return {h, c};
  }

  [[nodiscard]] const Var<T>& weight() const { return weight_; }
  [[nodiscard]] const Var<T>& bias() const { return bias_; }

 private:
  int in_ = 0, hidden_ = 0, kernel_ = 3, dilation_ = 1;
  Var<T> weight_, bias_;
};

// ---------------------------------------------------------------------------
// Optimization

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Single Adam update with bias correction; t is the 1-based step count.
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v, const AdamConfig& cfg,
                 long t) {
  if (t < 1) throw ContractError("adam_update: step count must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
    const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double step = cfg.lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
    param[i] = static_cast<T>(param[i] - step);
  }
}

template <class T>
class Adam {
 public:
  Adam(const ParameterSet<T>& params, AdamConfig cfg) : params_(&params), cfg_(cfg) {
    for (const auto& [_, p] : params.items()) {
      m_.emplace_back(p->value.size(), T(0));
      v_.emplace_back(p->value.size(), T(0));
    }
  }

  void step() {
    ++t_;
    std::size_t i = 0;
    for (const auto& [_, p] : params_->items()) {
      if (!p->grad.empty()) adam_update<T>(p->value.values(), p->grad.values(), m_[i], v_[i], cfg_, t_);
      ++i;
    }
  }

  [[nodiscard]] long steps() const { return t_; }
  AdamConfig& config() { return cfg_; }

 private:
  const ParameterSet<T>* params_;
  AdamConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  long t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm. Returns the norm before clipping.
template <class T>
double clip_grad_norm(ParameterSet<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : params.items())
    for (T g : p->grad.values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& [_, p] : params.items())
      for (auto& g : p->grad.values()) g *= s;
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// "GCKP" | u16 version=1 | u32 count | per parameter:
//   u32 name length | name bytes | u32 rank | rank * u32 dims | f32 values

struct NamedTensor {
  std::string name;
  Tensor<float> tensor;
  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

inline constexpr std::uint16_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const std::vector<NamedTensor>& tensors) {
  auto put = [&](auto v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  os.write("GCKP", 4);
  put(kCheckpointVersion);
  put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& nt : tensors) {
    put(static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    put(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (int d : nt.tensor.shape()) put(static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(nt.tensor.data()), static_cast<std::streamsize>(nt.tensor.size() * sizeof(float)));
  }
  if (!os) throw DataError("write_checkpoint: stream failure");
}

inline std::vector<NamedTensor> read_checkpoint(std::istream& is) {
  auto get_u32 = [&]() {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(v))) throw DataError("read_checkpoint: truncated");
    return v;
  };
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "GCKP", 4) != 0) throw DataError("read_checkpoint: bad magic");
  std::uint16_t version = 0;
  if (!is.read(reinterpret_cast<char*>(&version), sizeof(version)) || version != kCheckpointVersion)
    throw DataError("read_checkpoint: unsupported version");
  const auto count = get_u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor nt;
    const auto len = get_u32();
    if (len > 4096) throw DataError("read_checkpoint: implausible name length");
    nt.name.resize(len);
    if (!is.read(nt.name.data(), len)) throw DataError("read_checkpoint: truncated name");
    const auto rank = get_u32();
    if (rank > 8) throw DataError("read_checkpoint: implausible rank");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get_u32()));
    nt.tensor = Tensor<float>(shape);
    if (!is.read(reinterpret_cast<char*>(nt.tensor.data()), static_cast<std::streamsize>(nt.tensor.size() * sizeof(float))))
      throw DataError("read_checkpoint: truncated values");
    out.push_back(std::move(nt));
  }
  return out;
}

template <class T>
std::vector<NamedTensor> snapshot(const ParameterSet<T>& params) {
  std::vector<NamedTensor> out;
  for (const auto& [name, v] : params.items()) out.push_back({name, v->value.template cast<float>()});
  return out;
}

/// Loads values by name; names and shapes must match exactly.
template <class T>
void restore(ParameterSet<T>& params, const std::vector<NamedTensor>& tensors) {
  if (tensors.size() != params.size()) throw DataError("checkpoint: parameter count mismatch");
  std::size_t i = 0;
  for (const auto& [name, v] : params.items()) {
    const auto& nt = tensors[i++];
    if (nt.name != name) throw DataError("checkpoint: expected parameter " + name + ", found " + nt.name);
    if (nt.tensor.shape() != v->value.shape()) throw DataError("checkpoint: shape mismatch for " + name);
    v->value = nt.tensor.template cast<T>();
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  write_checkpoint(os, tensors);
}

inline std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint: " + path.string());
  return read_checkpoint(is);
}

}  // namespace ogmpred::nn

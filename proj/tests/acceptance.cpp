// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "ogmpred/eval.hpp"
#include "ogmpred/flow.hpp"
#include "ogmpred/lidar.hpp"
#include "ogmpred/train.hpp"
#include "oracles.hpp"

using namespace ogmpred;
using namespace ogmpred::nn;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = true;
  std::string detail;
};

// ---------------------------------------------------------------- 1

Var<double> param(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return parameter(oracle::random_tensor(std::move(s), rng, lo, hi));
}

Var<double> project(const Var<double>& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, constant(oracle::random_tensor(y->shape(), rng))));
}

OgmSequence random_sequence(int h, int w, int frames, int tau, std::uint64_t seed) {
  Rng rng(seed);
  OgmSequence seq;
  seq.tau_init = tau;
  for (int k = 0; k < frames; ++k) {
    OgmFrame f(h, w, 0.2);
    for (auto& v : f.values()) v = rng.uniform() < 0.2 ? 1.0f : 0.0f;
    seq.frames.push_back(f);
    seq.poses.push_back({});
    BinaryMask vis(h, w, 1);
    for (auto& b : vis.bits()) b = rng.uniform() < 0.9 ? 1 : 0;
    seq.visibility.push_back(vis);
  }
  return seq;
}

Outcome gradient_fidelity() {
  const auto start = Clock::now();
  constexpr int kSamples = 100;
  Rng rng(101);
  std::map<std::string, oracle::GradCheck> checks;
  auto run = [&](const std::string& name, const std::vector<Var<double>>& ps, const std::function<Var<double>()>& f) {
    Rng pick(std::hash<std::string>{}(name));
    checks[name] = oracle::check_gradients(ps, f, kSamples, pick);
  };

  auto a = param({1, 2, 8, 8}, rng), b = param({1, 2, 8, 8}, rng, 0.5, 2.0);
  run("add", {a, b}, [&] { return project(add(a, b), 1); });
  run("sub", {a, b}, [&] { return project(sub(a, b), 2); });
  run("mul", {a, b}, [&] { return project(mul(a, b), 3); });
  run("div", {a, b}, [&] { return project(div(a, b), 4); });
  run("affine", {a}, [&] { return project(affine(a, 1.7, -0.3), 5); });
  run("neg", {a}, [&] { return project(neg(a), 6); });
  run("sigmoid", {a}, [&] { return project(sigmoid(a), 7); });
  run("tanh", {a}, [&] { return project(nn::tanh(a), 8); });
  run("relu", {a}, [&] { return project(relu(a), 9); });
  run("clamp", {a}, [&] { return project(clamp(a, -0.5, 0.5), 10); });
  run("pow", {b}, [&] { return project(nn::pow(b, 0.37), 11); });
  run("mean", {a}, [&] { return mean(mul(a, a)); });
  run("concat", {a, b}, [&] { return project(concat_channels<double>({a, b}), 12); });
  run("slice", {a}, [&] { return project(slice_channels(a, 1, 1), 13); });

  auto x = param({1, 3, 8, 8}, rng), w = param({4, 3, 3, 3}, rng), bias = param({4}, rng);
  run("conv2d", {x, w, bias}, [&] { return project(conv2d_same(x, w, bias), 14); });
  run("conv2d_dilated", {x, w, bias}, [&] { return project(conv2d_same(x, w, bias, 1, 2), 15); });
  run("conv2d_strided", {x, w, bias}, [&] { return project(conv2d_same(x, w, bias, 2, 1), 16); });
  auto wt = param({3, 4, 4, 4}, rng);
  run("conv_transpose2d", {x, wt, bias}, [&] { return project(conv_transpose2d(x, wt, bias, 2, 1), 17); });
  run("maxpool2", {x}, [&] { return project(maxpool2(x), 18); });
  run("avgpool2", {x}, [&] { return project(avgpool2(x), 19); });

  ParameterSet<double> lstm_ps;
  ConvLstmCell<double> cell(lstm_ps, "lstm", 2, 3, 3, 2, Rng(5));
  auto x1 = param({1, 2, 6, 6}, rng), x2 = param({1, 2, 6, 6}, rng);
  std::vector<Var<double>> lstm_vars{x1, x2};
  for (const auto& [_, v] : lstm_ps.items()) lstm_vars.push_back(v);
  run("convlstm", lstm_vars, [&] {
    auto s = cell.zero_state(1, 6, 6);
    s = cell.step(x1, s);
    s = cell.step(x2, s);
    return project(add(s.h, s.c), 20);
  });

  const auto seq16 = random_sequence(16, 16, 4, 2, 102);
  auto p = param({1, 1, 16, 16}, rng, 0.05, 0.95);
  run("balanced_ce", {p}, [&] { return balanced_masked_ce<double>(p, seq16.frames[1], seq16.visibility[1], 1e-7); });
  const auto target = frame_to_var<double>(seq16.frames[2]);
  run("ms_ssim", {p}, [&] { return ms_ssim<double>(p, target, 3); });

  for (const auto& [fam, cfg] : {std::pair{Family::ED, ConfigKind::Base}, std::pair{Family::Diff1, ConfigKind::Ext2},
                                 std::pair{Family::Diff2, ConfigKind::Ext2}}) {
    Model<double> m(ModelConfig::row(fam, cfg, 16, 16, 4), 3);
    std::vector<Var<double>> params;
    // Zero biases put every empty patch exactly on a relu kink; move off it.
    for (const auto& [_, v] : m.parameters().items()) {
      params.push_back(v);
      for (auto& e : v->value.values()) e += rng.uniform(-0.05, 0.05);
    }
    const auto mode = m.config().input_mode();
    const bool diff = m.config().is_diff();
    run("model " + std::string(to_string(fam)) + "/" + to_string(cfg), params,
        [&] { return total_loss(rollout_trace(m, seq16, mode), seq16, LossConfig{}, diff); });
  }

  Outcome o;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, c] : checks) {
    if (c.checked < kSamples || !(c.max_rel_error < 1e-3)) {
      o.pass = false;
      o.detail += name + fmt(" (n=%d rel=%.2e) ", c.checked, c.max_rel_error);
    }
    if (c.max_rel_error >= worst) worst = c.max_rel_error, worst_name = name;
  }
  const double t = seconds_since(start);
  if (t >= 120.0) o.pass = false;
  o.detail += fmt("%zu checks x %d samples, worst rel error %.2e (", checks.size(), kSamples, worst) + worst_name +
              fmt("), %.1f s", t);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome oracle_equivalence() {
  Rng rng(201);
  double conv = 0, pool = 0, convt = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 2)), cin = static_cast<int>(rng.uniform_int(1, 3));
    const int cout = static_cast<int>(rng.uniform_int(1, 3)), k = static_cast<int>(rng.uniform_int(1, 4));
    const int stride = static_cast<int>(rng.uniform_int(1, 2)), dil = static_cast<int>(rng.uniform_int(1, 2));
    const int h = static_cast<int>(rng.uniform_int(dil * (k - 1) + 1, 9));
    const int w = static_cast<int>(rng.uniform_int(dil * (k - 1) + 1, 9));
    auto xt = oracle::random_tensor({n, cin, h, w}, rng);
    auto wt = oracle::random_tensor({cout, cin, k, k}, rng);
    auto bt = oracle::random_tensor({cout}, rng);
    const auto g = trial % 2 ? ConvGeometry::same(h, w, k, k, stride, dil) : ConvGeometry::valid(stride, dil);
    auto y = conv2d<double>(constant(xt), constant(wt), constant(bt), g);
    conv = std::max(conv, oracle::max_abs_diff(
                              y->value, oracle::conv2d(xt, wt, &bt, stride, dil, g.pad_top, g.pad_bottom, g.pad_left, g.pad_right)));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const int h = 2 * static_cast<int>(rng.uniform_int(1, 5)), w = 2 * static_cast<int>(rng.uniform_int(1, 5));
    auto xt = oracle::random_tensor({2, 3, h, w}, rng);
    pool = std::max(pool, oracle::max_abs_diff(maxpool2<double>(constant(xt))->value, oracle::maxpool2(xt)));
  }
  for (int trial = 0; trial < 50; ++trial) {
    const int n = static_cast<int>(rng.uniform_int(1, 2)), cin = static_cast<int>(rng.uniform_int(1, 3));
    const int cout = static_cast<int>(rng.uniform_int(1, 3)), k = static_cast<int>(rng.uniform_int(2, 4));
    const int stride = static_cast<int>(rng.uniform_int(1, 2)), pad = static_cast<int>(rng.uniform_int(0, (k - 1) / 2));
    const int h = static_cast<int>(rng.uniform_int(1, 6)), w = static_cast<int>(rng.uniform_int(1, 6));
    auto xt = oracle::random_tensor({n, cin, h, w}, rng);
    auto wt = oracle::random_tensor({cin, cout, k, k}, rng);
    auto bt = oracle::random_tensor({cout}, rng);
    auto y = conv_transpose2d<double>(constant(xt), constant(wt), constant(bt), stride, pad);
    convt = std::max(convt, oracle::max_abs_diff(y->value, oracle::conv_transpose2d(xt, wt, &bt, stride, pad)));
  }
  int vis_ok = 0;
  for (int scene = 0; scene < 20; ++scene) {
    OgmFrame f(32, 32, 0.2);
    const double density = rng.uniform(0.02, 0.15);
    for (auto& v : f.values()) v = rng.uniform() < density ? 1.0f : 0.0f;
    const double half = scene % 2 ? std::numbers::pi / 4 : rng.uniform(0.3, 1.5);
    vis_ok += raycast_visibility(f, half) == oracle::raymarch_visibility(f, half);
  }
  Outcome o;
  o.pass = conv < 1e-12 && pool < 1e-12 && convt < 1e-12 && vis_ok == 20;
  o.detail = fmt("max |diff| conv2d %.1e, maxpool %.1e, conv_transpose %.1e; visibility %d/20 exact", conv, pool, convt, vis_ok);
  return o;
}

// ---------------------------------------------------------------- 3

OgmFrame shifted(const OgmFrame& in, int dr, int dc) {
  OgmFrame out(in.height(), in.width(), in.cell_size());
  for (int r = 0; r < in.height(); ++r)
    for (int c = 0; c < in.width(); ++c) {
      const int sr = r - dr, sc = c - dc;
      if (sr >= 0 && sc >= 0 && sr < in.height() && sc < in.width()) out(r, c) = in(sr, sc);
    }
  return out;
}

Outcome geometry_exactness() {
  constexpr double cs = 0.2;
  Rng rng(301);
  int identity_bad = 0, shift_bad = 0, shift_total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    OgmFrame f(static_cast<int>(rng.uniform_int(6, 20)), static_cast<int>(rng.uniform_int(6, 20)), cs);
    for (auto& v : f.values()) v = static_cast<float>(rng.uniform());
    const Pose2 p = Pose2::make(rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(-3, 3));
    for (auto interp : {Interpolation::nearest, Interpolation::bilinear}) identity_bad += !(warp_to_frame(f, p, p, interp) == f);
    for (int dr = -4; dr <= 4; ++dr)
      for (int dc = -4; dc <= 4; ++dc)
        for (auto interp : {Interpolation::nearest, Interpolation::bilinear}) {
          ++shift_total;
          shift_bad += !(warp_to_frame(f, {0, 0, 0}, {dr * cs, dc * cs, 0.0}, interp) == shifted(f, dr, dc));
        }
  }

  // Static world seen by an ego moving forward every step and sideways every other step.
  const int h = 32, w = 28, t = 10, tau = 6, m = 2 * t;
  OgmFrame world(h + 2 * m, w + 2 * m, cs);
  for (auto& v : world.values()) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;
  OgmSequence seq;
  seq.tau_init = tau;
  for (int k = 0; k < t; ++k) {
    const int fwd = k, left = k / 2;
    OgmFrame f(h, w, cs);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) f(r, c) = world(r - fwd + m, c - left + m);
    seq.frames.push_back(f);
    seq.poses.push_back({fwd * cs, left * cs, 0.0});
    seq.visibility.emplace_back(h, w, 1);
  }
  const auto al = align_sequence(seq);
  BinaryMask overlap(h, w, 1);
  for (const auto& v : al.visibility)
    for (std::size_t i = 0; i < overlap.size(); ++i) overlap.bits()[i] &= v.bits()[i];
  long mismatched = 0;
  for (int k = 1; k < t; ++k)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        if (overlap(r, c) && al.frames[k](r, c) != al.frames[0](r, c)) ++mismatched;

  Outcome o;
  o.pass = identity_bad == 0 && shift_bad == 0 && mismatched == 0 && overlap.count() > 0;
  o.detail = fmt("identity warps %d/40 exact, integer shifts %d/%d exact, aligned overlap %zu cells with %ld mismatches",
                 40 - identity_bad, shift_total - shift_bad, shift_total, overlap.count(), mismatched);
  return o;
}

// ---------------------------------------------------------------- 4

OgmFrame blob(int n, double r0, double c0) {
  OgmFrame f(n, n, 0.2);
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c) {
      const double d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
      f(r, c) = static_cast<float>(std::exp(-d2 / 18.0));
    }
  return f;
}

Outcome flow_accuracy() {
  constexpr int n = 48;
  double worst = 0.0;
  for (const auto& [dr, dc] : {std::pair{0, 2}, std::pair{0, -2}, std::pair{2, 0}, std::pair{-2, 0}}) {
    const auto a = blob(n, 24 - dr / 2.0, 24 - dc / 2.0), b = blob(n, 24 + dr / 2.0, 24 + dc / 2.0);
    const auto mf = farneback_flow(a, b);
    double sx = 0, sy = 0;
    int cnt = 0;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < n; ++c)
        if (a(r, c) > 0.1f || b(r, c) > 0.1f) sx += mf.c0(r, c), sy += mf.c1(r, c), ++cnt;
    worst = std::max({worst, std::abs(sx / cnt - dc), std::abs(sy / cnt - dr)});
  }
  Rng rng(401);
  OgmFrame random(n, n, 0.2);
  for (auto& v : random.values()) v = rng.uniform() < 0.2 ? 1.0f : 0.0f;
  long nonzero = 0;
  for (const auto& f : {blob(n, 24, 24), random}) {
    const auto mf = farneback_flow(f, f);
    for (float v : mf.channel0) nonzero += v != 0.0f;
    for (float v : mf.channel1) nonzero += v != 0.0f;
  }
  Outcome o;
  o.pass = worst < 0.3 && nonzero == 0;
  o.detail = fmt("worst mean-flow error %.2e cells over 4 directions; zero shift gives %ld nonzero flow cells", worst, nonzero);
  return o;
}

// ---------------------------------------------------------------- 5

Outcome loss_analytics() {
  Rng rng(501);
  double ce = 0.0, ss = 0.0, hand = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    OgmFrame target(16, 16, 0.2), half(16, 16, 0.2), x(16, 16, 0.2);
    for (auto& v : target.values()) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;
    target(0, 0) = 1.0f;
    target(0, 1) = 0.0f;
    for (auto& v : half.values()) v = 0.5f;
    for (auto& v : x.values()) v = static_cast<float>(rng.uniform());
    ce = std::max(ce, std::abs(balanced_masked_ce(half, target, BinaryMask(16, 16, 1), 1e-7) - std::numbers::ln2));
    for (int scales = 1; scales <= 3; ++scales) ss = std::max(ss, std::abs(ms_ssim(x, x, scales) - 1.0));
  }
  for (const LossConfig cfg : {LossConfig{}, LossConfig{0.7, 0.3, 0.5, 1e-7, 2}, LossConfig{1.0, 0.1, 0.1, 1e-7, 1}}) {
    const auto h = oracle::hand_loss_instance(cfg);
    hand = std::max(hand, std::abs(total_loss(h.trace, h.seq, cfg, true)->value[0] - h.expected));
  }
  Outcome o;
  o.pass = ce <= 1e-12 && ss <= 1e-12 && hand <= 1e-10;
  o.detail = fmt("|CE - ln2| %.1e, |SSIM(x,x) - 1| %.1e, hand instance |diff| %.1e", ce, ss, hand);
  return o;
}

// ---------------------------------------------------------------- 6, 7

std::vector<OgmSequence> dataset(std::uint64_t seed, int count) {
  DatasetSpec d;
  d.base.seed = seed;
  d.count = count;
  std::vector<OgmSequence> out;
  for (auto& s : generate_dataset(d)) out.push_back(align_sequence(s.sequence));
  return out;
}

struct Trained {
  EvalReport report;
  std::vector<double> curve;
  double seconds = 0.0;
  double comp_ratio = 0.0;
};

constexpr double kBudgetS = 1800.0;
constexpr int kEpochs = 30;
constexpr int kChannels = 16;

Trained train_and_eval(Family fam, ConfigKind cfg, const std::vector<OgmSequence>& train_set,
                       const std::vector<OgmSequence>& test_set) {
  Model<float> m(ModelConfig::row(fam, cfg, 64, 64, kChannels), 3);
  TrainConfig tc;
  tc.epochs = kEpochs;
  tc.time_budget_s = kBudgetS;
  nn::AdamConfig ac;
  ac.lr = 1e-3;
  Trained out;
  const auto start = Clock::now();
  out.curve = train(m, train_set, tc, LossConfig{}, ac, [&](int e, double l) {
                std::cerr << fmt("  %s/%s epoch %d mean loss %.4f (%.0f s)\n", to_string(fam), to_string(cfg), e + 1, l,
                                 seconds_since(start));
              }).epoch_loss;
  out.seconds = seconds_since(start);
  out.report = evaluate(m, test_set);
  if (!m.config().is_diff()) return out;
  // Mean |comp| over cells that hold a dynamic object before or after the
  // step, against visible cells of the static world.
  double dyn = 0, stat = 0;
  long nd = 0, ns = 0;
  for (const auto& seq : test_set) {
    const auto r = rollout(m, seq);
    for (int s = 0; s + 1 < seq.length(); ++s) {
      const auto& comp = (*r.comps)[s].values;
      const auto& o0 = (*seq.object_masks)[s].bits();
      const auto& o1 = (*seq.object_masks)[s + 1].bits();
      const auto& vis = seq.visibility[s + 1].bits();
      for (std::size_t i = 0; i < comp.size(); ++i) {
        if (o0[i] || o1[i]) dyn += std::abs(comp[i]), ++nd;
        else if (vis[i]) stat += std::abs(comp[i]), ++ns;
      }
    }
  }
  out.comp_ratio = (dyn / nd) / (stat / ns);
  return out;
}

// ---------------------------------------------------------------- 8, 9

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::string cli_exe() {
  if (const char* e = std::getenv("OGMPRED_CLI")) return e;
#ifdef OGMPRED_CLI
  return OGMPRED_CLI;
#else
  throw std::runtime_error("OGMPRED_CLI is not set");
#endif
}

int run_cli(const std::string& args, const fs::path& log) {
  const int status = std::system(("\"" + cli_exe() + "\" " + args + " > \"" + log.string() + "\" 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

/// Runs every subcommand into `dir`; returns the failing command or "".
std::string cli_pipeline(const fs::path& dir, const fs::path& config, const fs::path& scans) {
  fs::create_directories(dir);
  const std::string g = "--config \"" + config.string() + "\" --seed 7 --threads 1 ";
  const auto d = dir.string();
  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"simulate", "simulate --out " + d + "/data"},
      {"ingest", "ingest --scans " + scans.string() + " --poses " + scans.string() + "/poses.txt --grid-y 64 --grid-x 64 --out " +
                     d + "/ingested.ogms"},
      {"train", "train --data " + d + "/data --checkpoint " + d + "/m.gckp --loss-curve " + d + "/curve.csv"},
      {"predict", "predict --data " + d + "/data --checkpoint " + d + "/m.gckp --out " + d + "/pred"},
      {"eval", "eval --data " + d + "/data --checkpoint " + d + "/m.gckp --out " + d + "/report.json"},
      {"eval --baseline", "eval --baseline --data " + d + "/data --out " + d + "/baseline.json"},
      {"flow", "flow --data " + d + "/data/seq_0000.ogms --frame 2 --out " + d + "/fl"},
      {"export", "export --data " + d + "/data/seq_0000.ogms --checkpoint " + d + "/m.gckp --out " + d + "/export"},
  };
  for (const auto& [name, args] : cmds)
    if (run_cli(g + args, dir.parent_path() / (dir.filename().string() + ".log")) != 0) return name;
  return "";
}

std::map<std::string, std::string> artifacts(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto bytes = slurp(e.path());
    if (e.path().extension() == ".json" && e.path().filename().string().find("report") != std::string::npos) {
      auto j = nlohmann::json::parse(bytes);
      j["t_per_frame_ms"] = 0;  // wall-clock measurement, not an artifact of the computation
      bytes = j.dump();
    }
    out[fs::relative(e.path(), dir).string()] = std::move(bytes);
  }
  return out;
}

Outcome determinism(const fs::path& work) {
  const auto root = work / "determinism";
  fs::remove_all(root);
  fs::create_directories(root / "scans");
  std::ofstream(root / "config.json") << R"({
  "scene": {"height": 32, "width": 32, "frames": 6, "tau_init": 3, "count": 3, "n_static": [1, 2], "n_dynamic": [1, 1]},
  "model": {"family": "Diff2", "cfg": "Ext2", "channels": 4},
  "train": {"epochs": 2}
})";
  Rng rng(801);
  std::ofstream poses(root / "scans" / "poses.txt");
  for (int k = 0; k < 4; ++k) {
    PointCloud cloud;
    for (int i = 0; i < 2000; ++i) cloud.points.push_back({rng.uniform(0, 14), rng.uniform(-7, 7), rng.uniform(-2, 3)});
    write_point_cloud(root / "scans" / fmt("%06d.bin", k), cloud, 4);
    poses << 0.4 * k << " " << 0.1 * k << " 0\n";
  }
  poses.close();

  Outcome o;
  for (const char* run : {"run_a", "run_b"}) {
    const auto failed = cli_pipeline(root / run, root / "config.json", root / "scans");
    if (!failed.empty()) {
      o.pass = false;
      o.detail = std::string(run) + ": command '" + failed + "' failed";
      return o;
    }
  }
  const auto a = artifacts(root / "run_a"), b = artifacts(root / "run_b");
  std::vector<std::string> diffs;
  for (const auto& [name, bytes] : a)
    if (!b.contains(name) || b.at(name) != bytes) diffs.push_back(name);
  for (const auto& [name, _] : b)
    if (!a.contains(name)) diffs.push_back(name);
  o.pass = diffs.empty() && !a.empty();
  o.detail = fmt("8 commands, %zu artifacts compared, %zu differ", a.size(), diffs.size());
  for (std::size_t i = 0; i < std::min<std::size_t>(diffs.size(), 5); ++i) o.detail += " " + diffs[i];
  return o;
}

Outcome timing(const fs::path& work) {
  const auto test_set = dataset(2, 20);
  Outcome o;
  std::string detail;
  bool positive = true;
  for (auto fam : {Family::ED, Family::ED_Di, Family::Diff1, Family::Diff2}) {
    double t[3];
    for (auto cfg : {ConfigKind::Base, ConfigKind::Ext1, ConfigKind::Ext2}) {
      const Model<float> m(ModelConfig::row(fam, cfg, 64, 64, kChannels), 3);
      double best = INFINITY;
      for (int rep = 0; rep < 3; ++rep) {
        const double tf = evaluate(m, test_set).t_per_frame_ms;
        positive = positive && tf > 0.0;
        best = std::min(best, tf);
      }
      t[static_cast<int>(cfg)] = best;
    }
    const auto [base, ext1, ext2] = std::tuple{t[0], t[1], t[2]};
    const bool ordered = base <= ext2 && ext2 <= ext1;
    o.pass = o.pass && ordered;
    detail += fmt("%s %.2f/%.2f/%.2f%s; ", to_string(fam), base, ext2, ext1, ordered ? "" : " (out of order)");
  }
  // The CLI report is the user-facing timing.
  const auto cli_report = work / "determinism" / "run_a" / "report.json";
  double cli_t = 0.0;
  if (fs::exists(cli_report)) cli_t = nlohmann::json::parse(slurp(cli_report)).value("t_per_frame_ms", 0.0);
  o.pass = o.pass && positive && cli_t > 0.0;
  o.detail = "t/f ms Base/Ext2/Ext1: " + detail + fmt("eval CLI t_per_frame %.3f ms", cli_t);
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app("Acceptance criteria");
  std::string workdir = (fs::temp_directory_path() / "ogmpred_acceptance").string();
  std::vector<int> only;
  app.add_option("--workdir", workdir, "Scratch directory")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria (default: all)");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(workdir);
  fs::create_directories(work);
  const auto wanted = [&](int k) { return only.empty() || std::ranges::find(only, k) != only.end(); };

  int failures = 0;
  auto report = [&](int k, const char* name, const Outcome& o) {
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << k << "] " << name << ": " << o.detail << std::endl;
    failures += !o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) {
    try {
      return f();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  if (wanted(1)) report(1, "gradient fidelity", guarded(gradient_fidelity));
  if (wanted(2)) report(2, "oracle equivalence", guarded(oracle_equivalence));
  if (wanted(3)) report(3, "geometry exactness", guarded(geometry_exactness));
  if (wanted(4)) report(4, "flow accuracy", guarded(flow_accuracy));
  if (wanted(5)) report(5, "loss analytics", guarded(loss_analytics));

  if (wanted(6) || wanted(7)) {
    std::vector<OgmSequence> train_set, test_set;
    std::optional<Trained> d2e2;
    Outcome o6 = guarded([&] {
      train_set = dataset(1, 200);
      test_set = dataset(2, 50);
      const auto base = evaluate_baseline(test_set);
      d2e2 = train_and_eval(Family::Diff2, ConfigKind::Ext2, train_set, test_set);
      const auto& r = d2e2->report;
      const double tp = r.prediction_seq_objects.tp, tp0 = base.prediction_seq_objects.tp, tn = r.prediction_seq.tn;
      Outcome o;
      o.pass = tp >= tp0 + 10.0 && tn >= 90.0 && d2e2->comp_ratio >= 3.0 && d2e2->seconds <= kBudgetS;
      o.detail = fmt("objects TP %.2f vs persistence %.2f (need +10), whole TN %.2f (need 90), comp ratio %.2f (need 3); "
                     "%zu epochs in %.0f s, loss %.4f -> %.4f",
                     tp, tp0, tn, d2e2->comp_ratio, d2e2->curve.size(), d2e2->seconds, d2e2->curve.front(), d2e2->curve.back());
      return o;
    });
    if (wanted(6)) report(6, "end-to-end learning", o6);
    if (wanted(7)) {
      report(7, "ordering", guarded([&] {
               if (!d2e2) throw std::runtime_error("Diff2/Ext2 run unavailable");
               const auto tp = [&](Family f, ConfigKind c) {
                 return train_and_eval(f, c, train_set, test_set).report.prediction_seq_objects.tp;
               };
               const double d2e = d2e2->report.prediction_seq_objects.tp;
               const double d2b = tp(Family::Diff2, ConfigKind::Base);
               const double d1e = tp(Family::Diff1, ConfigKind::Ext2);
               const double d1b = tp(Family::Diff1, ConfigKind::Base);
               Outcome o;
               o.pass = d2e >= d2b - 1.0 && d1e >= d1b - 1.0;
               o.detail = fmt("objects TP Diff2 Ext2 %.2f vs Base %.2f, Diff1 Ext2 %.2f vs Base %.2f", d2e, d2b, d1e, d1b);
               if (o.pass && (d2e < d2b || d1e < d1b)) o.detail += " (1-point grace used)";
               return o;
             }));
    }
  }

  if (wanted(8)) report(8, "determinism", guarded([&] { return determinism(work); }));
  if (wanted(9)) report(9, "timing harness", guarded([&] { return timing(work); }));

  std::cout << (failures ? "FAILED " : "ALL PASSED ") << failures << " failing criteria" << std::endl;
  return failures ? 1 : 0;
}

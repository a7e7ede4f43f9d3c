// ogmpred command-line tool: simulate | ingest | train | predict | eval | flow | export.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ogmpred/config.hpp"
#include "ogmpred/eval.hpp"
#include "ogmpred/flow.hpp"
#include "ogmpred/grid_io.hpp"
#include "ogmpred/lidar.hpp"
#include "ogmpred/train.hpp"

namespace fs = std::filesystem;
using namespace ogmpred;
using json = nlohmann::ordered_json;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kNumeric = 4 };

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  int threads = 1;
};

RunConfig effective_config(const Globals& g) {
  RunConfig rc = g.config.empty() ? RunConfig{} : load_run_config(g.config);
  if (g.seed) {
    rc.scene.base.seed = *g.seed;
    rc.train.seed = *g.seed;
  }
  if (g.threads < 1) throw ConfigError("--threads must be >= 1");
  rc.validate();
  return rc;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os << text;
  if (!os) throw DataError("write failed: " + path.string());
}

void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

std::string seq_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "seq_%04d", i);
  return buf;
}

/// A single .ogms file or every .ogms file of a directory, sorted by name.
std::vector<fs::path> dataset_files(const fs::path& p) {
  if (p.empty()) throw ConfigError("no data path given (--data or io.data)");
  if (!fs::exists(p)) throw DataError("no such file or directory: " + p.string());
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(p))
    if (e.is_regular_file() && e.path().extension() == ".ogms") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw DataError("no .ogms files in " + p.string());
  return files;
}

std::vector<OgmSequence> load_dataset(const fs::path& p, int tau_init) {
  std::vector<OgmSequence> out;
  for (const auto& f : dataset_files(p)) out.push_back(align_sequence(io::load_ogms(f, tau_init)));
  return out;
}

fs::path sidecar_of(const fs::path& checkpoint) { return fs::path(checkpoint.string() + ".json"); }

void save_model(const fs::path& path, const Model<float>& m, const RunConfig& rc) {
  ensure_parent(path);
  nn::save_checkpoint(path, nn::snapshot(m.parameters()));
  json j;
  j["model"] = model_config_json(m.config());
  j["train"] = run_config_json(rc)["train"];
  write_text(sidecar_of(path), j.dump(2) + "\n");
}

Model<float> load_model(const fs::path& path) {
  if (path.empty()) throw ConfigError("no checkpoint given (--checkpoint or io.checkpoint)");
  std::ifstream is(sidecar_of(path));
  if (!is) throw DataError("missing model sidecar: " + sidecar_of(path).string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(sidecar_of(path).string() + ": " + e.what());
  }
  if (!j.contains("model")) throw DataError(sidecar_of(path).string() + ": no model section");
  Model<float> m(model_config_from_json(j.at("model")), 0);
  nn::restore(m.parameters(), nn::load_checkpoint(path));
  return m;
}

std::string pick(const std::string& flag, const std::string& fallback) { return flag.empty() ? fallback : flag; }

// ---------------------------------------------------------------------------

int cmd_simulate(const Globals& g, const std::string& out, std::optional<int> frames, std::optional<int> count,
                 std::optional<int> tau_init) {
  RunConfig rc = effective_config(g);
  if (frames) rc.scene.base.frames = *frames;
  if (count) rc.scene.count = *count;
  if (tau_init) rc.scene.base.tau_init = *tau_init;
  rc.scene.validate();
  const fs::path dst = pick(out, rc.io.out);
  if (dst.empty()) throw ConfigError("simulate: no output path (--out or io.out)");
  if (rc.scene.count == 1) {
    ensure_parent(dst);
    const auto spec = dataset_scene_spec(rc.scene, 0);
    const auto scene = generate(spec);
    io::save_ogms(dst, scene.sequence);
    fs::path side = dst;
    write_text(side.replace_extension(".json"), scene_sidecar_json(spec, scene).dump(2) + "\n");
    return kOk;
  }
  fs::create_directories(dst);
  for (int i = 0; i < rc.scene.count; ++i) {
    const auto spec = dataset_scene_spec(rc.scene, i);
    const auto scene = generate(spec);
    io::save_ogms(dst / (seq_name(i) + ".ogms"), scene.sequence);
    write_text(dst / (seq_name(i) + ".json"), scene_sidecar_json(spec, scene).dump(2) + "\n");
  }
  return kOk;
}

struct IngestArgs {
  std::string scans, poses, out;
  int stride = 4;
  int tau_init = 0;
  BevConfig bev;
};

int cmd_ingest(const Globals& g, IngestArgs a) {
  const RunConfig rc = effective_config(g);
  a.bev.validate();
  if (a.scans.empty() || !fs::is_directory(a.scans)) throw DataError("ingest: --scans must be a directory of .bin scans");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.scans))
    if (e.is_regular_file() && e.path().extension() == ".bin") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.size() < 2) throw DataError("ingest: need at least 2 scans in " + a.scans);
  std::vector<Pose2> poses(files.size());
  if (!a.poses.empty()) {
    std::ifstream is(a.poses);
    if (!is) throw DataError("cannot open poses: " + a.poses);
    for (auto& p : poses) {
      double x, y, h;
      if (!(is >> x >> y >> h)) throw DataError(a.poses + ": expected one 'x y heading' line per scan");
      p = Pose2::make(x, y, h);
    }
  }
  OgmSequence seq;
  seq.tau_init = a.tau_init > 0 ? a.tau_init : rc.scene.base.tau_init;
  for (std::size_t k = 0; k < files.size(); ++k) {
    const auto frame = rasterize(read_point_cloud(files[k], a.stride), a.bev);
    seq.visibility.push_back(raycast_visibility(frame, a.bev));
    seq.frames.push_back(frame);
    seq.poses.push_back(poses[k]);
  }
  seq.tau_init = std::min(seq.tau_init, seq.length() - 1);
  const fs::path dst = pick(a.out, rc.io.out);
  if (dst.empty()) throw ConfigError("ingest: no output path (--out or io.out)");
  ensure_parent(dst);
  io::save_ogms(dst, seq);
  return kOk;
}

int cmd_train(const Globals& g, const std::string& data, const std::string& checkpoint, const std::string& curve,
              std::optional<int> epochs, bool quiet) {
  RunConfig rc = effective_config(g);
  if (epochs) rc.train.epochs = *epochs;
  rc.train.validate();
  const auto seqs = load_dataset(pick(data, rc.io.data), rc.scene.base.tau_init);
  ModelConfig mc = rc.model;
  mc.height = seqs.front().height();
  mc.width = seqs.front().width();
  mc.validate();
  Model<float> model(mc, rc.train.seed);
  const auto result = train(model, seqs, rc.train, rc.loss, rc.optimizer, [&](int e, double l) {
    if (!quiet) std::printf("epoch %d mean_loss %.6f\n", e + 1, l);
  });
  const fs::path ckpt = pick(checkpoint, rc.io.checkpoint);
  if (ckpt.empty()) throw ConfigError("train: no checkpoint path (--checkpoint or io.checkpoint)");
  save_model(ckpt, model, rc);
  if (!curve.empty()) {
    ensure_parent(curve);
    write_loss_curve(curve, result);
  }
  return kOk;
}

/// Predicted sequence: frame 0 as observed, frame k>0 the prediction of frame k.
OgmSequence predicted_sequence(const OgmSequence& seq, const RolloutOutput& out) {
  OgmSequence p = seq;
  for (int k = 1; k < seq.length(); ++k) p.frames[static_cast<std::size_t>(k)] = out.predicted[static_cast<std::size_t>(k - 1)];
  return p;
}

int cmd_predict(const Globals& g, const std::string& data, const std::string& checkpoint, const std::string& out) {
  const RunConfig rc = effective_config(g);
  const auto model = load_model(pick(checkpoint, rc.io.checkpoint));
  const fs::path src = pick(data, rc.io.data);
  const fs::path dst = pick(out, rc.io.out);
  if (dst.empty()) throw ConfigError("predict: no output path (--out or io.out)");
  const auto files = dataset_files(src);
  const bool many = fs::is_directory(src);
  if (many) fs::create_directories(dst);
  else ensure_parent(dst);
  for (const auto& f : files) {
    const auto seq = align_sequence(io::load_ogms(f, rc.scene.base.tau_init));
    const auto pred = predicted_sequence(seq, rollout(model, seq));
    io::save_ogms(many ? dst / f.filename() : dst, pred);
  }
  return kOk;
}

int cmd_eval(const Globals& g, const std::string& data, const std::string& checkpoint, const std::string& out,
             bool baseline) {
  const RunConfig rc = effective_config(g);
  const auto seqs = load_dataset(pick(data, rc.io.data), rc.scene.base.tau_init);
  EvalReport report;
  std::string label;
  if (baseline) {
    report = evaluate_baseline(seqs, rc.threshold);
    label = "persistence";
  } else {
    const auto model = load_model(pick(checkpoint, rc.io.checkpoint));
    report = evaluate(model, seqs, rc.threshold);
    label = std::string(to_string(model.config().family)) + "/" + to_string(model.config().cfg);
  }
  std::cout << report_table(report, label);
  const fs::path dst = pick(out, rc.io.out);
  if (!dst.empty()) {
    ensure_parent(dst);
    json j = report_json(report);
    j["model"] = label;
    write_text(dst, j.dump(2) + "\n");
  }
  return kOk;
}

std::vector<float> encode_flow(const std::vector<float>& d) {
  std::vector<float> v(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) v[i] = static_cast<float>(std::clamp(128.0 + 10.0 * d[i], 0.0, 255.0) / 255.0);
  return v;
}

void save_f32(const fs::path& path, const std::vector<float>& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path.string());
  os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
}

int cmd_flow(const Globals& g, const std::string& data, int frame, const std::string& prev_pgm,
             const std::string& curr_pgm, const std::string& out) {
  const RunConfig rc = effective_config(g);
  OgmFrame prev, curr;
  if (!prev_pgm.empty() || !curr_pgm.empty()) {
    if (prev_pgm.empty() || curr_pgm.empty()) throw ConfigError("flow: --prev and --curr go together");
    std::ifstream a(prev_pgm, std::ios::binary), b(curr_pgm, std::ios::binary);
    if (!a) throw DataError("cannot open " + prev_pgm);
    if (!b) throw DataError("cannot open " + curr_pgm);
    prev = io::read_pgm(a, rc.scene.base.cell_size);
    curr = io::read_pgm(b, rc.scene.base.cell_size);
  } else {
    const auto seq = io::load_ogms(pick(data, rc.io.data), rc.scene.base.tau_init);
    if (frame < 1 || frame >= seq.length()) throw ConfigError("flow: --frame must lie in [1, T-1]");
    prev = seq.frames[static_cast<std::size_t>(frame - 1)];
    curr = seq.frames[static_cast<std::size_t>(frame)];
  }
  const auto mf = farneback_flow(prev, curr, rc.model.flow);
  const std::string prefix = pick(out, rc.io.out);
  if (prefix.empty()) throw ConfigError("flow: no output prefix (--out or io.out)");
  ensure_parent(prefix);
  const int h = mf.height, w = mf.width;
  {
    auto os = std::ofstream(prefix + "_dx.pgm", std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + prefix + "_dx.pgm");
    io::write_pgm(os, h, w, encode_flow(mf.channel0));
  }
  {
    auto os = std::ofstream(prefix + "_dy.pgm", std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + prefix + "_dy.pgm");
    io::write_pgm(os, h, w, encode_flow(mf.channel1));
  }
  save_f32(prefix + "_dx.f32", mf.channel0);
  save_f32(prefix + "_dy.f32", mf.channel1);
  return kOk;
}

std::uint8_t byte(double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); }

std::vector<io::Rgb> gray(const OgmFrame& f) {
  std::vector<io::Rgb> px;
  for (float v : f.values()) px.push_back({byte(v), byte(v), byte(v)});
  return px;
}

std::vector<io::Rgb> signed_comp(const CompensationMatrix& c) {
  std::vector<io::Rgb> px;
  for (float v : c.values) px.push_back({byte(std::max(-v, 0.0f)), byte(std::max(v, 0.0f)), 0});
  return px;
}

/// TP green, FP blue, FN red, TN black, cells outside visibility dark gray.
std::vector<io::Rgb> comparison(const OgmFrame& pred, const OgmFrame& target, const BinaryMask& vis, double threshold) {
  std::vector<io::Rgb> px;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const bool p = pred.values()[i] >= threshold, t = target.values()[i] >= 0.5f;
    if (!vis.bits()[i]) px.push_back({64, 64, 64});
    else if (p && t) px.push_back({0, 255, 0});
    else if (p) px.push_back({0, 0, 255});
    else if (t) px.push_back({255, 0, 0});
    else px.push_back({0, 0, 0});
  }
  return px;
}

int cmd_export(const Globals& g, const std::string& data, const std::string& checkpoint, const std::string& out) {
  const RunConfig rc = effective_config(g);
  const auto seq = align_sequence(io::load_ogms(pick(data, rc.io.data), rc.scene.base.tau_init));
  const fs::path dir = pick(out, rc.io.out);
  if (dir.empty()) throw ConfigError("export: no output directory (--out or io.out)");
  fs::create_directories(dir);
  const int h = seq.height(), w = seq.width();
  char name[64];
  for (int k = 0; k < seq.length(); ++k) {
    std::snprintf(name, sizeof name, "frame_%02d.ppm", k);
    io::save_ppm(dir / name, h, w, gray(seq.frames[static_cast<std::size_t>(k)]));
  }
  const std::string ckpt = pick(checkpoint, rc.io.checkpoint);
  if (ckpt.empty()) return kOk;
  const auto model = load_model(ckpt);
  const auto r = rollout(model, seq);
  for (int s = 0; s + 1 < seq.length(); ++s) {
    const auto k = static_cast<std::size_t>(s + 1);
    const auto& pred = r.predicted[static_cast<std::size_t>(s)];
    std::snprintf(name, sizeof name, "pred_%02d.ppm", s + 1);
    io::save_ppm(dir / name, h, w, gray(pred));
    std::snprintf(name, sizeof name, "compare_%02d.ppm", s + 1);
    io::save_ppm(dir / name, h, w, comparison(pred, seq.frames[k], seq.visibility[k], rc.threshold));
    if (r.comps) {
      std::snprintf(name, sizeof name, "comp_%02d.ppm", s + 1);
      io::save_ppm(dir / name, h, w, signed_comp((*r.comps)[static_cast<std::size_t>(s)]));
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-step occupancy grid map prediction"};
  app.set_version_flag("--version", std::string("ogmpred ") + OGMPRED_VERSION);
  app.footer("Effective defaults (override with --config FILE; unknown keys are rejected):\n" +
             run_config_json(RunConfig{}).dump(2));
  app.fallthrough();
  Globals g;
  bool schema = false;
  app.add_option("--config", g.config, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Seed for scene generation and training");
  app.add_option("--threads", g.threads, "Worker threads; 1 gives bit-identical output")->capture_default_str();
  app.add_flag("--config-schema", schema, "Print the configuration schema as JSON and exit");

  auto* sim = app.add_subcommand("simulate", "Generate synthetic OGM sequences");
  std::string sim_out;
  std::optional<int> sim_frames, sim_count, sim_tau;
  sim->add_option("--out", sim_out, "Output .ogms file, or a directory when --count > 1");
  sim->add_option("--frames", sim_frames, "Frames per sequence (>= 2)");
  sim->add_option("--count", sim_count, "Number of sequences");
  sim->add_option("--tau-init", sim_tau, "Init-phase length");

  auto* ing = app.add_subcommand("ingest", "Rasterize a directory of lidar scans into an OGMS sequence");
  IngestArgs ia;
  ing->add_option("--scans", ia.scans, "Directory of .bin scans, read in name order")->required();
  ing->add_option("--poses", ia.poses, "Text file with one 'x y heading' line per scan");
  ing->add_option("--out", ia.out, "Output .ogms file");
  ing->add_option("--stride", ia.stride, "Floats per point: 4 (x,y,z,reflectance) or 3")->capture_default_str();
  ing->add_option("--tau-init", ia.tau_init, "Init-phase length (default: scene.tau_init)");
  ing->add_option("--cell-size", ia.bev.cell_size, "Cell edge in meters")->capture_default_str();
  ing->add_option("--grid-y", ia.bev.grid_y, "Grid width in cells")->capture_default_str();
  ing->add_option("--grid-x", ia.bev.grid_x, "Grid height in cells")->capture_default_str();
  ing->add_option("--z-min", ia.bev.z_min, "Lower edge of the kept height slab")->capture_default_str();
  ing->add_option("--z-max", ia.bev.z_max, "Upper edge of the kept height slab")->capture_default_str();
  ing->add_option("--fov", ia.bev.fov_half_angle, "Half opening angle in radians")->capture_default_str();

  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint");
  std::string tr_data, tr_ckpt, tr_curve;
  std::optional<int> tr_epochs;
  bool tr_quiet = false;
  trn->add_option("--data", tr_data, "Training .ogms file or directory");
  trn->add_option("--checkpoint", tr_ckpt, "Output checkpoint (a .json sidecar is written next to it)");
  trn->add_option("--loss-curve", tr_curve, "CSV with the mean loss per epoch");
  trn->add_option("--epochs", tr_epochs, "Override train.epochs");
  trn->add_flag("--quiet", tr_quiet, "No per-epoch output");

  auto* prd = app.add_subcommand("predict", "Roll a trained model through sequences");
  std::string pr_data, pr_ckpt, pr_out;
  prd->add_option("--data", pr_data, "Input .ogms file or directory");
  prd->add_option("--checkpoint", pr_ckpt, "Trained checkpoint");
  prd->add_option("--out", pr_out, "Output .ogms file or directory");

  auto* evl = app.add_subcommand("eval", "Score a model or the persistence baseline");
  std::string ev_data, ev_ckpt, ev_out;
  bool ev_base = false;
  evl->add_option("--data", ev_data, "Test .ogms file or directory");
  evl->add_option("--checkpoint", ev_ckpt, "Trained checkpoint");
  evl->add_option("--out", ev_out, "JSON report");
  evl->add_flag("--baseline", ev_base, "Score the persistence baseline instead of a model");

  auto* flw = app.add_subcommand("flow", "Dense optical flow between two frames");
  std::string fl_data, fl_prev, fl_curr, fl_out;
  int fl_frame = 1;
  flw->add_option("--data", fl_data, ".ogms sequence");
  flw->add_option("--frame", fl_frame, "Flow from frame k-1 to frame k")->capture_default_str();
  flw->add_option("--prev", fl_prev, "Earlier frame as PGM (instead of --data)");
  flw->add_option("--curr", fl_curr, "Later frame as PGM (instead of --data)");
  flw->add_option("--out", fl_out, "Output prefix: PREFIX_dx.pgm, PREFIX_dy.pgm, PREFIX_dx.f32, PREFIX_dy.f32");

  auto* exp = app.add_subcommand("export", "Render frames, predictions and compensation matrices as PPM");
  std::string ex_data, ex_ckpt, ex_out;
  exp->add_option("--data", ex_data, ".ogms sequence");
  exp->add_option("--checkpoint", ex_ckpt, "Trained checkpoint (optional)");
  exp->add_option("--out", ex_out, "Output directory");

  app.require_subcommand(0, 1);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (schema) {
      std::cout << config_schema().dump(2) << "\n";
      return kOk;
    }
    if (*sim) return cmd_simulate(g, sim_out, sim_frames, sim_count, sim_tau);
    if (*ing) return cmd_ingest(g, ia);
    if (*trn) return cmd_train(g, tr_data, tr_ckpt, tr_curve, tr_epochs, tr_quiet);
    if (*prd) return cmd_predict(g, pr_data, pr_ckpt, pr_out);
    if (*evl) return cmd_eval(g, ev_data, ev_ckpt, ev_out, ev_base);
    if (*flw) return cmd_flow(g, fl_data, fl_frame, fl_prev, fl_curr, fl_out);
    if (*exp) return cmd_export(g, ex_data, ex_ckpt, ex_out);
    std::cerr << app.help();
    return kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericFault& e) {
    std::cerr << "numeric fault: " << e.what() << "\n";
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  }
}

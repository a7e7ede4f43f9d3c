#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ogmpred/eval.hpp"
#include "ogmpred/loss.hpp"
#include "ogmpred/train.hpp"
#include "oracles.hpp"

using namespace ogmpred;

namespace {

OgmFrame random_frame(int h, int w, Rng& rng, bool binary) {
  OgmFrame f(h, w, 0.2);
  for (auto& v : f.values()) v = binary ? (rng.uniform() < 0.3 ? 1.0f : 0.0f) : static_cast<float>(rng.uniform());
  return f;
}

std::vector<double> as_doubles(const OgmFrame& f) { return {f.values().begin(), f.values().end()}; }

OgmSequence random_sequence(int h, int w, int frames, int tau, std::uint64_t seed) {
  Rng rng(seed);
  OgmSequence seq;
  seq.tau_init = tau;
  seq.object_masks.emplace();
  for (int k = 0; k < frames; ++k) {
    seq.frames.push_back(random_frame(h, w, rng, true));
    seq.poses.push_back({});
    seq.visibility.emplace_back(h, w, 1);
    seq.object_masks->emplace_back(h, w, 0);
  }
  return seq;
}

/// 16x16, four frames, tau_init 2: a static wall on row 2, a 2x2 box moving
/// one column per frame from column 3, and column 15 out of view.
OgmSequence counted_sequence() {
  OgmSequence seq;
  seq.tau_init = 2;
  seq.object_masks.emplace();
  for (int k = 0; k < 4; ++k) {
    OgmFrame f(16, 16, 0.2);
    BinaryMask obj(16, 16), vis(16, 16, 1);
    for (int c = 0; c < 16; ++c) f(2, c) = 1.0f;
    for (int r = 8; r < 10; ++r)
      for (int c = k + 3; c < k + 5; ++c) {
        f(r, c) = 1.0f;
        obj(r, c) = 1;
      }
    for (int r = 0; r < 16; ++r) vis(r, 15) = 0;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c)
        if (!vis(r, c)) f(r, c) = 0.0f;
    seq.frames.push_back(f);
    seq.poses.push_back({});
    seq.visibility.push_back(vis);
    seq.object_masks->push_back(obj);
  }
  return seq;
}

}  // namespace

TEST(BalancedCe, UniformHalfIsLn2) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    auto target = random_frame(16, 16, rng, true);
    target(0, 0) = 1.0f;
    target(0, 1) = 0.0f;
    OgmFrame half(16, 16, 0.2);
    for (auto& v : half.values()) v = 0.5f;
    EXPECT_NEAR(balanced_masked_ce(half, target, BinaryMask(16, 16, 1), 1e-7), std::numbers::ln2, 1e-12);
  }
}

TEST(BalancedCe, PerfectAndOccluded) {
  Rng rng(2);
  const auto target = random_frame(8, 8, rng, true);
  EXPECT_LE(balanced_masked_ce(target, target, BinaryMask(8, 8, 1), 1e-7), -std::log(1 - 1e-7) + 1e-15);
  EXPECT_EQ(balanced_masked_ce(random_frame(8, 8, rng, false), target, BinaryMask(8, 8, 0), 1e-7), 0.0);
  EXPECT_THROW(balanced_masked_ce(target, OgmFrame(8, 9, 0.2), BinaryMask(8, 8, 1), 1e-7), ShapeError);
}

TEST(BalancedCe, AbsentClassContributesZero) {
  OgmFrame target(4, 4, 0.2), pred(4, 4, 0.2);
  for (auto& v : pred.values()) v = 0.25f;
  EXPECT_NEAR(balanced_masked_ce(pred, target, BinaryMask(4, 4, 1), 1e-7), 0.5 * -std::log(0.75), 1e-12);
}

TEST(BalancedCe, InvariantToOccludedCellsAndLabelSwap) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto target = random_frame(12, 12, rng, true);
    const auto pred = random_frame(12, 12, rng, false);
    BinaryMask vis(12, 12, 1);
    for (auto& b : vis.bits()) b = rng.uniform() < 0.7 ? 1 : 0;
    const double base = balanced_masked_ce(pred, target, vis, 1e-7);

    auto pred2 = pred, target2 = target;
    for (std::size_t i = 0; i < vis.size(); ++i)
      if (!vis.bits()[i]) {
        pred2.values()[i] = static_cast<float>(rng.uniform());
        target2.values()[i] = rng.uniform() < 0.5 ? 1.0f : 0.0f;
      }
    EXPECT_EQ(balanced_masked_ce(pred2, target2, vis, 1e-7), base);

    auto flipped_pred = pred, flipped_target = target;
    for (auto& v : flipped_pred.values()) v = 1.0f - v;
    for (auto& v : flipped_target.values()) v = 1.0f - v;
    EXPECT_NEAR(balanced_masked_ce(flipped_pred, flipped_target, vis, 1e-7), base, 1e-6);
  }
}

TEST(BalancedCe, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  const auto target = random_frame(8, 8, rng, true);
  BinaryMask vis(8, 8, 1);
  vis(0, 0) = 0;
  auto p = nn::parameter(oracle::random_tensor({1, 1, 8, 8}, rng, 0.05, 0.95));
  const auto r = oracle::check_gradients({p}, [&] { return balanced_masked_ce<double>(p, target, vis, 1e-7); }, 64, rng);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(Ssim, IdenticalFramesGiveOne) {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = random_frame(16, 16, rng, trial % 2 == 0);
    for (int scales = 1; scales <= 3; ++scales) EXPECT_NEAR(ms_ssim(x, x, scales), 1.0, 1e-12);
  }
}

TEST(Ssim, ConstantFramesClosedForm) {
  OgmFrame zeros(16, 16, 0.2), ones(16, 16, 0.2);
  for (auto& v : ones.values()) v = 1.0f;
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(zeros, ones), c1 / (1.0 + c1), 1e-12);
}

TEST(Ssim, SymmetricBoundedAndMatchesOracle) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_frame(16, 16, rng, false), b = random_frame(16, 16, rng, trial % 2 == 0);
    for (int scales = 1; scales <= 3; ++scales) {
      const double s = ms_ssim(a, b, scales);
      EXPECT_NEAR(s, ms_ssim(b, a, scales), 1e-12);
      EXPECT_LE(s, 1.0);
      EXPECT_LT(s, 1.0 - 1e-12);
      EXPECT_NEAR(s, oracle::ms_ssim(as_doubles(a), as_doubles(b), 16, 16, scales), 1e-12);
    }
  }
  EXPECT_THROW(ms_ssim(OgmFrame(6, 6, 0.2), OgmFrame(6, 6, 0.2), 3), ShapeError);
  EXPECT_THROW(ms_ssim(OgmFrame(8, 8, 0.2), OgmFrame(8, 8, 0.2), 0), ConfigError);
}

TEST(Ssim, SmallFramesShrinkTheWindow) {
  Rng rng(7);
  const auto a = random_frame(6, 8, rng, false), b = random_frame(6, 8, rng, false);
  EXPECT_NEAR(ssim(a, b), oracle::ms_ssim(as_doubles(a), as_doubles(b), 6, 8, 1), 1e-12);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  Rng rng(8);
  const auto target = frame_to_var<double>(random_frame(16, 16, rng, true));
  auto p = nn::parameter(oracle::random_tensor({1, 1, 16, 16}, rng, 0.1, 0.9));
  const auto r = oracle::check_gradients({p}, [&] { return ms_ssim<double>(p, target, 3); }, 64, rng);
  EXPECT_LT(r.max_rel_error, 1e-6);
}

TEST(TotalLoss, HandInstance) {
  for (const LossConfig cfg : {LossConfig{}, LossConfig{0.7, 0.3, 0.5, 1e-7, 2}, LossConfig{1.0, 0.1, 0.1, 1e-7, 1}}) {
    const auto h = oracle::hand_loss_instance(cfg);
    EXPECT_NEAR(total_loss(h.trace, h.seq, cfg, true)->value[0], h.expected, 1e-10);
  }
}

TEST(TotalLoss, EdFamilyIsCrossEntropyOnly) {
  LossConfig cfg;
  const auto h = oracle::hand_loss_instance(cfg);
  double ce = 0.0;
  for (int s = 0; s < 2; ++s) ce += balanced_masked_ce<double>(h.trace[s].prob, h.seq.frames[s + 1], h.seq.visibility[s + 1], cfg.eps)->value[0];
  EXPECT_NEAR(total_loss(h.trace, h.seq, cfg, false)->value[0], ce / 2, 1e-12);

  auto no_comp = h.trace;
  for (auto& st : no_comp) st.comp = nullptr;
  EXPECT_THROW(total_loss(no_comp, h.seq, cfg, true), ContractError);
  EXPECT_THROW(total_loss(h.trace, h.seq, cfg, true, 2), ContractError);
}

TEST(TotalLoss, ZeroCompensationHasNoL2Term) {
  auto h = oracle::hand_loss_instance(LossConfig{});
  for (auto& st : h.trace) st.comp = nn::constant(nn::Tensor<double>({1, 1, 4, 4}));
  LossConfig heavy;
  heavy.lambda_l2 = 50.0;
  EXPECT_EQ(total_loss(h.trace, h.seq, heavy, true)->value[0], total_loss(h.trace, h.seq, LossConfig{}, true)->value[0]);
}

TEST(TotalLoss, GradientThroughDiff1Model) {
  Model<double> m(ModelConfig::row(Family::Diff1, ConfigKind::Ext2, 16, 16, 4), 3);
  const auto seq = random_sequence(16, 16, 4, 2, 9);
  std::vector<nn::Var<double>> params;
  Rng rng(10);
  // Zero biases put every empty patch exactly on a relu kink; move off it.
  for (const auto& [_, p] : m.parameters().items()) {
    params.push_back(p);
    for (auto& v : p->value.values()) v += rng.uniform(-0.05, 0.05);
  }
  const auto r = oracle::check_gradients(
      params, [&] { return total_loss(rollout_trace(m, seq, InputMode::feedback), seq, LossConfig{}, true); }, 100, rng);
  EXPECT_EQ(r.checked, 100);
  EXPECT_LT(r.max_rel_error, 1e-3);
}

TEST(Evaluate, PerfectAndInvertedPredictions) {
  const auto seq = counted_sequence();
  std::vector<OgmFrame> perfect(seq.frames.begin() + 1, seq.frames.end()), inverted = perfect;
  for (auto& f : inverted)
    for (auto& v : f.values()) v = 1.0f - v;
  const auto p = evaluate_predictions({seq}, {perfect});
  EXPECT_DOUBLE_EQ(p.whole_seq.tp, 100.0);
  EXPECT_DOUBLE_EQ(p.whole_seq.tn, 100.0);
  EXPECT_NEAR(p.whole_seq.s100, 100.0, 1e-9);
  EXPECT_DOUBLE_EQ(p.prediction_seq_objects.tp, 100.0);
  const auto q = evaluate_predictions({seq}, {inverted});
  EXPECT_DOUBLE_EQ(q.whole_seq.tp, 0.0);
  EXPECT_DOUBLE_EQ(q.whole_seq.tn, 0.0);
  EXPECT_DOUBLE_EQ(q.prediction_seq.tp, 0.0);
}

TEST(Evaluate, BaselineMatchesHandCount) {
  // Visible wall: 15 cells; box: 4 cells, one column of overlap per frame of motion.
  const auto r = evaluate_baseline({counted_sequence()});
  EXPECT_DOUBLE_EQ(r.whole_seq.tp, 100.0 * 49 / 57);
  EXPECT_DOUBLE_EQ(r.whole_seq.tn, 100.0 * (219 + 219 + 217) / 663);
  EXPECT_DOUBLE_EQ(r.prediction_seq.tp, 100.0 * 32 / 38);
  EXPECT_DOUBLE_EQ(r.prediction_seq.tn, 100.0 * (219 + 217) / 442);
  EXPECT_DOUBLE_EQ(r.prediction_seq_objects.tp, 25.0);
  EXPECT_DOUBLE_EQ(r.prediction_seq_objects.tn, 100.0);
  EXPECT_DOUBLE_EQ(r.whole_seq_objects.tp, 100.0 * 4 / 12);
  EXPECT_EQ(r.sequences, 1);
}

TEST(Evaluate, RatesIgnoreCellsOfTheOtherClass) {
  Rng rng(11);
  const auto target = random_frame(16, 16, rng, true);
  const auto pred = random_frame(16, 16, rng, false);
  BinaryMask all(16, 16, 1);
  Confusion a;
  accumulate(a, pred, target, all, 0.5);
  // Growing the free region only: add free cells as a second frame with empty target.
  Confusion b = a;
  OgmFrame empty(16, 16, 0.2);
  accumulate(b, pred, empty, all, 0.5);
  EXPECT_EQ(a.metrics().tp, b.metrics().tp);
  Confusion c = a;
  OgmFrame full(16, 16, 0.2);
  for (auto& v : full.values()) v = 1.0f;
  accumulate(c, pred, full, all, 0.5);
  EXPECT_EQ(a.metrics().tn, c.metrics().tn);
}

TEST(Evaluate, ReportsAndErrors) {
  EXPECT_THROW(evaluate_baseline({}), DataError);
  const auto r = evaluate_baseline({counted_sequence()});
  const auto j = report_json(r);
  EXPECT_TRUE(j.contains("whole_seq"));
  EXPECT_TRUE(j.contains("t_per_frame_ms"));
  const auto table = report_table(r, "baseline");
  EXPECT_NE(table.find("baseline"), std::string::npos);
  EXPECT_NE(table.find("Objects only"), std::string::npos);

  const Model<float> m(ModelConfig::row(Family::ED, ConfigKind::Base, 16, 16, 4), 1);
  const auto e = evaluate(m, {counted_sequence()});
  EXPECT_GT(e.t_per_frame_ms, 0.0);
  EXPECT_THROW(evaluate(m, {counted_sequence()}, 1.0), ContractError);
}

TEST(Train, ZeroEpochsKeepsInitialization) {
  Model<float> m(ModelConfig::row(Family::Diff2, ConfigKind::Ext2, 16, 16, 4), 4);
  const auto before = nn::snapshot(m.parameters());
  TrainConfig tc;
  tc.epochs = 0;
  const auto r = train(m, {random_sequence(16, 16, 5, 3, 1)}, tc, LossConfig{}, nn::AdamConfig{});
  EXPECT_TRUE(r.epoch_loss.empty());
  EXPECT_EQ(nn::snapshot(m.parameters()), before);
}

TEST(Train, SameSeedSameCurveAndLossDrops) {
  const std::vector<OgmSequence> data{random_sequence(16, 16, 5, 3, 1), random_sequence(16, 16, 5, 3, 2)};
  TrainConfig tc;
  tc.epochs = 3;
  tc.seed = 5;
  nn::AdamConfig ac;
  ac.lr = 3e-3;
  Model<float> a(ModelConfig::row(Family::Diff1, ConfigKind::Ext2, 16, 16, 4), 4), b(a.config(), 4);
  const auto ra = train(a, data, tc, LossConfig{}, ac);
  const auto rb = train(b, data, tc, LossConfig{}, ac);
  EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
  std::ostringstream ca, cb;
  nn::write_checkpoint(ca, nn::snapshot(a.parameters()));
  nn::write_checkpoint(cb, nn::snapshot(b.parameters()));
  EXPECT_EQ(ca.str(), cb.str());
  EXPECT_LT(ra.epoch_loss.back(), ra.epoch_loss.front());

  const auto path = std::filesystem::temp_directory_path() / "ogmpred_curve.csv";
  write_loss_curve(path, ra);
  std::ifstream is(path);
  std::string header, first;
  std::getline(is, header);
  std::getline(is, first);
  EXPECT_EQ(header, "epoch,mean_loss");
  EXPECT_EQ(first.substr(0, 2), "1,");
  std::filesystem::remove(path);
}

TEST(Train, NonFiniteLossAborts) {
  Model<float> m(ModelConfig::row(Family::ED, ConfigKind::Base, 16, 16, 4), 4);
  m.parameters().items().back().second->value.fill(NAN);
  TrainConfig tc;
  tc.epochs = 1;
  EXPECT_THROW(train(m, {random_sequence(16, 16, 4, 2, 1)}, tc, LossConfig{}, nn::AdamConfig{}), NumericFault);
  EXPECT_THROW(train(m, {}, tc, LossConfig{}, nn::AdamConfig{}), DataError);
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "ogmpred/grid.hpp"
#include "ogmpred/grid_io.hpp"
#include "ogmpred/rng.hpp"

using namespace ogmpred;

namespace {

constexpr double kCs = 0.2;

OgmFrame random_binary(int h, int w, Rng& rng, double p = 0.3) {
  OgmFrame f(h, w, kCs);
  for (auto& v : f.values()) v = rng.uniform() < p ? 1.0f : 0.0f;
  return f;
}

OgmFrame random_prob(int h, int w, Rng& rng) {
  OgmFrame f(h, w, kCs);
  for (auto& v : f.values()) v = static_cast<float>(rng.uniform());
  return f;
}

OgmSequence static_sequence(int t, int h, int w, int tau, Rng& rng) {
  OgmSequence s;
  s.tau_init = tau;
  for (int k = 0; k < t; ++k) {
    s.frames.push_back(random_binary(h, w, rng));
    s.poses.push_back({});
    s.visibility.emplace_back(h, w, 1);
  }
  return s;
}

/// Per-cell source lookup for an integer shift: out(r, c) = in(r - dr, c - dc), 0 outside.
OgmFrame shifted(const OgmFrame& in, int dr, int dc) {
  OgmFrame out(in.height(), in.width(), in.cell_size());
  for (int r = 0; r < in.height(); ++r)
    for (int c = 0; c < in.width(); ++c) {
      const int sr = r - dr, sc = c - dc;
      if (sr >= 0 && sc >= 0 && sr < in.height() && sc < in.width()) out(r, c) = in(sr, sc);
    }
  return out;
}

}  // namespace

TEST(Frame, Invariants) {
  EXPECT_THROW(OgmFrame(0, 3, kCs), ShapeError);
  EXPECT_THROW(OgmFrame(3, 3, 0.0), ShapeError);
  EXPECT_THROW(OgmFrame(2, 2, kCs, std::vector<float>(3)), ShapeError);
  OgmFrame f(2, 2, kCs);
  f(0, 1) = 1.5f;
  EXPECT_FALSE(f.in_unit_range());
}

TEST(Pose, HeadingNormalized) {
  EXPECT_NEAR(Pose2::make(0, 0, 3 * std::numbers::pi / 2).heading, -std::numbers::pi / 2, 1e-12);
  EXPECT_DOUBLE_EQ(Pose2::make(0, 0, -std::numbers::pi).heading, std::numbers::pi);
  EXPECT_DOUBLE_EQ(Pose2::make(0, 0, std::numbers::pi).heading, std::numbers::pi);
}

TEST(Sequence, ValidateRejectsBrokenInvariants) {
  Rng rng(1);
  auto s = static_sequence(4, 6, 6, 2, rng);
  EXPECT_NO_THROW(s.validate());
  auto bad = s;
  bad.tau_init = 4;
  EXPECT_THROW(bad.validate(), DataError);
  bad = s;
  bad.tau_init = 0;
  EXPECT_THROW(bad.validate(), DataError);
  bad = s;
  bad.poses.pop_back();
  EXPECT_THROW(bad.validate(), DataError);
  bad = s;
  bad.frames[1] = OgmFrame(6, 5, kCs);
  EXPECT_THROW(bad.validate(), DataError);
}

TEST(Warp, IdentityIsBitExact) {
  Rng rng(2);
  const auto f = random_prob(9, 8, rng);
  const Pose2 p{1.3, -0.7, 0.4};
  EXPECT_EQ(warp_to_frame(f, p, p, Interpolation::nearest), f);
  EXPECT_EQ(warp_to_frame(f, p, p, Interpolation::bilinear), f);
}

TEST(Warp, IntegerTranslationsAreExactShifts) {
  Rng rng(3);
  const auto f = random_binary(12, 10, rng);
  // +3 cells in x (forward): content moves 3 rows toward the sensor.
  EXPECT_EQ(warp_to_frame(f, {0, 0, 0}, {3 * kCs, 0, 0}, Interpolation::nearest), shifted(f, 3, 0));
  // +3 cells laterally (y, to the left): content moves 3 columns right; vacated columns are zero.
  const auto lat = warp_to_frame(f, {0, 0, 0}, {0, 3 * kCs, 0}, Interpolation::nearest);
  EXPECT_EQ(lat, shifted(f, 0, 3));
  for (int r = 0; r < 12; ++r)
    for (int c = 0; c < 3; ++c) EXPECT_EQ(lat(r, c), 0.0f);
  for (int dr = -4; dr <= 4; ++dr)
    for (int dc = -4; dc <= 4; ++dc) {
      const Pose2 to{dr * kCs, dc * kCs, 0.0};
      EXPECT_EQ(warp_to_frame(f, {0, 0, 0}, to, Interpolation::nearest), shifted(f, dr, dc));
      EXPECT_EQ(warp_to_frame(f, {0, 0, 0}, to, Interpolation::bilinear), shifted(f, dr, dc));
    }
}

TEST(Warp, QuarterTurnAboutCenterRotatesArray) {
  OgmFrame f(5, 5, kCs);
  const float pattern[5][5] = {{1, 1, 0, 0, 0}, {0, 1, 0, 0, 1}, {0, 0, 1, 0, 0}, {1, 0, 0, 0, 0}, {1, 1, 1, 0, 0}};
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) f(r, c) = pattern[r][c];
  // Grid center in the ego frame; a pose that turns by +90 deg while keeping it fixed.
  const Point2 p = cell_center(2, 2, 5, 5, kCs);
  const double th = std::numbers::pi / 2;
  const Pose2 to{p.x - (std::cos(th) * p.x - std::sin(th) * p.y), p.y - (std::sin(th) * p.x + std::cos(th) * p.y), th};
  const auto out = warp_to_frame(f, {0, 0, 0}, to, Interpolation::nearest);
  // A left turn rotates the content clockwise: out[i][j] = in[n-1-j][i].
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_EQ(out(i, j), f(4 - j, i)) << i << "," << j;
}

TEST(Warp, RoundTripAndComposition) {
  Rng rng(4);
  const auto f = random_binary(16, 14, rng);
  const Pose2 a{0, 0, 0}, b{2 * kCs, -3 * kCs, 0}, c{-1 * kCs, 1 * kCs, 0};
  const auto ab = warp_to_frame(f, a, b, Interpolation::nearest);
  const auto back = warp_to_frame(ab, b, a, Interpolation::nearest);
  const BinaryMask ones(16, 14, 1);
  const auto stay = warp_mask(warp_mask(ones, kCs, a, b), kCs, b, a);
  for (int r = 0; r < 16; ++r)
    for (int cc = 0; cc < 14; ++cc)
      if (stay(r, cc)) {
        EXPECT_EQ(back(r, cc), f(r, cc));
      }
  const auto direct = warp_to_frame(f, a, c, Interpolation::nearest);
  const auto chained = warp_to_frame(ab, b, c, Interpolation::nearest);
  const auto in_b = warp_mask(warp_mask(ones, kCs, a, b), kCs, b, c);
  for (int r = 0; r < 16; ++r)
    for (int cc = 0; cc < 14; ++cc)
      if (in_b(r, cc)) {
        EXPECT_EQ(direct(r, cc), chained(r, cc));
      }
}

TEST(Warp, OutputStaysInUnitRange) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto f = random_prob(10, 10, rng);
    const Pose2 to{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-3, 3)};
    EXPECT_TRUE(warp_to_frame(f, {0, 0, 0}, to, Interpolation::bilinear).in_unit_range());
  }
}

TEST(Warp, NonFinitePoseRejected) {
  OgmFrame f(4, 4, kCs);
  EXPECT_THROW(warp_to_frame(f, {0, 0, 0}, {NAN, 0, 0}, Interpolation::nearest), InvalidPose);
  EXPECT_THROW(warp_mask(BinaryMask(4, 4), kCs, {0, INFINITY, 0}, {0, 0, 0}), InvalidPose);
}

TEST(Align, StaticWorldMovingEgoGivesIdenticalOverlap) {
  // World pattern seen by an ego that advances one cell per step forward and
  // one cell every other step to the left; frames are built by direct shifts.
  Rng rng(6);
  const int h = 24, w = 20, t = 8, tau = 5, m = 2 * t;
  OgmFrame world(h + 2 * m, w + 2 * m, kCs);
  for (auto& v : world.values()) v = rng.uniform() < 0.3 ? 1.0f : 0.0f;
  OgmSequence seq;
  seq.tau_init = tau;
  for (int k = 0; k < t; ++k) {
    const int fwd = k, left = k / 2;
    OgmFrame f(h, w, kCs);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) f(r, c) = world(r - fwd + m, c - left + m);
    seq.frames.push_back(f);
    seq.poses.push_back({fwd * kCs, left * kCs, 0.0});
    seq.visibility.emplace_back(h, w, 1);
  }
  const auto al = align_sequence(seq);
  EXPECT_TRUE(al.aligned);
  const auto& rel = al.poses[static_cast<std::size_t>(al.common_index())];
  EXPECT_EQ(rel.x, 0.0);
  EXPECT_EQ(rel.y, 0.0);
  EXPECT_EQ(rel.heading, 0.0);
  const int cf = tau - 1, cl = cf / 2;
  BinaryMask overlap(h, w, 1);
  for (const auto& v : al.visibility)
    for (std::size_t i = 0; i < overlap.size(); ++i) overlap.bits()[i] &= v.bits()[i];
  EXPECT_GT(overlap.count(), static_cast<std::size_t>(h * w / 3));
  for (int k = 0; k < t; ++k)
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        if (!overlap(r, c)) continue;
        EXPECT_EQ(al.frames[k](r, c), al.frames[0](r, c));
        EXPECT_EQ(al.frames[k](r, c), world(r - cf + m, c - cl + m));
      }
  EXPECT_EQ(align_sequence(al).frames, al.frames);
}

TEST(Align, IdenticalPosesLeaveFramesUnchanged) {
  Rng rng(7);
  auto s = static_sequence(5, 8, 8, 3, rng);
  for (auto& p : s.poses) p = {1.0, 2.0, 0.3};
  const auto al = align_sequence(s);
  EXPECT_EQ(al.frames, s.frames);
  EXPECT_EQ(al.visibility, s.visibility);
}

TEST(Inputs, ObservedBlankAndFeedback) {
  Rng rng(8);
  const auto s = static_sequence(6, 5, 5, 3, rng);
  EXPECT_EQ(assemble_inputs(s, 0, InputMode::blank_inputs), s.frames[0]);
  EXPECT_EQ(assemble_inputs(s, 0, InputMode::feedback), s.frames[0]);
  EXPECT_EQ(assemble_inputs(s, 2, InputMode::blank_inputs), s.frames[2]);
  const auto blank = assemble_inputs(s, 3, InputMode::blank_inputs);
  EXPECT_EQ(blank, OgmFrame(5, 5, kCs));
  const auto fb = random_prob(5, 5, rng);
  EXPECT_EQ(assemble_inputs(s, 3, InputMode::feedback, &fb), fb);
  EXPECT_THROW(assemble_inputs(s, 3, InputMode::feedback), ContractError);
  EXPECT_THROW(assemble_inputs(s, 6, InputMode::blank_inputs), ContractError);
  const OgmFrame wrong(4, 5, kCs);
  EXPECT_THROW(assemble_inputs(s, 4, InputMode::feedback, &wrong), ShapeError);
}

TEST(Binarize, ThresholdInclusive) {
  EXPECT_EQ(binarize(OgmFrame(3, 3, kCs, 0.5f)), OgmFrame(3, 3, kCs, 1.0f));
  EXPECT_EQ(binarize(OgmFrame(3, 3, kCs)), OgmFrame(3, 3, kCs));
  Rng rng(9);
  const auto f = random_prob(7, 9, rng);
  const auto b = binarize(f, 0.5);
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_EQ(b.values()[i], f.values()[i] >= 0.5f ? 1.0f : 0.0f);
  EXPECT_THROW(binarize(f, 1.0), ContractError);
}

TEST(Io, OgmsRoundTrip) {
  Rng rng(10);
  auto s = static_sequence(4, 6, 7, 2, rng);
  s.frames[1] = random_prob(6, 7, rng);
  s.poses[2] = {1.5, -0.25, 0.75};
  s.object_masks.emplace(4, BinaryMask(6, 7));
  (*s.object_masks)[3](2, 2) = 1;
  std::stringstream ss;
  io::write_ogms(ss, s);
  const auto back = io::read_ogms(ss, 2);
  ASSERT_EQ(back.length(), s.length());
  for (int k = 0; k < s.length(); ++k) {
    EXPECT_TRUE(std::equal(back.frames[k].values().begin(), back.frames[k].values().end(), s.frames[k].values().begin()));
    EXPECT_EQ(back.frames[k].cell_size(), static_cast<double>(static_cast<float>(kCs)));
  }
  EXPECT_EQ(back.visibility, s.visibility);
  EXPECT_EQ(back.object_masks, s.object_masks);
  EXPECT_EQ(back.poses, s.poses);
  EXPECT_EQ(back.tau_init, 2);
  EXPECT_FALSE(back.aligned);

  std::stringstream aligned;
  io::write_ogms(aligned, align_sequence(s));
  EXPECT_TRUE(io::read_ogms(aligned, 2).aligned);
}

TEST(Io, OgmsRejectsCorruptInput) {
  Rng rng(11);
  const auto s = static_sequence(3, 4, 4, 1, rng);
  std::stringstream ss;
  io::write_ogms(ss, s);
  const std::string bytes = ss.str();
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  EXPECT_THROW(io::read_ogms(cut, 1), DataError);
  std::string bad = bytes;
  bad[0] = 'X';
  std::stringstream magic(bad);
  EXPECT_THROW(io::read_ogms(magic, 1), DataError);
  std::string version = bytes;
  version[4] = 9;
  std::stringstream ver(version);
  EXPECT_THROW(io::read_ogms(ver, 1), DataError);
}

TEST(Io, PgmPixelsAreRoundedScaledValues) {
  OgmFrame f(2, 3, kCs, std::vector<float>{0.0f, 0.5f, 1.0f, 0.25f, 0.999f, 0.002f});
  std::stringstream ss;
  io::write_pgm(ss, 2, 3, f.values());
  const std::string s = ss.str();
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(s.substr(0, header.size()), header);
  const int expect[6] = {0, 128, 255, 64, 255, 1};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(static_cast<unsigned char>(s[header.size() + i]), expect[i]);
  std::stringstream in(s);
  const auto back = io::read_pgm(in, kCs);
  EXPECT_FLOAT_EQ(back(0, 1), 128.0f / 255.0f);
}

#include <gtest/gtest.h>

#include <cmath>

#include "ladmim/eval.hpp"
#include "ladmim/rng.hpp"
#include "oracles.hpp"

using namespace ladmim;

namespace {

std::vector<ImageScore> fake_images(std::uint64_t seed) {
  Rng rng(seed, Stream::eval);
  std::vector<ImageScore> out;
  const char* labels[] = {"normal", "logical", "structural"};
  for (const char* split : {"val", "test"})
    for (int l = 0; l < 3; ++l)
      for (int i = 0; i < 10; ++i) {
        ImageScore s;
        s.id = std::string(split) + "_" + labels[l] + "_" + std::to_string(i);
        s.label = labels[l];
        s.kind = l == 0 ? "none" : "k";
        s.split = split;
        s.s_hvq = rng.normal() + (l == 2 ? 2.0 : 0.0);
        s.s_lavit = rng.normal() + (l == 1 ? 2.0 : 0.0);
        out.push_back(s);
      }
  return out;
}

}  // namespace

TEST(Calibration, MeanAndSampleDeviation) {
  const auto c = calibrate_channel({1.0, 3.0});
  EXPECT_DOUBLE_EQ(c.mean, 2.0);
  EXPECT_DOUBLE_EQ(c.std, std::sqrt(2.0));
  const auto d = calibrate_channel({1.0, 2.0, 3.0});
  EXPECT_DOUBLE_EQ(d.std, 1.0);
  EXPECT_THROW(calibrate_channel({4.0, 4.0, 4.0}), ConfigError);
  EXPECT_THROW(calibrate_channel({4.0}), ConfigError);
}

TEST(Calibration, FusionIsSumOfStandardizedScores) {
  const ScoreStats st{{2.0, 1.0}, {0.0, 2.0}};
  EXPECT_DOUBLE_EQ(fuse(3.0, 4.0, st), 3.0);
  EXPECT_DOUBLE_EQ(fuse(2.0, 0.0, st), 0.0);
  EXPECT_DOUBLE_EQ(fuse(0.0, -2.0, st), -3.0);
}

TEST(Auroc, HandExamples) {
  EXPECT_DOUBLE_EQ(auroc({0, 0, 1, 1}, {0.1, 0.2, 0.3, 0.4}), 1.0);
  EXPECT_DOUBLE_EQ(auroc({1, 1, 0, 0}, {0.1, 0.2, 0.3, 0.4}), 0.0);
  EXPECT_DOUBLE_EQ(auroc({0, 1, 0, 1}, {0.5, 0.5, 0.5, 0.5}), 0.5);
  EXPECT_DOUBLE_EQ(auroc({0, 1, 0, 1}, {0.1, 0.3, 0.35, 0.8}), 0.75);
  EXPECT_THROW(auroc({1, 1}, {0.1, 0.2}), ConfigError);
  EXPECT_THROW(auroc({0, 2}, {0.1, 0.2}), ConfigError);
  EXPECT_THROW(auroc({0, 1}, {0.1}), ShapeError);
}

TEST(Auroc, MatchesPairwiseOracleWithTies) {
  Rng rng(1, Stream::eval);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t n = 2 + rng.below(60);
    std::vector<int> y(n);
    std::vector<double> s(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = static_cast<int>(rng.below(2));
      s[i] = static_cast<double>(rng.below(6));  // heavy ties
    }
    y[0] = 0;
    y[1] = 1;
    EXPECT_EQ(auroc(y, s), oracle::pairwise_auroc(y, s));
  }
}

TEST(Auroc, InvariantToStrictlyIncreasingMaps) {
  Rng rng(2, Stream::eval);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<int> y(30);
    std::vector<double> s(30), t(30);
    for (std::size_t i = 0; i < 30; ++i) {
      y[i] = static_cast<int>(i % 2);
      s[i] = rng.normal();
      t[i] = std::exp(3.0 * s[i]) + 7.0;
    }
    EXPECT_DOUBLE_EQ(auroc(y, s), auroc(y, t));
  }
}

TEST(Report, SchemaAndReferenceValues) {
  auto images = fake_images(3);
  std::vector<double> h, l;
  for (const auto& im : images)
    if (im.split == "val") {
      h.push_back(im.s_hvq);
      l.push_back(im.s_lavit);
    }
  const auto st = calibrate(h, l);
  for (auto& im : images) {
    im.z_hvq = standardize(im.s_hvq, st.hvq);
    im.z_lavit = standardize(im.s_lavit, st.lavit);
    im.s_fused = im.z_hvq + im.z_lavit;
  }
  const auto r = build_report(json{{"seed", 1}}, "histogram", st, images);
  EXPECT_EQ(r["format"], "ladmim-report");
  for (const char* row : {"hvq_only", "lavit_only", "fused"})
    for (const char* col : {"SA", "LA", "Avg"}) {
      const double v = r["auroc"][row][col];
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  EXPECT_DOUBLE_EQ(r["auroc"]["fused"]["Avg"].get<double>(),
                   0.5 * (r["auroc"]["fused"]["SA"].get<double>() + r["auroc"]["fused"]["LA"].get<double>()));
  const auto& ref = r["reference_auroc_percent"];
  EXPECT_EQ(ref["hvq_only"]["SA"], 91.2);
  EXPECT_EQ(ref["hvq_only"]["LA"], 76.7);
  EXPECT_EQ(ref["lavit_only"]["SA"], 68.7);
  EXPECT_EQ(ref["lavit_only"]["LA"], 79.3);
  EXPECT_EQ(ref["fused"]["SA"], 90.3);
  EXPECT_EQ(ref["fused"]["LA"], 83.1);
  EXPECT_EQ(ref["fused"]["Avg"], 86.7);
  const auto tt = reference_target_table();
  EXPECT_EQ(tt["pixels"]["LA"], 74.8);
  EXPECT_EQ(tt["features"]["LA"], 83.4);
  EXPECT_EQ(tt["codes"]["LA"], 78.0);
  EXPECT_EQ(tt["histogram"], ref["fused"]);
  EXPECT_EQ(r["images"].size(), images.size());
  EXPECT_EQ(r["calibration"]["split"], "val");
}

TEST(Report, AurocUsesTestSplitOnly) {
  auto images = fake_images(4);
  const auto before = component_table(images);
  for (auto& im : images)
    if (im.split == "val") im.s_hvq = im.label == "normal" ? 100.0 : -100.0;
  EXPECT_EQ(component_table(images).hvq_only.sa, before.hvq_only.sa);
}

TEST(Report, CsvHeaderAndRows) {
  const auto images = fake_images(5);
  const auto csv = scores_csv(images);
  EXPECT_EQ(csv.rfind("id,label,kind,s_hvq,s_lavit,s_fused\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 31);
  EXPECT_EQ(std::stod(format_double(0.1)), 0.1);
  EXPECT_EQ(format_double(1.0 / 3.0), "0.33333333333333331");
}

TEST(Threshold, BestF1) {
  const auto t = best_f1_threshold({0, 0, 1, 1}, {0.1, 0.2, 0.3, 0.4});
  EXPECT_DOUBLE_EQ(t.tau, 0.3);
  EXPECT_DOUBLE_EQ(t.f1, 1.0);
  const auto u = best_f1_threshold({1, 0, 1}, {0.5, 0.6, 0.7});
  EXPECT_DOUBLE_EQ(u.tau, 0.5);
  EXPECT_NEAR(u.f1, 0.8, 1e-12);
}

#include <cmath>
#include <random>
#include <vector>

#include <gtest/gtest.h>

#include "radepth/eval_metrics.hpp"
#include "test_util.hpp"

namespace radepth {
namespace {

DepthMap one(double v) { return DepthMap::Constant(1, 1, v); }
Mask all(int r, int c) { return Mask::Constant(r, c, true); }

DepthMap row(std::initializer_list<double> v) {
  DepthMap m(1, static_cast<int>(v.size()));
  int i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

TEST(AbsRel, Examples) {
  EXPECT_EQ(abs_rel(one(2.0), one(2.0), all(1, 1)), 0.0);
  EXPECT_NEAR(abs_rel(one(1.1), one(1.0), all(1, 1)), 0.1, 1e-12);
}

TEST(Delta1, Examples) {
  EXPECT_EQ(delta1(one(3.0), one(3.0), all(1, 1)), 1.0);
  EXPECT_EQ(delta1(one(1.3), one(1.0), all(1, 1)), 0.0);
  EXPECT_NEAR(delta1(row({1.2, 2.6}), row({1.0, 2.0}), all(1, 2)), 0.5, 1e-12);
}

TEST(Rmse, Examples) {
  EXPECT_EQ(rmse(one(4.0), one(4.0), all(1, 1)), 0.0);
  const DepthMap gt = (DepthMap::Random(4, 4).array() + 3.0).matrix();
  EXPECT_NEAR(rmse((gt.array() + 2.0).matrix(), gt, all(4, 4)), 2.0, 1e-12);
  EXPECT_NEAR(rmse(row({13.0, 24.0}), row({10.0, 20.0}), all(1, 2)), std::sqrt(12.5), 1e-12);
}

TEST(Metrics, EmptyMaskIsAnError) {
  const Mask none = Mask::Constant(2, 2, false);
  const DepthMap x = DepthMap::Ones(2, 2);
  EXPECT_THROW(abs_rel(x, x, none), std::invalid_argument);
  EXPECT_THROW(delta1(x, x, none), std::invalid_argument);
  EXPECT_THROW(rmse(x, x, none), std::invalid_argument);
}

TEST(Metrics, MaskExcludesInvalidGroundTruth) {
  DepthMap gt = row({1.0, 0.0, std::nan("")});
  const DepthMap pred = row({1.1, 7.0, 7.0});
  const Mask m = valid_depth_mask(gt);
  EXPECT_EQ(m.count(), 1);
  EXPECT_NEAR(abs_rel(pred, gt, m), 0.1, 1e-12);
}

struct Instance {
  DepthMap pred, gt;
  Mask mask;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0.5, 80.0), u(0.0, 1.0);
  Instance in{DepthMap(6, 9), DepthMap(6, 9), Mask(6, 9)};
  for (int i = 0; i < in.gt.size(); ++i) {
    in.gt.data()[i] = d(rng);
    in.pred.data()[i] = in.gt.data()[i] * std::exp(0.5 * (u(rng) - 0.5));
    in.mask.data()[i] = u(rng) < 0.7;
  }
  in.mask(0, 0) = true;
  return in;
}

TEST(Metrics, ScaleProperties) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> s(0.01, 100.0);
  for (int trial = 0; trial < 100; ++trial) {
    const Instance in = random_instance(rng);
    const double k = s(rng);
    const DepthMap kp = k * in.pred, kg = k * in.gt;
    EXPECT_NEAR(abs_rel(kp, kg, in.mask), abs_rel(in.pred, in.gt, in.mask), 1e-12);
    EXPECT_EQ(delta1(kp, kg, in.mask), delta1(in.pred, in.gt, in.mask));
    EXPECT_NEAR(rmse(kp, kg, in.mask), k * rmse(in.pred, in.gt, in.mask),
                1e-12 * k * rmse(in.pred, in.gt, in.mask));
  }
}

TEST(Delta1, MonotoneInThreshold) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const Instance in = random_instance(rng);
    double prev = 1.0;
    for (double t = 1.25; t > 1.0; t -= 0.01) {
      const double d = delta1(in.pred, in.gt, in.mask, t);
      EXPECT_LE(d, prev);
      prev = d;
    }
  }
}

TEST(Evaluate, PooledEqualsPixelWeightedCombination) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<EvalFrame> frames;
    double sum_rel = 0.0, sum_sq = 0.0, sum_d1 = 0.0, n = 0.0;
    for (int f = 0; f < 1 + trial % 4; ++f) {
      const Instance in = random_instance(rng);
      frames.push_back({"f" + std::to_string(f), in.pred, in.gt, in.mask});
      const double c = static_cast<double>(in.mask.count());
      sum_rel += c * abs_rel(in.pred, in.gt, in.mask);
      sum_d1 += c * delta1(in.pred, in.gt, in.mask);
      sum_sq += c * std::pow(rmse(in.pred, in.gt, in.mask), 2);
      n += c;
    }
    const MetricsReport r = evaluate(frames);
    EXPECT_NEAR(r.abs_rel, sum_rel / n, 1e-12);
    EXPECT_NEAR(r.delta1, sum_d1 / n, 1e-12);
    EXPECT_NEAR(r.rmse, std::sqrt(sum_sq / n), 1e-9);
    EXPECT_EQ(r.n_frames, frames.size());
    EXPECT_EQ(r.per_frame.size(), frames.size());
  }
}

TEST(Evaluate, AccumulatorMergeIsAssociative) {
  std::mt19937_64 rng(4);
  const Instance a = random_instance(rng), b = random_instance(rng);
  MetricAccumulator whole, left, right;
  whole.add(a.pred, a.gt, a.mask);
  whole.add(b.pred, b.gt, b.mask);
  left.add(a.pred, a.gt, a.mask);
  right.add(b.pred, b.gt, b.mask);
  left.merge(right);
  EXPECT_EQ(left.count(), whole.count());
  EXPECT_NEAR(left.abs_rel(), whole.abs_rel(), 1e-15);
  EXPECT_NEAR(left.rmse(), whole.rmse(), 1e-12);
  EXPECT_EQ(left.delta1(), whole.delta1());
}

TEST(Evaluate, RadarMeanFallbackBound) {
  std::mt19937_64 rng(5);
  const Instance in = random_instance(rng);
  const double mean = 17.5;
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i < in.gt.size(); ++i) {
    if (!in.mask.data()[i]) continue;
    sum += std::abs(mean - in.gt.data()[i]) / in.gt.data()[i];
    ++n;
  }
  EXPECT_NEAR(abs_rel(DepthMap::Constant(6, 9, mean), in.gt, in.mask), sum / n, 1e-12);
}

TEST(DatasetSummary, Examples) {
  Mask half = Mask::Constant(2, 2, false);
  half(0, 0) = half(1, 1) = true;
  const std::vector<SummaryFrame> single = {{3, half}};
  const DatasetSummary s = dataset_summary(single);
  EXPECT_EQ(s.avg_sparse_depth_count, 3.0);
  EXPECT_EQ(s.gt_coverage_percent, 50.0);
  EXPECT_EQ(s.n_frames, 1u);

  const std::vector<SummaryFrame> two = {{1, half}, {3, Mask::Constant(2, 2, true)}};
  const DatasetSummary t = dataset_summary(two);
  EXPECT_EQ(t.avg_sparse_depth_count, 2.0);
  EXPECT_EQ(t.gt_coverage_percent, 75.0);
  EXPECT_THROW(dataset_summary({}), std::invalid_argument);
}

TEST(ErrorVsDepth, Examples) {
  const std::vector<EvalFrame> f = {
      {"a", DepthMap::Constant(3, 3, 5.5), DepthMap::Constant(3, 3, 5.0), all(3, 3)}};
  const auto s = error_vs_depth(f, 1);
  ASSERT_EQ(s.size(), 1u);
  EXPECT_NEAR(s[0].first, 5.0, 1e-12);
  EXPECT_NEAR(s[0].second, 0.1, 1e-12);

  std::vector<EvalFrame> many;
  for (int i = 0; i < 4; ++i) {
    many.push_back({"f", DepthMap::Constant(2, 2, 1.0 + i), DepthMap::Constant(2, 2, 1.0 + i),
                    all(2, 2)});
  }
  const auto big = error_vs_depth(many, 10);
  ASSERT_EQ(big.size(), 1u);
  EXPECT_EQ(big[0].first, 1.0);
  EXPECT_EQ(error_vs_depth(many, 2).size(), 2u);
  EXPECT_EQ(error_vs_depth(many, 2)[1].first, 3.0);
  EXPECT_TRUE(error_vs_depth({}, 10).empty());
  EXPECT_THROW(error_vs_depth(many, 0), std::invalid_argument);
}

TEST(Reports, JsonRoundTripAndTables) {
  const auto dir = testing::temp_dir("reports");
  MetricsReport r;
  r.abs_rel = 0.223;
  r.delta1 = 0.686;
  r.rmse = 4.5;
  r.n_frames = 2;
  r.per_frame = {{"a", 10.0, 0.2}, {"b", 20.0, 0.25}};
  write_report_json(dir / "r.json", r, "ours", "hall");
  const ReportRow back = read_report_json(dir / "r.json");
  EXPECT_EQ(back.model, "ours");
  EXPECT_EQ(back.dataset, "hall");
  EXPECT_EQ(back.report.abs_rel, 0.223);
  EXPECT_EQ(back.report.per_frame.size(), 2u);
  EXPECT_EQ(back.report.per_frame[1].frame_id, "b");

  ReportRow base = back;
  base.model = "metric-baseline";
  base.report.abs_rel = 0.446;
  const std::vector<ReportRow> rows = {base, back};
  const std::string table = format_results_table(rows, "metric-baseline");
  const size_t a = table.find("AbsRel"), d = table.find("delta1"), m = table.find("RMSE");
  ASSERT_NE(a, std::string::npos);
  EXPECT_LT(a, d);
  EXPECT_LT(d, m);
  EXPECT_NE(table.find("-50.0"), std::string::npos) << table;

  const std::vector<std::pair<std::string, DatasetSummary>> summary = {
      {"hall", {2.96, 37.80, 365}}};
  const std::string st = format_summary_table(summary);
  EXPECT_NE(st.find("2.96"), std::string::npos) << st;
  EXPECT_NE(st.find("37.80"), std::string::npos) << st;
  EXPECT_NE(st.find("365"), std::string::npos) << st;
}

TEST(Reports, SeriesAndPlot) {
  const auto dir = testing::temp_dir("series");
  const std::vector<std::pair<double, double>> s = {{5.0, 0.1}, {12.25, 0.3}};
  write_error_series(dir / "s.csv", s);
  EXPECT_EQ(read_error_series(dir / "s.csv"), s);
  const std::vector<PlotSeries> plot = {{"ours", s}, {"naive", {{7.0, 0.5}}}};
  render_error_plot(dir / "p.png", plot);
  EXPECT_GT(std::filesystem::file_size(dir / "p.png"), 100u);
}

}  // namespace
}  // namespace radepth

// Copyright 2026 The sdmtss Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

#include <cmath>

#include "gtest/gtest.h"
#include "sdmtss/metrics.hpp"
#include "test_util.hpp"

namespace sdmtss {
namespace {

using testing::ScratchDir;

std::vector<double> random_signal(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

// Dense least squares on the explicit delay matrix, solved by Gaussian
// elimination with partial pivoting.
double dense_projection_sdr(const std::vector<double>& est, const std::vector<double>& ref, std::size_t L) {
  const std::size_t T = ref.size();
  std::vector<std::vector<double>> A(L, std::vector<double>(L + 1, 0.0));
  const auto col = [&](std::size_t i, std::size_t t) { return t >= i ? ref[t - i] : 0.0; };
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t t = 0; t < T; ++t) A[i][j] += col(i, t) * col(j, t);
    for (std::size_t t = 0; t < T; ++t) A[i][L] += col(i, t) * est[t];
  }
  for (std::size_t k = 0; k < L; ++k) {
    std::size_t piv = k;
    for (std::size_t i = k + 1; i < L; ++i)
      if (std::abs(A[i][k]) > std::abs(A[piv][k])) piv = i;
    std::swap(A[k], A[piv]);
    for (std::size_t i = k + 1; i < L; ++i) {
      const double f = A[i][k] / A[k][k];
      for (std::size_t j = k; j <= L; ++j) A[i][j] -= f * A[k][j];
    }
  }
  std::vector<double> c(L);
  for (std::size_t i = L; i-- > 0;) {
    double s = A[i][L];
    for (std::size_t j = i + 1; j < L; ++j) s -= A[i][j] * c[j];
    c[i] = s / A[i][i];
  }
  double sig = 0, err = 0;
  for (std::size_t t = 0; t < T; ++t) {
    double p = 0;
    for (std::size_t i = 0; i < L; ++i) p += c[i] * col(i, t);
    sig += p * p;
    err += (est[t] - p) * (est[t] - p);
  }
  return 10 * std::log10(sig / err);
}

TEST(SdrProjection, PerfectEstimateHitsCap) {
  const auto r = random_signal(300, 1);
  for (std::size_t L : {1u, 4u, 32u}) EXPECT_EQ(sdr_projection(r, r, L), kDbCap);
}

TEST(SdrProjection, DelayInsideFilterSpan) {
  const auto r = random_signal(400, 2);
  std::vector<double> e(400, 0.0);
  for (std::size_t t = 3; t < e.size(); ++t) e[t] = r[t - 3];
  EXPECT_EQ(sdr_projection(e, r, 4), kDbCap);
  EXPECT_LT(sdr_projection(e, r, 3), 10.0);
}

TEST(SdrProjection, SingleTapEqualsSiSdrOnZeroMeanSignals) {
  auto r = random_signal(1000, 3), n = random_signal(1000, 4);
  const auto center = [](std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x / v.size();
    for (double& x : v) x -= m;
  };
  std::vector<double> e(1000);
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = 0.8 * r[i] + 0.6 * n[i];
  center(r);
  center(e);
  EXPECT_NEAR(sdr_projection(e, r, 1), si_sdr(e, r), 1e-6);
}

TEST(SdrProjection, MatchesDenseSolve) {
  const auto r = random_signal(250, 5), n = random_signal(250, 6);
  std::vector<double> e(250);
  for (std::size_t t = 0; t < e.size(); ++t) e[t] = 0.5 * r[t] + (t >= 2 ? 0.3 * r[t - 2] : 0.0) + 0.4 * n[t];
  for (std::size_t L : {1u, 5u, 16u}) EXPECT_NEAR(sdr_projection(e, r, L), dense_projection_sdr(e, r, L), 1e-8) << L;
}

TEST(SdrProjection, DegenerateInputs) {
  EXPECT_THROW(sdr_projection(std::vector<double>(10, 1.0), std::vector<double>(10, 0.0), 4), DataError);
  EXPECT_THROW(sdr_projection(std::vector<double>(3, 1.0), std::vector<double>(3, 1.0), 4), ConfigError);
  // A short periodic reference makes delayed copies collinear; the solve
  // still returns a finite value.
  std::vector<double> r(64), e(64);
  for (std::size_t t = 0; t < r.size(); ++t) {
    r[t] = t % 2 ? 1.0 : -1.0;
    e[t] = r[t] + 0.1 * std::sin(0.3 * t);
  }
  EXPECT_TRUE(std::isfinite(sdr_projection(e, r, 8)));
}

class EvaluateTest : public ::testing::Test {
 protected:
  void SetUp() override {
    SourceCorpusOptions so;
    so.num_speakers = 3;
    so.utterances_per_speaker = 2;
    so.min_duration = 0.6;
    so.max_duration = 0.9;
    const auto src = write_synthetic_sources(dir_ / "src", so, 2);
    manifest_ = build_dataset(src, 3, 5, dir_ / "set");
  }
  void copy_estimates(bool stems) {
    for (const auto& r : manifest_.records) {
      std::filesystem::create_directories(dir_ / "est" / r.utt);
      std::filesystem::copy_file(manifest_.resolve(stems ? r.s1 : r.mix), estimate_path(dir_ / "est", r.utt, 0));
      std::filesystem::copy_file(manifest_.resolve(stems ? r.s2 : r.mix), estimate_path(dir_ / "est", r.utt, 1));
    }
  }
  ScratchDir dir_;
  Manifest manifest_;
};

TEST_F(EvaluateTest, MixtureCopiesScoreZeroImprovement) {
  copy_estimates(false);
  const auto r = evaluate(manifest_, dir_ / "est", 64);
  ASSERT_EQ(r.rows.size(), 6u);
  for (const auto& s : r.rows) {
    EXPECT_EQ(s.sdri, 0.0);
    EXPECT_EQ(s.si_sdri, 0.0);
  }
  EXPECT_EQ(r.overall.count, 6u);
}

TEST_F(EvaluateTest, StemsScoreCapMinusMixture) {
  copy_estimates(true);
  const auto r = evaluate(manifest_, dir_ / "est", 64);
  for (const auto& s : r.rows) {
    const auto& rec = *std::find_if(manifest_.records.begin(), manifest_.records.end(),
                                    [&](const ManifestRecord& x) { return x.utt == s.utt; });
    const auto mix = read_wav(manifest_.resolve(rec.mix));
    const auto stem = read_wav(manifest_.resolve(s.spk == "s1" ? rec.s1 : rec.s2));
    EXPECT_EQ(s.si_sdr, kDbCap);
    EXPECT_NEAR(s.si_sdri, kDbCap - si_sdr(mix.samples(), stem.samples()), 1e-12);
  }
}

TEST_F(EvaluateTest, MissingFilesListedTogether) {
  std::filesystem::create_directories(dir_ / "none");
  try {
    evaluate(manifest_, dir_ / "none");
    FAIL();
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(manifest_.records[2].utt), std::string::npos);
    EXPECT_NE(msg.find("est_s2.wav"), std::string::npos);
  }
}

TEST_F(EvaluateTest, ReportShape) {
  copy_estimates(false);
  const auto j = to_json(evaluate(manifest_, dir_ / "est", 64));
  EXPECT_EQ(j["utterances"].size(), 6u);
  for (const char* k : {"s1", "s2", "all"}) EXPECT_TRUE(j["aggregate"].contains(k));
  EXPECT_EQ(j["config"]["filter_len"], 64);
}

TEST(Evaluate, EmptyManifestEmptyReport) {
  ScratchDir dir;
  const auto r = evaluate(Manifest{dir.path(), {}}, dir.path());
  EXPECT_TRUE(r.rows.empty());
  EXPECT_EQ(r.overall.count, 0u);
  EXPECT_NE(render_table(r).find("all"), std::string::npos);
}

TEST(Evaluate, LengthMismatchReported) {
  const Waveform a(std::vector<double>(100, 0.1), 8000), b(std::vector<double>(90, 0.1), 8000);
  EXPECT_THROW(score_estimate("u", "s1", b, a, a, 16), DataError);
}

}  // namespace
}  // namespace sdmtss

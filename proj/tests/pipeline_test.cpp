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

// End-to-end checks through the command-line tool.

#include <cmath>

#include "gtest/gtest.h"
#include "sdmtss/pipeline.hpp"
#include "test_util.hpp"

namespace sdmtss {
namespace {

using testing::run_cli;
using testing::ScratchDir;
using testing::tree_bytes;
namespace fs = std::filesystem;

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// Square-ish tone active on [begin, end) of an n-sample signal.
Waveform burst(std::size_t n, std::size_t begin, std::size_t end, double amp, std::size_t period) {
  std::vector<double> v(n, 0.0);
  for (std::size_t i = begin; i < end; ++i) v[i] = (i / period) % 2 ? amp : -amp;
  return Waveform(std::move(v), 8000);
}

Waveform sum(const Waveform& a, const Waveform& b) {
  std::vector<double> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a[i] + b[i];
  return Waveform(std::move(v), a.sample_rate());
}

std::vector<double> slice(const Waveform& w, std::size_t b, std::size_t e) {
  return {w.vec().begin() + static_cast<std::ptrdiff_t>(b), w.vec().begin() + static_cast<std::ptrdiff_t>(e)};
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    RunConfig cfg;
    cfg.separator = SeparatorConfig::tiny();
    cfg.decisions.min_ref_dur = 0.5;
    cfg.decisions.ramp = ramp_;
    cfg.train.max_steps = 3;
    cfg.train.batch_size = 2;
    cfg.train.eval_every = 2;
    cfg.train.crop_seconds = 0.3;
    cfg.train.ref_seconds = 0.3;
    cfg.simulate_count = 3;
    testing::write_text_file(dir_ / "cfg.json", to_json(cfg).dump(2));
    cli_ = "--config " + q(dir_ / "cfg.json") + " ";
  }

  // s1 on [0, 1.5 s), s2 on [1.0, 2.5 s) of a 2.5 s mixture.
  void write_staggered() {
    const auto a = burst(20000, 0, 12000, 0.4, 3), b = burst(20000, 8000, 20000, 0.3, 5);
    write_wav(a, dir_ / "a.wav");
    write_wav(b, dir_ / "b.wav");
    write_wav(sum(a, b), dir_ / "mix.wav");
  }

  int cli(const std::string& args) { return run_cli(cli_ + args); }

  ScratchDir dir_;
  std::string cli_;
  double ramp_ = 0.0;
};

TEST_F(CliTest, SimulateIsByteDeterministic) {
  const std::string args = "simulate --synthetic-speakers 3 --synthetic-utts 2 --count 10 --out ";
  ASSERT_EQ(cli("--seed 7 " + args + q(dir_ / "x")), 0);
  ASSERT_EQ(cli("--seed 7 " + args + q(dir_ / "y")), 0);
  ASSERT_EQ(cli("--seed 8 " + args + q(dir_ / "z")), 0);
  const auto x = tree_bytes(dir_ / "x");
  EXPECT_EQ(read_manifest(dir_ / "x" / "manifest.jsonl").records.size(), 10u);
  EXPECT_EQ(x, tree_bytes(dir_ / "y"));
  EXPECT_NE(x, tree_bytes(dir_ / "z"));
}

TEST_F(CliTest, UsageAndConfigErrorsExitTwo) {
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(cli("simulate --out " + q(dir_ / "o")), 2);
  EXPECT_EQ(cli("simulate --sources " + q(dir_ / "none.tsv") + " --out " + q(dir_ / "o")), 2);
  EXPECT_EQ(run_cli("--config " + q(dir_ / "none.json") + " gradcheck"), 2);
  testing::write_text_file(dir_ / "bad.json", R"({"decisions": {"gamma": 0.5, "gama": 1}})");
  EXPECT_EQ(run_cli("--config " + q(dir_ / "bad.json") + " gradcheck"), 2);
}

TEST_F(CliTest, ExtractRefsRecoversSingleTalkerAudio) {
  write_staggered();
  ASSERT_EQ(cli("oracle-decisions --stems " + q(dir_ / "a.wav") + " " + q(dir_ / "b.wav") +
                " --speakers a,b --utt mix --out " + q(dir_ / "d.csv")),
            0);
  ASSERT_EQ(cli("extract-refs --mixture " + q(dir_ / "mix.wav") + " --decisions " + q(dir_ / "d.csv") +
                " --out " + q(dir_ / "refs")),
            0);
  const auto mix = read_wav(dir_ / "mix.wav");
  EXPECT_EQ(read_wav(dir_ / "refs" / "ref_a.wav").vec(), slice(mix, 0, 8000));
  EXPECT_EQ(read_wav(dir_ / "refs" / "ref_b.wav").vec(), slice(mix, 12000, 20000));
  EXPECT_EQ(testing::read_bytes(dir_ / "refs" / "segments.csv").size(),
            std::string("spk,start_s,end_s\na,0.000000,1.000000\nb,1.500000,2.500000\n").size());

  // The same activity given as RTTM.
  testing::write_text_file(dir_ / "d.rttm",
                           "SPEAKER mix 1 0.000 1.500 <NA> <NA> a <NA> <NA>\n"
                           "SPEAKER mix 1 1.000 1.500 <NA> <NA> b <NA> <NA>\n");
  ASSERT_EQ(cli("extract-refs --mixture " + q(dir_ / "mix.wav") + " --decisions " + q(dir_ / "d.rttm") +
                " --out " + q(dir_ / "refs_rttm")),
            0);
  EXPECT_EQ(tree_bytes(dir_ / "refs"), tree_bytes(dir_ / "refs_rttm"));
}

class RampedCliTest : public CliTest {
 protected:
  void SetUp() override {
    ramp_ = 0.010;
    CliTest::SetUp();
  }
};

TEST_F(RampedCliTest, RampsStayInsideTheSegment) {
  write_staggered();
  ASSERT_EQ(cli("oracle-decisions --stems " + q(dir_ / "a.wav") + " " + q(dir_ / "b.wav") +
                " --speakers a,b --out " + q(dir_ / "d.csv")),
            0);
  ASSERT_EQ(cli("extract-refs --mixture " + q(dir_ / "mix.wav") + " --decisions " + q(dir_ / "d.csv") +
                " --out " + q(dir_ / "refs")),
            0);
  const auto mix = read_wav(dir_ / "mix.wav");
  const auto b = read_wav(dir_ / "refs" / "ref_b.wav");
  ASSERT_EQ(b.size(), 8000u);
  // 80-sample fade-in at the inner edge; none at the end of the signal.
  for (std::size_t n = 0; n < 8000; ++n) {
    if (n >= 80) {
      ASSERT_EQ(b[n], mix[12000 + n]) << n;
    } else {
      ASSERT_LE(std::abs(b[n]), std::abs(mix[12000 + n])) << n;
    }
    if (n < 40) {
      ASSERT_LT(std::abs(b[n]), std::abs(mix[12000 + n])) << n;
    }
  }
}

TEST_F(CliTest, FullyOverlappedMixtureIsDataError) {
  const auto a = burst(16000, 0, 16000, 0.4, 3), b = burst(16000, 0, 16000, 0.3, 5);
  write_wav(a, dir_ / "a.wav");
  write_wav(b, dir_ / "b.wav");
  write_wav(sum(a, b), dir_ / "mix.wav");
  ASSERT_EQ(cli("oracle-decisions --stems " + q(dir_ / "a.wav") + " " + q(dir_ / "b.wav") +
                " --speakers a,b --out " + q(dir_ / "d.csv")),
            0);
  EXPECT_EQ(cli("extract-refs --mixture " + q(dir_ / "mix.wav") + " --decisions " + q(dir_ / "d.csv") +
                " --out " + q(dir_ / "refs")),
            3);
}

class TrainedCliTest : public CliTest {
 protected:
  void SetUp() override {
    CliTest::SetUp();
    ASSERT_EQ(cli("--seed 5 simulate --synthetic-speakers 3 --synthetic-utts 2 --out " + q(dir_ / "data")), 0);
    manifest_ = dir_ / "data" / "manifest.jsonl";
  }
  fs::path manifest_;
};

TEST_F(TrainedCliTest, ZeroStepsWritesInitialization) {
  ASSERT_EQ(cli("train --max-steps 0 --train " + q(manifest_) + " --out " + q(dir_ / "run")), 0);
  for (const char* f : {"best.ckpt", "last.ckpt", "loss.log", "valid.log", "config.json"})
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  auto cfg = SeparatorConfig::tiny();
  cfg.num_speaker_classes = speaker_classes(read_manifest(manifest_)).size();
  const Separator init(cfg, load_run_config(dir_ / "cfg.json").train.seed);
  const auto model = model_from_checkpoint(load_checkpoint(dir_ / "run" / "best.ckpt"));
  for (const auto& [name, t] : init.params()) EXPECT_EQ(model.params().at(name).values, t.values) << name;
}

TEST_F(TrainedCliTest, TrainingIsByteDeterministic) {
  ASSERT_EQ(cli("train --train " + q(manifest_) + " --out " + q(dir_ / "r1")), 0);
  ASSERT_EQ(cli("train --train " + q(manifest_) + " --out " + q(dir_ / "r2")), 0);
  EXPECT_EQ(tree_bytes(dir_ / "r1"), tree_bytes(dir_ / "r2"));
}

TEST_F(TrainedCliTest, GatingWithAllOnesIsIdentityAndZeroSpanIsSilent) {
  ASSERT_EQ(cli("train --max-steps 0 --train " + q(manifest_) + " --out " + q(dir_ / "run")), 0);
  write_staggered();
  const std::string base = "separate --checkpoint " + q(dir_ / "run" / "best.ckpt") + " --mixture " +
                           q(dir_ / "mix.wav") + " --ref1 " + q(dir_ / "a.wav") + " --ref2 " + q(dir_ / "b.wav");
  DecisionTrack t;
  t.utterance_id = "mix";
  t.speakers = {"a", "b"};
  t.probs.assign(2, std::vector<double>(250, 1.0));
  write_decisions_csv(t, dir_ / "ones.csv");
  for (std::size_t f = 100; f < 160; ++f) t.probs[0][f] = 0.0;
  write_decisions_csv(t, dir_ / "hole.csv");

  ASSERT_EQ(cli(base + " --modify off --out " + q(dir_ / "plain")), 0);
  ASSERT_EQ(cli(base + " --decisions " + q(dir_ / "ones.csv") + " --modify on --out " + q(dir_ / "ones")), 0);
  ASSERT_EQ(cli(base + " --decisions " + q(dir_ / "hole.csv") + " --out " + q(dir_ / "hole")), 0);
  EXPECT_EQ(tree_bytes(dir_ / "plain"), tree_bytes(dir_ / "ones"));
  const auto gated = read_wav(dir_ / "hole" / "est_s1.wav");
  for (std::size_t n = 8000; n < 12800; ++n) ASSERT_EQ(gated[n], 0.0) << n;
  EXPECT_EQ(testing::read_bytes(dir_ / "hole" / "est_s2.wav"), testing::read_bytes(dir_ / "plain" / "est_s2.wav"));
  // Forcing the gate without decisions is a configuration error.
  EXPECT_EQ(cli(base + " --modify on --out " + q(dir_ / "bad")), 2);
}

TEST_F(TrainedCliTest, BatchSeparationIndependentOfJobs) {
  ASSERT_EQ(cli("train --max-steps 0 --train " + q(manifest_) + " --out " + q(dir_ / "run")), 0);
  const std::string base = "separate --checkpoint " + q(dir_ / "run" / "best.ckpt") + " --manifest " + q(manifest_);
  ASSERT_EQ(cli(base + " --jobs 1 --out " + q(dir_ / "j1")), 0);
  ASSERT_EQ(cli(base + " --jobs 3 --out " + q(dir_ / "j3")), 0);
  EXPECT_EQ(tree_bytes(dir_ / "j1"), tree_bytes(dir_ / "j3"));
  EXPECT_EQ(tree_bytes(dir_ / "j1").size(), 6u);
}

TEST_F(TrainedCliTest, EvaluatingMixtureCopiesGivesZeroImprovement) {
  const auto m = read_manifest(manifest_);
  for (const auto& r : m.records) {
    fs::create_directories(dir_ / "est" / r.utt);
    fs::copy_file(m.resolve(r.mix), dir_ / "est" / r.utt / "est_s1.wav");
    fs::copy_file(m.resolve(r.mix), dir_ / "est" / r.utt / "est_s2.wav");
  }
  ASSERT_EQ(cli("evaluate --manifest " + q(manifest_) + " --estimates " + q(dir_ / "est") + " --report " +
                q(dir_ / "r.json")),
            0);
  std::ifstream in(dir_ / "r.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j["aggregate"]["all"]["si_sdri"].get<double>(), 0.0);
  EXPECT_EQ(j["utterances"].size(), 6u);
  EXPECT_EQ(cli("evaluate --manifest " + q(manifest_) + " --estimates " + q(dir_ / "nothing")), 3);
}

TEST_F(CliTest, GradcheckExitCodes) {
  EXPECT_EQ(cli("gradcheck --samples 30 --report " + q(dir_ / "g.json")), 0);
  std::ifstream in(dir_ / "g.json");
  EXPECT_TRUE(nlohmann::json::parse(in)["passed"].get<bool>());
  EXPECT_EQ(cli("gradcheck --samples 30 --tolerance 1e-300"), 1);
}

TEST(Postprocess, GatingRemovesResidualFromSilentSpan) {
  // The target talks for the first second only; the estimate carries a
  // residual of the other talker in the second half.
  const FrameSpec fs;
  const auto target = burst(16000, 0, 8000, 0.5, 3);
  const auto residual = burst(16000, 8000, 16000, 0.3, 7);
  const auto est = sum(target, residual);
  FrameBits gate(200, 0);
  for (std::size_t f = 0; f < 100; ++f) gate[f] = 1;
  const auto gains = gate_to_samples(gate, fs, 8000, 16000, 0.010);
  const auto out = postprocess(est, 0.9, &gains);
  EXPECT_GT(si_sdr(out.samples(), target.samples()), si_sdr(est.samples(), target.samples()) + 10.0);
  for (std::size_t n = 8000; n < 16000; ++n) ASSERT_EQ(out[n], 0.0);
}

TEST(Postprocess, PeakLimitNeverAmplifies) {
  const Waveform quiet(std::vector<double>{0.1, -0.2}, 8000), loud(std::vector<double>{1.8, -0.9}, 8000);
  EXPECT_EQ(postprocess(quiet, 0.9, nullptr).vec(), quiet.vec());
  EXPECT_EQ(postprocess(loud, 0.9, nullptr).vec(), (std::vector<double>{0.9, -0.45}));
}

TEST(Compare, DirectionIsReportedNotAsserted) {
  VariantReport a{"a.ckpt", "softmax_bind", {}}, b{"b.ckpt", "relu_unbind", {}};
  a.report.overall.si_sdri = 3.0;
  b.report.overall.si_sdri = 4.5;
  const auto j = compare_variants({a, b});
  EXPECT_EQ(j["comparison"]["direction"], "bind < unbind");
  EXPECT_DOUBLE_EQ(j["comparison"]["bind_minus_unbind_si_sdri"].get<double>(), -1.5);
}

}  // namespace
}  // namespace sdmtss

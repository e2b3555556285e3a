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

// Acceptance run: one PASS/FAIL line per criterion. Exit status is 0 only
// when every criterion passes.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>
#include <string>
#include <vector>

#include "sdmtss/config.hpp"
#include "sdmtss/gradcheck.hpp"
#include "sdmtss/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sdmtss;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b);
  return buf;
}

fs::path g_scratch;

fs::path scratch(const std::string& name) {
  const auto p = g_scratch / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int cli(const std::string& args) {
  const std::string cmd = std::string(SDMTSS_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string q(const fs::path& p) { return "'" + p.string() + "'"; }

// FNV-1a over relative paths and file contents, in sorted path order.
std::uint64_t tree_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ULL;
  const auto mix = [&](unsigned char c) {
    h ^= c;
    h *= 1099511628211ULL;
  };
  for (const auto& f : files) {
    for (char c : fs::relative(f, root).generic_string()) mix(static_cast<unsigned char>(c));
    mix(0);
    std::ifstream in(f, std::ios::binary);
    for (std::istreambuf_iterator<char> it(in), end; it != end; ++it) mix(static_cast<unsigned char>(*it));
    mix(0);
  }
  return h;
}

// ------------------------------------------------------------ 1

Outcome decision_algebra() {
  Rng rng(101);
  std::size_t frames = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(10000);
    frames += n;
    // Random probabilities, biased per track so every activity mix occurs.
    const double bias1 = rng.uniform(), bias2 = rng.uniform();
    DecisionTrack t;
    t.speakers = {"a", "b"};
    t.probs.assign(2, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
      t.probs[0][i] = rng.uniform() < bias1 ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.5);
      t.probs[1][i] = rng.uniform() < bias2 ? rng.uniform(0.5, 1.0) : rng.uniform(0.0, 0.5);
    }
    const auto d = binarize(t, 0.5);
    const auto mix = overlap_decision(d);
    const auto g1 = single_talker_gate(d, "a"), g2 = single_talker_gate(d, "b");
    for (std::size_t i = 0; i < n; ++i) {
      const int a = t.probs[0][i] >= 0.5, b = t.probs[1][i] >= 0.5;
      const int both = a && b, only_a = a && !b, only_b = b && !a, none = !a && !b;
      if (d.bits[0][i] != a || d.bits[1][i] != b || mix[i] != both || g1[i] != only_a || g2[i] != only_b)
        return {false, "mismatch at trial " + std::to_string(trial) + " frame " + std::to_string(i)};
      if (both + only_a + only_b + none != 1 || mix[i] + g1[i] + g2[i] + none != 1)
        return {false, "partition broken at trial " + std::to_string(trial) + " frame " + std::to_string(i)};
    }
  }
  return {true, "1000 tracks, " + std::to_string(frames) + " frames match the per-frame loop"};
}

// ------------------------------------------------------------ 2

Outcome reference_exactness() {
  Rng rng(202);
  const FrameSpec fs;
  const int sr = 8000;
  const std::size_t hop = 80;
  RunConfig cfg;
  cfg.decisions.ramp = 0.0;
  const auto sel = cfg.decisions.selection();
  const auto smooth = cfg.decisions.smoothing(fs);
  std::size_t checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    // Activity in blocks of 30..150 frames; a solo block for each talker
    // guarantees a usable reference.
    std::vector<std::array<int, 2>> act;
    const auto block = [&](int a, int b) {
      const std::size_t len = 30 + rng.below(121);
      for (std::size_t i = 0; i < len; ++i) act.push_back({a, b});
    };
    for (std::size_t i = 0, len = 110 + rng.below(40); i < len; ++i) act.push_back({1, 0});
    for (int k = 0, nb = 2 + static_cast<int>(rng.below(5)); k < nb; ++k) {
      const auto s = rng.below(4);
      block(s & 1, (s >> 1) & 1);
    }
    for (std::size_t i = 0, len = 110 + rng.below(40); i < len; ++i) act.push_back({0, 1});
    const std::size_t F = act.size(), n = F * hop;
    std::vector<Waveform> stems;
    for (int s = 0; s < 2; ++s) {
      std::vector<double> v(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (act[i / hop][s]) v[i] = rng.uniform(0.05, 0.4) * (rng.below(2) ? 1.0 : -1.0);
      stems.emplace_back(std::move(v), sr);
    }
    std::vector<double> m(n);
    for (std::size_t i = 0; i < n; ++i) m[i] = stems[0][i] + stems[1][i];
    const Waveform mix(std::move(m), sr);

    const auto track = oracle_decisions({"a", "b"}, stems, fs, 40.0);
    const auto d = binarize(track, cfg.decisions.gamma, smooth);
    const auto refs = extract_references(mix, d, sel);
    for (int s = 0; s < 2; ++s) {
      const auto& r = refs.at(s ? "b" : "a");
      for (std::size_t i = 0; i < n; ++i) {
        const bool solo = act[i / hop][s] && !act[i / hop][1 - s];
        const double want = solo ? stems[s][i] : 0.0;
        if (r.aux[i] != want)
          return {false, "trial " + std::to_string(trial) + " speaker " + std::to_string(s) + " sample " +
                             std::to_string(i)};
      }
      std::size_t pos = 0;
      for (const auto& seg : r.segments)
        for (std::size_t i = seg.start_sample; i < seg.end_sample; ++i, ++pos) {
          const bool solo = act[i / hop][s] && !act[i / hop][1 - s];
          if (!solo || pos >= r.ref.size() || r.ref[pos] != stems[s][i])
            return {false, "trial " + std::to_string(trial) + ": reference sample differs from the stem"};
        }
      if (pos != r.ref.size()) return {false, "reference longer than its segments"};
      checked += n;
    }
  }
  return {true, "50 mixtures, " + std::to_string(checked) + " gated samples exact"};
}

// ------------------------------------------------------------ 3

Outcome gradient_suite() {
  double worst = 0.0;
  std::string worst_name;
  std::size_t ops = 0;
  for (const auto& c : op_gradient_suite(3)) {
    ++ops;
    if (c.max_rel_err > worst) {
      worst = c.max_rel_err;
      worst_name = c.name;
    }
  }
  const auto r = grad_check(SeparatorConfig::tiny(), 0, 1e-5);
  const bool pass = worst <= 1e-4 && r.max_rel_err <= 1e-4 && r.checked > 0;
  return {pass, std::to_string(ops) + " ops max " + fmt("%.2e", worst) + " (" + worst_name + "); total_loss " +
                    std::to_string(r.checked) + "/" + std::to_string(r.parameters) + " params checked, " +
                    std::to_string(r.kink_skipped) + " on kinks, max " + fmt("%.2e", r.max_rel_err)};
}

// ------------------------------------------------------------ 4

Outcome mask_coupling() {
  Rng rng(404);
  auto bind_cfg = SeparatorConfig::tiny();
  auto unbind_cfg = bind_cfg;
  unbind_cfg.mask_activation = MaskActivation::relu_unbind;
  Separator bind(bind_cfg, 1), unbind(unbind_cfg, 1);
  const auto noise = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = 0.3 * rng.normal();
    return Waveform(std::move(v), 8000);
  };
  double worst = 0.0, min_unbind = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto mix = noise(160 + rng.below(800)), r1 = noise(160 + rng.below(400)), r2 = noise(160 + rng.below(400));
    ad::Tape t;
    bind.bind(t);
    const auto out = bind.forward(t, mix, r1, r2);
    const auto& sh = out.masks.shape();
    const auto v = out.masks.values();
    const std::size_t cells = sh[2] * sh[3];
    for (std::size_t s = 0; s < sh[0]; ++s)
      for (std::size_t c = 0; c < cells; ++c)
        worst = std::max(worst, std::abs(v[(s * 2) * cells + c] + v[(s * 2 + 1) * cells + c] - 1.0));
    bind.unbind();
    ad::Tape u;
    unbind.bind(u);
    for (double x : unbind.forward(u, mix, r1, r2).masks.values()) min_unbind = std::min(min_unbind, x);
    unbind.unbind();
  }
  return {worst <= 1e-6 && min_unbind >= 0.0,
          "bind max |sum - 1| " + fmt("%.1e", worst) + ", unbind min " + fmt("%g", min_unbind)};
}

// ------------------------------------------------------------ 5

Outcome metric_contracts() {
  Rng rng(505);
  double drift = 0.0, proj_gap = 0.0;
  for (int k = 0; k < 50; ++k) {
    std::vector<double> r(1000), e(1000);
    for (std::size_t i = 0; i < r.size(); ++i) {
      r[i] = rng.normal();
      e[i] = r[i] + rng.uniform(0.1, 2.0) * rng.normal();
    }
    const double base = si_sdr(e, r);
    for (double s : {0.1, 0.5, 2.0, 10.0, 1000.0}) {
      std::vector<double> x(e);
      for (double& v : x) v *= s;
      drift = std::max(drift, std::abs(si_sdr(x, r) - base));
    }
    const double me = std::accumulate(e.begin(), e.end(), 0.0) / 1000, mr = std::accumulate(r.begin(), r.end(), 0.0) / 1000;
    for (double& v : e) v -= me;
    for (double& v : r) v -= mr;
    proj_gap = std::max(proj_gap, std::abs(sdr_projection(e, r, 1) - si_sdr(e, r)));
  }
  const std::vector<double> ref{1, 1}, est{1, 0};
  const double worked = si_sdr(est, ref, false);
  std::vector<double> r(300);
  for (auto& v : r) v = rng.normal();
  const double cap = si_sdr(r, r);
  const bool pass = drift <= 1e-6 && proj_gap <= 1e-6 && cap == kDbCap && std::abs(worked) < 0.005;
  return {pass, "scale drift " + fmt("%.1e", drift) + " dB, L=1 projection gap " + fmt("%.1e", proj_gap) +
                    " dB, est=ref " + fmt("%.2f", cap) + " dB, [1,0] vs [1,1] " + fmt("%.2f", std::abs(worked)) + " dB (raw " + fmt("%.1e", worked) + ")"};
}

// ------------------------------------------------------------ 6

Outcome mixture_statistics() {
  const auto dir = scratch("stats");
  SourceCorpusOptions so;
  so.num_speakers = 10;
  so.utterances_per_speaker = 4;
  const auto src = write_synthetic_sources(dir / "src", so, 6);
  const auto m = build_dataset(src, 200, 6, dir / "set");
  double a = 0.0, b = 0.0;
  for (const auto& rec : m.records) {
    const auto mix = read_wav(m.resolve(rec.mix));
    a += si_sdr(mix.samples(), read_wav(m.resolve(rec.s1)).samples());
    b += si_sdr(mix.samples(), read_wav(m.resolve(rec.s2)).samples());
  }
  a /= static_cast<double>(m.records.size());
  b /= static_cast<double>(m.records.size());
  return {a >= 2.0 && a <= 3.0 && b >= -3.0 && b <= -2.0,
          fmt("mean SI-SDR(mix, s1) %.2f dB, (mix, s2) %.2f dB over 200 mixtures", a, b)};
}

// ------------------------------------------------------------ 7

Outcome learning_capability() {
  const auto dir = scratch("overfit");
  SourceCorpusOptions so;
  so.num_speakers = 4;
  so.utterances_per_speaker = 3;
  so.min_duration = 1.0;
  so.max_duration = 1.5;
  const auto src = write_synthetic_sources(dir / "src", so, 3);
  const auto man = build_dataset(src, 4, 11, dir / "set");
  const auto data = load_train_data(man, man);
  TrainConfig tc;
  tc.max_steps = 2000;
  tc.batch_size = 2;
  tc.eval_every = 200;
  tc.crop_seconds = 1.0;
  tc.ref_seconds = 1.0;
  tc.learning_rate = 3e-3;
  tc.lr_halve_patience = 3;
  const auto cfg = SeparatorConfig::overfit();
  const auto first = train(data, cfg, tc, LossWeights{});
  const auto again = train(data, cfg, tc, LossWeights{});
  auto model = model_from_checkpoint(first.best);
  const double gain = mean_si_sdri(model, data.train, 8000);
  const bool same = encode_checkpoint(first.best) == encode_checkpoint(again.best) &&
                    encode_checkpoint(first.last) == encode_checkpoint(again.last);
  return {gain >= 5.0 && same,
          fmt("overfit preset (%.0f params), 2000 steps: mean train SI-SDRi %.2f dB", static_cast<double>(model.parameter_count()), gain) +
              (same ? ", rerun bit-identical" : ", rerun differs")};
}

// ------------------------------------------------------------ 8

Outcome bind_vs_unbind() {
  const auto dir = scratch("variants");
  SourceCorpusOptions so;
  so.num_speakers = 4;
  so.utterances_per_speaker = 3;
  so.min_duration = 1.0;
  so.max_duration = 1.5;
  const auto src = write_synthetic_sources(dir / "src", so, 8);
  const auto train_m = build_dataset(src, 6, 21, dir / "train");
  const auto valid_m = build_dataset(src, 3, 22, dir / "valid");
  const auto data = load_train_data(train_m, valid_m);
  TrainConfig tc;
  tc.max_steps = 300;
  tc.eval_every = 100;
  tc.crop_seconds = 0.5;
  tc.ref_seconds = 0.5;
  tc.learning_rate = 1e-2;
  RunConfig rc;
  rc.filter_len = 64;
  std::vector<VariantReport> v;
  for (auto act : {MaskActivation::softmax_bind, MaskActivation::relu_unbind}) {
    auto cfg = SeparatorConfig::tiny();
    cfg.mask_activation = act;
    const auto res = train(data, cfg, tc, LossWeights{});
    const auto model = model_from_checkpoint(res.best);
    v.push_back({to_string(act) + ".ckpt", to_string(act), evaluate_checkpoint(rc, model, valid_m, false, 2)});
  }
  const auto j = compare_variants(v);
  std::ofstream(dir / "comparison.json") << j.dump(2) << '\n';
  const auto& c = j["comparison"];
  const bool pass = j["variants"].size() == 2 && c.contains("direction") &&
                    std::isfinite(c["bind_minus_unbind_si_sdri"].get<double>());
  return {pass, fmt("bind SI-SDRi %.2f dB, unbind %.2f dB: ", c["si_sdri_first"].get<double>(),
                    c["si_sdri_second"].get<double>()) + c["direction"].get<std::string>()};
}

// ------------------------------------------------------------ 9

Outcome decision_modification() {
  Rng rng(909);
  RunConfig cfg;
  const FrameSpec fs;
  double min_gain = 1e9, sum_gain = 0.0;
  for (int k = 0; k < 20; ++k) {
    // Target talks in blocks; the estimate leaks the other talker only
    // where the target is silent.
    const std::size_t F = 200 + rng.below(200), n = F * 80;
    std::vector<int> on(F);
    for (std::size_t f = 0; f < F;) {
      const int state = static_cast<int>(rng.below(2));
      for (std::size_t e = std::min(F, f + 40 + rng.below(80)); f < e; ++f) on[f] = state;
    }
    on[0] = 1;
    for (std::size_t f = F / 2; f < F / 2 + 40; ++f) on[f] = 0;  // at least one silent stretch
    std::vector<double> target(n), est(n);
    const double leak = rng.uniform(0.05, 0.5);
    for (std::size_t i = 0; i < n; ++i) {
      target[i] = on[i / 80] ? 0.5 * std::sin(0.05 * static_cast<double>(i)) + 0.1 * rng.normal() : 0.0;
      est[i] = target[i] + (on[i / 80] ? 0.0 : leak * rng.normal());
    }
    DecisionTrack t;
    t.speakers = {"a", "b"};
    t.probs.assign(2, std::vector<double>(F, 0.0));
    for (std::size_t f = 0; f < F; ++f) t.probs[0][f] = on[f];
    const auto d = binarize(t, cfg.decisions.gamma, cfg.decisions.smoothing(fs));
    const auto gains = gate_to_samples(d.row("a"), fs, 8000, n, cfg.inference.ramp);
    const auto plain = postprocess(Waveform(est, 8000), cfg.inference.peak_norm, nullptr);
    const auto gated = postprocess(Waveform(est, 8000), cfg.inference.peak_norm, &gains);
    const double g = si_sdr(gated.samples(), target) - si_sdr(plain.samples(), target);
    min_gain = std::min(min_gain, g);
    sum_gain += g;
  }
  return {min_gain > 0.0, fmt("20 residual cases: mean gain %.2f dB, smallest %.2f dB", sum_gain / 20, min_gain)};
}

// ------------------------------------------------------------ 10

Outcome reproducibility() {
  const auto dir = scratch("repro");
  RunConfig cfg;
  cfg.separator = SeparatorConfig::tiny();
  cfg.train.max_steps = 20;
  cfg.train.eval_every = 10;
  cfg.train.crop_seconds = 0.5;
  cfg.train.ref_seconds = 0.5;
  cfg.simulate_count = 6;
  cfg.decisions.min_ref_dur = 0.5;
  cfg.filter_len = 64;
  std::ofstream(dir / "cfg.json") << to_json(cfg).dump(2);
  const std::string base = "--config " + q(dir / "cfg.json") + " --seed 13 ";
  std::vector<std::uint64_t> hashes[2];
  for (int run = 0; run < 2; ++run) {
    const auto r = dir / ("run" + std::to_string(run));
    const auto man = r / "data" / "manifest.jsonl";
    const std::vector<std::string> steps = {
        "simulate --synthetic-speakers 4 --synthetic-utts 3 --out " + q(r / "data"),
        "train --train " + q(man) + " --out " + q(r / "model"),
        "separate --checkpoint " + q(r / "model" / "best.ckpt") + " --manifest " + q(man) + " --jobs 2 --out " +
            q(r / "est"),
        "evaluate --manifest " + q(man) + " --estimates " + q(r / "est") + " --report " + q(r / "eval" / "report.json"),
    };
    fs::create_directories(r / "eval");
    for (const auto& s : steps)
      if (int rc = cli(base + s); rc != 0) return {false, "command failed with exit " + std::to_string(rc) + ": " + s};
    for (const char* sub : {"data", "model", "est", "eval"}) hashes[run].push_back(tree_hash(r / sub));
  }
  const bool same = hashes[0] == hashes[1];
  char buf[200];
  std::snprintf(buf, sizeof buf, "simulate %016llx, train %016llx, separate %016llx, evaluate %016llx",
                static_cast<unsigned long long>(hashes[0][0]), static_cast<unsigned long long>(hashes[0][1]),
                static_cast<unsigned long long>(hashes[0][2]), static_cast<unsigned long long>(hashes[0][3]));
  return {same, std::string(buf) + (same ? " on both runs" : "; second run differs")};
}

}  // namespace

int main(int argc, char** argv) {
  // Optional arguments pick a subset of criteria by number.
  std::vector<bool> wanted(11, argc <= 1);
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k >= 1 && k <= 10) wanted[static_cast<std::size_t>(k)] = true;
  }
  g_scratch = fs::temp_directory_path() / ("sdmtss_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_scratch);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"decision algebra matches brute force", decision_algebra},
      {"reference extraction is exact", reference_exactness},
      {"gradient suite", gradient_suite},
      {"mask coupling", mask_coupling},
      {"metric contracts", metric_contracts},
      {"mixture statistics", mixture_statistics},
      {"learning capability", learning_capability},
      {"bind vs unbind report", bind_vs_unbind},
      {"decision-based modification helps", decision_modification},
      {"byte-deterministic pipeline", reproducibility},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!wanted[i + 1]) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %zu: %s  %s: %s (%.1f s)\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first,
                o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::error_code ec;
  fs::remove_all(g_scratch, ec);
  return failed == 0 ? 0 : 1;
}

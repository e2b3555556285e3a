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

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdmtss/audio.hpp"
#include "sdmtss/error.hpp"
#include "sdmtss/mixsim.hpp"
#include "sdmtss/objectives.hpp"

namespace sdmtss {

/// SDR after least-squares projection of `est` onto `ref` delayed by
/// 0 .. filter_len-1 samples (delayed copies are truncated at the signal
/// end, so the Gram matrix is the exact finite-length one, a Toeplitz matrix
/// minus tail corrections). Capped to [-60, 60] dB.
inline double sdr_projection(std::span<const double> est, std::span<const double> ref,
                             std::size_t filter_len = 512) {
  const std::size_t T = ref.size(), L = filter_len;
  if (est.size() != T) throw ConfigError("sdr_projection: length mismatch");
  if (L == 0 || T < L) throw ConfigError("sdr_projection: signals shorter than filter_len");

  std::vector<double> G(L * L), b(L, 0.0);
  for (std::size_t d = 0; d < L; ++d) {
    double r = 0.0;
    for (std::size_t u = 0; u + d < T; ++u) r += ref[u + d] * ref[u];
    G[d] = r;
  }
  for (std::size_t i = 0; i + 1 < L; ++i)
    for (std::size_t j = i; j + 1 < L; ++j)
      G[(i + 1) * L + (j + 1)] = G[i * L + j] - ref[T - 1 - i] * ref[T - 1 - j];
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < i; ++j) G[i * L + j] = G[j * L + i];
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t t = i; t < T; ++t) b[i] += est[t] * ref[t - i];

  // Cholesky, dropping directions that are numerically dependent on
  // earlier ones; their coefficients are fixed at zero.
  double max_diag = 0.0;
  for (std::size_t i = 0; i < L; ++i) max_diag = std::max(max_diag, G[i * L + i]);
  if (!(max_diag > 0.0)) throw DataError("sdr_projection: reference is identically zero");
  const double tol = max_diag * 1e-12;
  std::vector<double> chol(L * L, 0.0);
  std::vector<bool> active(L, true);
  for (std::size_t j = 0; j < L; ++j) {
    double d = G[j * L + j];
    for (std::size_t k = 0; k < j; ++k) d -= chol[j * L + k] * chol[j * L + k];
    if (d <= tol) {
      active[j] = false;
      continue;
    }
    const double djj = std::sqrt(d);
    chol[j * L + j] = djj;
    for (std::size_t i = j + 1; i < L; ++i) {
      double s = G[i * L + j];
      for (std::size_t k = 0; k < j; ++k) s -= chol[i * L + k] * chol[j * L + k];
      chol[i * L + j] = s / djj;
    }
  }
  std::vector<double> y(L, 0.0), c(L, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    if (!active[i]) continue;
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= chol[i * L + k] * y[k];
    y[i] = s / chol[i * L + i];
  }
  for (std::size_t i = L; i-- > 0;) {
    if (!active[i]) continue;
    double s = y[i];
    for (std::size_t k = i + 1; k < L; ++k) s -= chol[k * L + i] * c[k];
    c[i] = s / chol[i * L + i];
  }

  double sig = 0.0, err = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double p = 0.0;
    for (std::size_t i = 0; i < L && i <= t; ++i) p += c[i] * ref[t - i];
    sig += p * p;
    err += (est[t] - p) * (est[t] - p);
  }
  if (err == 0.0) return kDbCap;
  if (sig == 0.0) return -kDbCap;
  return std::clamp(10.0 * std::log10(sig / err), -kDbCap, kDbCap);
}

// Pairwise summation in a fixed split order.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t h = v.size() / 2;
  return pairwise_sum(v.subspan(0, h)) + pairwise_sum(v.subspan(h));
}

struct SpeakerScore {
  std::string utt;
  std::string spk;  // "s1" or "s2"
  double sdr = 0.0, si_sdr = 0.0, sdri = 0.0, si_sdri = 0.0;
};

struct ScoreMeans {
  double sdr = 0.0, si_sdr = 0.0, sdri = 0.0, si_sdri = 0.0;
  std::size_t count = 0;
};

struct EvalReport {
  std::vector<SpeakerScore> rows;
  ScoreMeans s1, s2, overall;
  nlohmann::json config;
};

inline ScoreMeans mean_scores(const std::vector<const SpeakerScore*>& rows) {
  ScoreMeans m;
  m.count = rows.size();
  if (rows.empty()) return m;
  const auto avg = [&](double SpeakerScore::*field) {
    std::vector<double> v;
    for (const auto* r : rows) v.push_back(r->*field);
    return pairwise_sum(v) / static_cast<double>(v.size());
  };
  m.sdr = avg(&SpeakerScore::sdr);
  m.si_sdr = avg(&SpeakerScore::si_sdr);
  m.sdri = avg(&SpeakerScore::sdri);
  m.si_sdri = avg(&SpeakerScore::si_sdri);
  return m;
}

inline void finalize(EvalReport& r) {
  std::vector<const SpeakerScore*> a, b, all;
  for (const auto& row : r.rows) {
    (row.spk == "s1" ? a : b).push_back(&row);
    all.push_back(&row);
  }
  r.s1 = mean_scores(a);
  r.s2 = mean_scores(b);
  r.overall = mean_scores(all);
}

/// Scores one estimate against its stem, with improvements over the mixture.
inline SpeakerScore score_estimate(const std::string& utt, const std::string& spk, const Waveform& est,
                                   const Waveform& stem, const Waveform& mixture, std::size_t filter_len) {
  if (est.size() != stem.size() || mixture.size() != stem.size())
    throw DataError(utt + "/" + spk + ": estimate, stem and mixture lengths differ (" +
                    std::to_string(est.size()) + ", " + std::to_string(stem.size()) + ", " +
                    std::to_string(mixture.size()) + ")");
  const std::size_t L = std::min(filter_len, stem.size());
  SpeakerScore s;
  s.utt = utt;
  s.spk = spk;
  s.sdr = sdr_projection(est.samples(), stem.samples(), L);
  s.si_sdr = si_sdr(est.samples(), stem.samples());
  const double mix_sdr = sdr_projection(mixture.samples(), stem.samples(), L);
  const double mix_si = si_sdr(mixture.samples(), stem.samples());
  s.sdri = s.sdr - mix_sdr;
  s.si_sdri = s.si_sdr - mix_si;
  return s;
}

/// Estimate source for evaluate(): returns (est_s1, est_s2) for a record.
using EstimateFn = std::function<std::array<Waveform, 2>(const ManifestRecord&)>;

inline EvalReport evaluate_with(const Manifest& manifest, const EstimateFn& estimates, std::size_t filter_len = 512) {
  EvalReport report;
  for (const auto& rec : manifest.records) {
    const auto mix = read_wav(manifest.resolve(rec.mix));
    const std::array<Waveform, 2> stems{read_wav(manifest.resolve(rec.s1)), read_wav(manifest.resolve(rec.s2))};
    const auto est = estimates(rec);
    for (std::size_t s = 0; s < 2; ++s)
      report.rows.push_back(score_estimate(rec.utt, s == 0 ? "s1" : "s2", est[s], stems[s], mix, filter_len));
  }
  finalize(report);
  report.config = {{"filter_len", filter_len}, {"records", manifest.records.size()}};
  return report;
}

inline std::filesystem::path estimate_path(const std::filesystem::path& dir, const std::string& utt, int spk) {
  return dir / utt / (spk == 0 ? "est_s1.wav" : "est_s2.wav");
}

/// Scores `<estimates_dir>/<utt>/est_s{1,2}.wav` for every record. All
/// missing files are reported together.
inline EvalReport evaluate(const Manifest& manifest, const std::filesystem::path& estimates_dir,
                           std::size_t filter_len = 512) {
  std::vector<std::string> missing;
  for (const auto& rec : manifest.records)
    for (int s = 0; s < 2; ++s) {
      const auto p = estimate_path(estimates_dir, rec.utt, s);
      if (!std::filesystem::exists(p)) missing.push_back(p.string());
    }
  if (!missing.empty()) {
    std::string msg = "missing estimate files:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw DataError(msg);
  }
  auto r = evaluate_with(
      manifest,
      [&](const ManifestRecord& rec) {
        return std::array<Waveform, 2>{read_wav(estimate_path(estimates_dir, rec.utt, 0)),
                                       read_wav(estimate_path(estimates_dir, rec.utt, 1))};
      },
      filter_len);
  r.config["estimates_dir"] = estimates_dir.generic_string();
  return r;
}

inline nlohmann::json to_json(const ScoreMeans& m) {
  return {{"sdr", m.sdr}, {"si_sdr", m.si_sdr}, {"sdri", m.sdri}, {"si_sdri", m.si_sdri}, {"count", m.count}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.rows)
    rows.push_back({{"utt", s.utt}, {"spk", s.spk}, {"sdr", s.sdr}, {"si_sdr", s.si_sdr}, {"sdri", s.sdri},
                    {"si_sdri", s.si_sdri}});
  return {{"utterances", rows},
          {"aggregate", {{"s1", to_json(r.s1)}, {"s2", to_json(r.s2)}, {"all", to_json(r.overall)}}},
          {"config", r.config}};
}

inline void write_report(const EvalReport& r, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json(r).dump(2) << '\n';
}

/// Aligned plain-text summary.
inline std::string render_table(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << std::left << std::setw(10) << "speaker" << std::right << std::setw(9) << "SDR" << std::setw(9) << "SI-SDR"
     << std::setw(9) << "SDRi" << std::setw(9) << "SI-SDRi" << std::setw(7) << "n" << '\n';
  const auto line = [&](const char* name, const ScoreMeans& m) {
    os << std::left << std::setw(10) << name << std::right << std::setw(9) << m.sdr << std::setw(9) << m.si_sdr
       << std::setw(9) << m.sdri << std::setw(9) << m.si_sdri << std::setw(7) << m.count << '\n';
  };
  line("s1", r.s1);
  line("s2", r.s2);
  line("all", r.overall);
  return os.str();
}

}  // namespace sdmtss

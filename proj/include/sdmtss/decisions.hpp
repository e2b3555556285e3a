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
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sdmtss/audio.hpp"
#include "sdmtss/error.hpp"

namespace sdmtss {

using FrameBits = std::vector<std::uint8_t>;

/// Frame-level speaker presence probabilities for one utterance.
struct DecisionTrack {
  std::string utterance_id;
  std::vector<std::string> speakers;
  std::vector<std::vector<double>> probs;  // [speaker][frame]
  FrameSpec frame_spec;

  std::size_t num_speakers() const { return speakers.size(); }
  std::size_t num_frames() const { return probs.empty() ? 0 : probs.front().size(); }

  void validate() const {
    frame_spec.validate();
    if (speakers.empty()) throw FormatError("decision track has no speakers");
    if (probs.size() != speakers.size())
      throw FormatError("decision track rows do not match speaker list");
    for (const auto& row : probs) {
      if (row.size() != probs.front().size())
        throw FormatError("decision track rows have unequal length");
      for (double p : row)
        if (!(p >= 0.0 && p <= 1.0))
          throw FormatError("decision probability outside [0, 1]");
    }
  }

  std::size_t index_of(const std::string& spk) const {
    const auto it = std::find(speakers.begin(), speakers.end(), spk);
    if (it == speakers.end()) throw ConfigError("unknown speaker '" + spk + "'");
    return static_cast<std::size_t>(it - speakers.begin());
  }
};

/// Thresholded decision; every entry is exactly 0 or 1.
struct BinaryDecision {
  std::vector<std::string> speakers;
  std::vector<FrameBits> bits;  // [speaker][frame]
  FrameSpec frame_spec;

  std::size_t num_frames() const { return bits.empty() ? 0 : bits.front().size(); }
  std::size_t index_of(const std::string& spk) const {
    const auto it = std::find(speakers.begin(), speakers.end(), spk);
    if (it == speakers.end()) throw ConfigError("unknown speaker '" + spk + "'");
    return static_cast<std::size_t>(it - speakers.begin());
  }
  const FrameBits& row(const std::string& spk) const { return bits[index_of(spk)]; }
};

/// Post-threshold cleanup, in frames. Applied as median filter, then gap
/// merge, then short-run removal. Zero or one disables a stage.
struct SmoothingParams {
  std::size_t median_width = 1;    // odd
  std::size_t max_gap_frames = 0;  // interior 0-runs this short become 1
  std::size_t min_run_frames = 0;  // 1-runs shorter than this become 0

  static SmoothingParams none() { return {}; }

  /// Converts durations in seconds: gaps strictly shorter than `merge_gap`
  /// are closed, runs strictly shorter than `min_run` are dropped.
  static SmoothingParams from_seconds(const FrameSpec& fs, std::size_t median_width,
                                      double merge_gap, double min_run) {
    const auto frames = [&](double s) {
      return static_cast<std::size_t>(std::ceil(s / fs.frame_shift - 1e-9));
    };
    SmoothingParams p;
    p.median_width = median_width;
    const std::size_t gap = frames(merge_gap);
    p.max_gap_frames = gap > 0 ? gap - 1 : 0;
    p.min_run_frames = frames(min_run);
    return p;
  }
};

// Maximal runs of 1 as half-open [begin, end) index pairs.
inline std::vector<std::pair<std::size_t, std::size_t>> runs_of_ones(
    const FrameBits& b) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  std::size_t i = 0;
  while (i < b.size()) {
    if (!b[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < b.size() && b[j]) ++j;
    runs.emplace_back(i, j);
    i = j;
  }
  return runs;
}

namespace detail {

inline FrameBits median_filter(const FrameBits& in, std::size_t width) {
  if (width <= 1 || in.empty()) return in;
  if (width % 2 == 0) throw ConfigError("median width must be odd");
  const auto half = static_cast<long long>(width / 2);
  const auto n = static_cast<long long>(in.size());
  FrameBits out(in.size());
  for (long long t = 0; t < n; ++t) {
    std::size_t ones = 0;
    for (long long k = -half; k <= half; ++k)
      ones += in[static_cast<std::size_t>(std::clamp(t + k, 0LL, n - 1))];
    out[static_cast<std::size_t>(t)] = ones * 2 > width ? 1 : 0;
  }
  return out;
}

inline void merge_gaps(FrameBits& b, std::size_t max_gap) {
  if (max_gap == 0) return;
  const auto runs = runs_of_ones(b);
  for (std::size_t r = 1; r < runs.size(); ++r) {
    const std::size_t gap_begin = runs[r - 1].second, gap_end = runs[r].first;
    if (gap_end - gap_begin <= max_gap)
      std::fill(b.begin() + static_cast<long>(gap_begin),
                b.begin() + static_cast<long>(gap_end), 1);
  }
}

inline void drop_short_runs(FrameBits& b, std::size_t min_run) {
  if (min_run <= 1) return;
  for (const auto& [s, e] : runs_of_ones(b))
    if (e - s < min_run)
      std::fill(b.begin() + static_cast<long>(s), b.begin() + static_cast<long>(e), 0);
}

}  // namespace detail

/// Threshold at `gamma` (inclusive) and clean up each speaker row.
inline BinaryDecision binarize(const DecisionTrack& t, double gamma,
                               const SmoothingParams& smoothing = {}) {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("gamma must lie in (0, 1)");
  BinaryDecision d{t.speakers, {}, t.frame_spec};
  d.bits.reserve(t.probs.size());
  for (const auto& row : t.probs) {
    FrameBits b(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) b[i] = row[i] >= gamma ? 1 : 0;
    b = detail::median_filter(b, smoothing.median_width);
    detail::merge_gaps(b, smoothing.max_gap_frames);
    detail::drop_short_runs(b, smoothing.min_run_frames);
    d.bits.push_back(std::move(b));
  }
  return d;
}

inline void require_two_speakers(const BinaryDecision& d) {
  if (d.speakers.size() != 2)
    throw ConfigError("decision algebra needs exactly 2 speakers, got " +
                      std::to_string(d.speakers.size()));
}

/// Frames where both speakers are active: the element-wise product of rows.
inline FrameBits overlap_decision(const BinaryDecision& d) {
  require_two_speakers(d);
  const auto& a = d.bits[0];
  const auto& b = d.bits[1];
  FrameBits out(a.size());
  for (std::size_t t = 0; t < a.size(); ++t)
    out[t] = static_cast<std::uint8_t>(a[t] * b[t]);
  return out;
}

/// Frames where only `speaker` is active: its row minus the overlap.
inline FrameBits single_talker_gate(const BinaryDecision& d, const std::string& speaker) {
  const auto overlap = overlap_decision(d);
  const auto& row = d.row(speaker);
  FrameBits out(row.size());
  for (std::size_t t = 0; t < row.size(); ++t)
    out[t] = static_cast<std::uint8_t>(row[t] - overlap[t]);
  return out;
}

/// Expands a frame gate to per-sample gains. Each frame bit is held over its
/// hop; every run of ones gets linear ramps of `ramp` seconds on the inside
/// of its edges, except at the signal boundaries. Gains stay zero wherever
/// the gate is zero.
inline std::vector<double> gate_to_samples(const FrameBits& gate, const FrameSpec& fs,
                                           int sample_rate, std::size_t total_samples,
                                           double ramp = 0.0) {
  const std::size_t hop = fs.hop(sample_rate);
  const std::size_t covered = gate.size() * hop;
  if (covered + hop < total_samples || total_samples + hop < covered)
    throw ConfigError("gate of " + std::to_string(gate.size()) +
                      " frames does not cover " + std::to_string(total_samples) +
                      " samples");
  std::vector<double> g(total_samples, 0.0);
  if (gate.empty()) return g;
  for (std::size_t n = 0; n < total_samples; ++n)
    g[n] = gate[std::min(n / hop, gate.size() - 1)];

  const auto ramp_len = static_cast<std::size_t>(std::llround(ramp * sample_rate));
  if (ramp_len == 0) return g;
  const auto sample_bits = FrameBits(g.begin(), g.end());
  for (const auto& [s, e] : runs_of_ones(sample_bits)) {
    const bool ramp_in = s > 0, ramp_out = e < total_samples;
    for (std::size_t n = s; n < e; ++n) {
      double v = 1.0;
      if (ramp_in) v = std::min(v, static_cast<double>(n - s + 1) / ramp_len);
      if (ramp_out) v = std::min(v, static_cast<double>(e - n) / ramp_len);
      g[n] = v;
    }
  }
  return g;
}

/// A maximal single-talker stretch of the mixture.
struct RefSegment {
  std::string speaker_id;
  std::size_t start_sample = 0;
  std::size_t end_sample = 0;
  Waveform audio;
};

struct RefSelectionParams {
  double min_ref_dur = 1.0;
  double max_ref_dur = 10.0;
  double ramp = 0.0;
};

struct SpeakerReference {
  Waveform aux;                      // mixture times the single-talker gains
  Waveform ref;                      // selected segments, concatenated
  std::vector<RefSegment> segments;  // selected, in time order
};

/// Mixture restricted to the single-talker frames of `speaker`.
inline Waveform gated_mixture(const Waveform& m, const BinaryDecision& d,
                              const std::string& speaker, double ramp = 0.0) {
  const auto gains = gate_to_samples(single_talker_gate(d, speaker), d.frame_spec,
                                     m.sample_rate(), m.size(), ramp);
  std::vector<double> out(m.size());
  for (std::size_t n = 0; n < m.size(); ++n) out[n] = m[n] * gains[n];
  return Waveform(std::move(out), m.sample_rate());
}

/// Harvests each speaker's reference speech from the mixture itself. Runs
/// of the single-talker gate at least `min_ref_dur` long are taken longest
/// first until `max_ref_dur` would be exceeded (the first pick is truncated
/// if it alone is too long), then concatenated in time order.
inline std::map<std::string, SpeakerReference> extract_references(
    const Waveform& m, const BinaryDecision& d, const RefSelectionParams& sel = {}) {
  require_two_speakers(d);
  const int sr = m.sample_rate();
  const std::size_t hop = d.frame_spec.hop(sr);
  const std::size_t frames = d.num_frames();
  if (frames * hop + hop < m.size() || m.size() + hop < frames * hop)
    throw ConfigError("decision track and waveform durations differ");

  const auto min_len = static_cast<std::size_t>(std::llround(sel.min_ref_dur * sr));
  const auto max_len = static_cast<std::size_t>(std::llround(sel.max_ref_dur * sr));

  std::map<std::string, SpeakerReference> out;
  for (const auto& spk : d.speakers) {
    const auto gate = single_talker_gate(d, spk);
    const auto gains = gate_to_samples(gate, d.frame_spec, sr, m.size(), sel.ramp);
    std::vector<double> aux(m.size());
    FrameBits on(m.size());
    for (std::size_t n = 0; n < m.size(); ++n) {
      aux[n] = m[n] * gains[n];
      on[n] = gains[n] > 0.0 ? 1 : 0;
    }

    auto runs = runs_of_ones(on);
    std::stable_sort(runs.begin(), runs.end(), [](const auto& a, const auto& b) {
      return a.second - a.first > b.second - b.first;
    });
    std::vector<std::pair<std::size_t, std::size_t>> chosen;
    std::size_t total = 0;
    for (auto [s, e] : runs) {
      const std::size_t len = e - s;
      if (len < min_len || len == 0) break;  // sorted, nothing longer remains
      if (chosen.empty() && len > max_len) {
        chosen.emplace_back(s, s + max_len);
        total = max_len;
        break;
      }
      if (total + len > max_len) continue;
      chosen.emplace_back(s, e);
      total += len;
    }
    if (chosen.empty()) throw NoSingleTalkerSegment(spk);
    std::sort(chosen.begin(), chosen.end());

    SpeakerReference r;
    std::vector<double> ref;
    ref.reserve(total);
    for (auto [s, e] : chosen) {
      std::vector<double> seg(aux.begin() + static_cast<long>(s),
                              aux.begin() + static_cast<long>(e));
      ref.insert(ref.end(), seg.begin(), seg.end());
      r.segments.push_back({spk, s, e, Waveform(std::move(seg), sr)});
    }
    r.aux = Waveform(std::move(aux), sr);
    r.ref = Waveform(std::move(ref), sr);
    out.emplace(spk, std::move(r));
  }
  return out;
}

/// Stand-in for a diarization network: a frame is active when its RMS is
/// within `threshold_db` of the stem's loudest frame. Frames are one hop wide.
inline DecisionTrack oracle_decisions(const std::vector<std::string>& speakers,
                                      const std::vector<Waveform>& stems,
                                      const FrameSpec& fs, double threshold_db,
                                      std::string utterance_id = "utt") {
  if (stems.empty() || stems.size() != speakers.size())
    throw ConfigError("oracle_decisions needs one stem per speaker");
  const std::size_t n = stems.front().size();
  const int sr = stems.front().sample_rate();
  if (n == 0) throw ConfigError("oracle_decisions: zero-length stems");
  for (const auto& s : stems)
    if (s.size() != n || s.sample_rate() != sr)
      throw ConfigError("oracle_decisions: stems are not aligned");

  const std::size_t hop = fs.hop(sr);
  const std::size_t frames = fs.num_frames(n, sr);
  DecisionTrack t{std::move(utterance_id), speakers, {}, fs};
  for (const auto& stem : stems) {
    std::vector<double> ms(frames, 0.0);
    double peak = 0.0;
    for (std::size_t f = 0; f < frames; ++f) {
      const std::size_t s = f * hop, e = std::min(n, s + hop);
      double acc = 0.0;
      for (std::size_t i = s; i < e; ++i) acc += stem[i] * stem[i];
      ms[f] = acc / static_cast<double>(e - s);
      peak = std::max(peak, ms[f]);
    }
    std::vector<double> row(frames, 0.0);
    if (peak > 0.0) {
      // Compare mean squares so a constant stem is active in every frame.
      const double floor = peak * std::pow(10.0, -threshold_db / 10.0);
      for (std::size_t f = 0; f < frames; ++f)
        row[f] = ms[f] > 0.0 && ms[f] >= floor * (1.0 - 1e-12) ? 1.0 : 0.0;
    }
    t.probs.push_back(std::move(row));
  }
  return t;
}

// ------------------------------------------------------------ file formats

/// CSV with header `utt,spk,frame,prob`, one row per (speaker, frame).
inline void write_decisions_csv(const DecisionTrack& t, const std::filesystem::path& path) {
  t.validate();
  std::ostringstream os;
  os << "utt,spk,frame,prob\n" << std::fixed << std::setprecision(6);
  for (std::size_t s = 0; s < t.speakers.size(); ++s)
    for (std::size_t f = 0; f < t.probs[s].size(); ++f)
      os << t.utterance_id << ',' << t.speakers[s] << ',' << f << ',' << t.probs[s][f]
         << '\n';
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << os.str();
}

inline DecisionTrack read_decisions_csv(const std::filesystem::path& path,
                                        const FrameSpec& fs = {}) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  const auto fail = [&](std::size_t line, const std::string& why) {
    return FormatError(path.string() + ":" + std::to_string(line) + ": " + why);
  };
  std::string line;
  if (!std::getline(in, line)) throw fail(1, "empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "utt,spk,frame,prob") throw fail(1, "expected header utt,spk,frame,prob");

  DecisionTrack t;
  t.frame_spec = fs;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw fail(lineno, "expected 4 fields");
    if (t.utterance_id.empty()) t.utterance_id = f[0];
    else if (f[0] != t.utterance_id) throw fail(lineno, "mixed utterance ids");
    std::size_t frame;
    double prob;
    try {
      std::size_t used = 0;
      frame = std::stoul(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument(f[2]);
      prob = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
    } catch (const std::exception&) {
      throw fail(lineno, "bad number");
    }
    if (!(prob >= 0.0 && prob <= 1.0)) throw fail(lineno, "probability outside [0, 1]");
    auto it = std::find(t.speakers.begin(), t.speakers.end(), f[1]);
    std::size_t s;
    if (it == t.speakers.end()) {
      t.speakers.push_back(f[1]);
      t.probs.emplace_back();
      s = t.speakers.size() - 1;
    } else {
      s = static_cast<std::size_t>(it - t.speakers.begin());
    }
    if (frame != t.probs[s].size())
      throw fail(lineno, "frames must be dense and ascending from 0");
    t.probs[s].push_back(prob);
  }
  if (t.speakers.empty()) throw fail(lineno, "no decision rows");
  t.validate();
  return t;
}

/// Reads RTTM SPEAKER lines into hard 0/1 probabilities. Speakers are
/// ordered by first appearance. The track spans to the end of the last
/// segment unless `num_frames` is given.
inline DecisionTrack read_rttm(const std::filesystem::path& path, const FrameSpec& fs,
                               std::size_t num_frames = 0) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  struct Seg {
    std::size_t spk;
    double onset, dur;
  };
  DecisionTrack t;
  t.frame_spec = fs;
  std::vector<Seg> segs;
  std::string line;
  std::size_t lineno = 0;
  double end_time = 0.0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ss(line);
    std::vector<std::string> f;
    for (std::string w; ss >> w;) f.push_back(w);
    if (f.empty() || f[0].starts_with('#')) continue;
    if (f[0] != "SPEAKER") continue;
    if (f.size() < 8)
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": SPEAKER line needs at least 8 fields");
    double onset, dur;
    try {
      onset = std::stod(f[3]);
      dur = std::stod(f[4]);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad onset/duration");
    }
    if (onset < 0.0 || dur < 0.0)
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": negative onset/duration");
    if (t.utterance_id.empty()) t.utterance_id = f[1];
    auto it = std::find(t.speakers.begin(), t.speakers.end(), f[7]);
    if (it == t.speakers.end()) {
      t.speakers.push_back(f[7]);
      it = t.speakers.end() - 1;
    }
    segs.push_back({static_cast<std::size_t>(it - t.speakers.begin()), onset, dur});
    end_time = std::max(end_time, onset + dur);
  }
  const auto to_frame = [&](double sec) {
    return static_cast<std::size_t>(std::llround(sec / fs.frame_shift));
  };
  if (num_frames == 0) num_frames = to_frame(end_time);
  if (segs.empty() || num_frames == 0)
    throw FormatError(path.string() + ": RTTM yields a zero-frame track");
  t.probs.assign(t.speakers.size(), std::vector<double>(num_frames, 0.0));
  for (const auto& s : segs) {
    const std::size_t a = std::min(to_frame(s.onset), num_frames);
    const std::size_t b = std::min(to_frame(s.onset + s.dur), num_frames);
    for (std::size_t f = a; f < b; ++f) t.probs[s.spk][f] = 1.0;
  }
  return t;
}

/// Picks the reader from the extension (.rttm or CSV otherwise).
inline DecisionTrack read_decisions(const std::filesystem::path& path, const FrameSpec& fs,
                                    std::size_t num_frames = 0) {
  if (path.extension() == ".rttm") return read_rttm(path, fs, num_frames);
  return read_decisions_csv(path, fs);
}

}  // namespace sdmtss

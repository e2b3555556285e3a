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
#include <array>
#include <cstdio>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdmtss/audio.hpp"
#include "sdmtss/decisions.hpp"
#include "sdmtss/error.hpp"
#include "sdmtss/rng.hpp"

namespace sdmtss {

/// Gain on `s2` that puts the s1:s2 energy ratio at `snr_db`. Energies are
/// measured over the whole of each waveform.
inline double scale_for_relative_snr(const Waveform& s1, const Waveform& s2, double snr_db) {
  const double e1 = s1.energy(), e2 = s2.energy();
  if (e1 <= 0.0 || e2 <= 0.0) throw DataError("zero-energy stem");
  return std::sqrt(e1 / e2) * std::pow(10.0, -snr_db / 20.0);
}

struct MixtureSample {
  std::string utterance_id;
  Waveform mixture;
  std::vector<std::string> speakers;  // [s1, s2]
  std::vector<Waveform> stems;        // aligned with speakers, mixture length
  std::vector<int> labels;            // speaker class indices, -1 when unknown
  double relative_snr_db = 0.0;
  std::vector<Waveform> external_refs;  // empty or one per speaker
};

inline Waveform pad_to(const Waveform& w, std::size_t n) {
  std::vector<double> v(w.vec());
  v.resize(std::max(n, v.size()), 0.0);
  return Waveform(std::move(v), w.sample_rate());
}

/// mixture = s1 + g * s2 with g from scale_for_relative_snr. The shorter stem
/// is zero-padded; if the mixture peak exceeds `peak_norm` every waveform is
/// scaled by the same factor, and the mixture is re-summed from the scaled
/// stems so the sum stays sample-exact.
inline MixtureSample make_mixture(const Waveform& s1, const Waveform& s2, double snr_db,
                                  double peak_norm = 0.9, std::size_t offset2 = 0) {
  if (s1.sample_rate() != s2.sample_rate())
    throw ConfigError("stems have different sample rates");
  const int sr = s1.sample_rate();
  const double g = scale_for_relative_snr(s1, s2, snr_db);
  const std::size_t n = std::max(s1.size(), s2.size() + offset2);
  std::vector<double> a(s1.vec()), b(offset2, 0.0);
  b.insert(b.end(), s2.samples().begin(), s2.samples().end());
  a.resize(n, 0.0);
  b.resize(n, 0.0);
  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    b[i] *= g;
    peak = std::max(peak, std::abs(a[i] + b[i]));
  }
  if (peak_norm > 0.0 && peak > peak_norm) {
    const double k = peak_norm / peak;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] *= k;
      b[i] *= k;
    }
  }
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = a[i] + b[i];

  MixtureSample out;
  out.mixture = Waveform(std::move(m), sr);
  out.speakers = {"s1", "s2"};
  out.stems = {Waveform(std::move(a), sr), Waveform(std::move(b), sr)};
  out.labels = {-1, -1};
  out.relative_snr_db = snr_db;
  return out;
}

// ---------------------------------------------------------------- manifests

struct SourceEntry {
  std::string speaker_id;
  std::filesystem::path wav_path;
};

/// Lines of `speaker_id<TAB>wav_path`; relative paths resolve against the
/// manifest's directory.
inline std::vector<SourceEntry> read_source_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open source manifest " + path.string());
  std::vector<SourceEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 == line.size())
      throw FormatError(path.string() + ":" + std::to_string(lineno) +
                        ": expected speaker_id<TAB>wav_path");
    std::filesystem::path p = line.substr(tab + 1);
    if (p.is_relative()) p = path.parent_path() / p;
    out.push_back({line.substr(0, tab), p});
  }
  return out;
}

inline void write_source_manifest(const std::vector<SourceEntry>& entries,
                                  const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& e : entries) out << e.speaker_id << '\t' << e.wav_path.generic_string() << '\n';
}

struct ManifestRecord {
  std::string utt;
  std::string mix, s1, s2, ref_s1, ref_s2, decisions;  // relative to manifest dir
  double snr_db = 0.0;
  std::string spk1, spk2;
  int label1 = -1, label2 = -1;
};

inline void to_json(nlohmann::json& j, const ManifestRecord& r) {
  j = nlohmann::json{{"utt", r.utt},       {"mix", r.mix},       {"s1", r.s1},
                     {"s2", r.s2},         {"ref_s1", r.ref_s1}, {"ref_s2", r.ref_s2},
                     {"decisions", r.decisions}, {"snr_db", r.snr_db},
                     {"spk1", r.spk1},     {"spk2", r.spk2},     {"label1", r.label1},
                     {"label2", r.label2}};
}

inline void from_json(const nlohmann::json& j, ManifestRecord& r) {
  static const std::set<std::string> known{"utt", "mix",    "s1",     "s2",
                                           "ref_s1", "ref_s2", "decisions", "snr_db",
                                           "spk1", "spk2",   "label1", "label2"};
  for (const auto& [k, v] : j.items())
    if (!known.contains(k)) throw FormatError("unknown manifest field '" + k + "'");
  j.at("utt").get_to(r.utt);
  j.at("mix").get_to(r.mix);
  j.at("s1").get_to(r.s1);
  j.at("s2").get_to(r.s2);
  r.ref_s1 = j.value("ref_s1", "");
  r.ref_s2 = j.value("ref_s2", "");
  r.decisions = j.value("decisions", "");
  r.snr_db = j.value("snr_db", 0.0);
  j.at("spk1").get_to(r.spk1);
  j.at("spk2").get_to(r.spk2);
  r.label1 = j.value("label1", -1);
  r.label2 = j.value("label2", -1);
}

struct Manifest {
  std::filesystem::path dir;  // base for relative paths
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const std::string& p) const {
    const std::filesystem::path q(p);
    return q.is_absolute() ? q : dir / q;
  }
};

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::set<std::string> ids;
  for (const auto& r : m.records)
    if (!ids.insert(r.utt).second) throw ConfigError("duplicate utterance id " + r.utt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : m.records) out << nlohmann::json(r).dump() << '\n';
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open manifest " + path.string());
  Manifest m;
  m.dir = path.parent_path();
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> ids;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto r = nlohmann::json::parse(line).get<ManifestRecord>();
      if (!ids.insert(r.utt).second) throw FormatError("duplicate utterance id " + r.utt);
      m.records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const FormatError& e) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return m;
}

// ------------------------------------------------------- synthetic sources

/// Parameters of a synthetic voiced "speaker": a pitch range and a small
/// vowel inventory of formant triples.
struct SyntheticVoice {
  double f0 = 120.0;
  std::vector<std::array<double, 3>> vowels;
};

inline SyntheticVoice make_voice(Rng& rng) {
  SyntheticVoice v;
  v.f0 = rng.uniform(85.0, 250.0);
  const double tract = rng.uniform(0.85, 1.15);
  for (int k = 0; k < 4; ++k)
    v.vowels.push_back({rng.uniform(300.0, 850.0) * tract,
                        rng.uniform(900.0, 2300.0) * tract,
                        rng.uniform(2400.0, 3300.0) * tract});
  return v;
}

/// Harmonic syllables with formant shaping, Hann envelopes and short pauses.
/// Not speech, but it has the on/off structure and per-speaker timbre that
/// the separation and diarization logic depends on.
inline Waveform synthesize_utterance(const SyntheticVoice& v, double duration,
                                     int sample_rate, Rng& rng) {
  const auto n = static_cast<std::size_t>(duration * sample_rate);
  std::vector<double> out(n, 0.0);
  const double nyq = 0.45 * sample_rate;
  std::size_t pos = static_cast<std::size_t>(rng.uniform(0.0, 0.05) * sample_rate);
  while (pos < n) {
    const auto len = static_cast<std::size_t>(rng.uniform(0.12, 0.30) * sample_rate);
    const auto& formants = v.vowels[rng.below(v.vowels.size())];
    const double f_start = v.f0 * rng.uniform(0.9, 1.1);
    const double f_end = v.f0 * rng.uniform(0.9, 1.1);
    const double level = rng.uniform(0.5, 1.0);
    double phase = 0.0;
    for (std::size_t i = 0; i < len && pos + i < n; ++i) {
      const double frac = static_cast<double>(i) / len;
      const double f0 = f_start + (f_end - f_start) * frac;
      phase += 2.0 * std::numbers::pi * f0 / sample_rate;
      double s = 0.0;
      for (int h = 1; h * f0 < nyq; ++h) {
        const double f = h * f0;
        double a = 0.0;
        for (double fm : formants) {
          const double d = (f - fm) / 120.0;
          a += 1.0 / (1.0 + d * d);
        }
        s += a / std::sqrt(static_cast<double>(h)) * std::sin(h * phase);
      }
      const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * frac);
      out[pos + i] += level * env * s;
    }
    pos += len;
    if (rng.uniform() < 0.35) pos += static_cast<std::size_t>(rng.uniform(0.05, 0.2) * sample_rate);
  }
  double peak = 0.0;
  for (double s : out) peak = std::max(peak, std::abs(s));
  if (peak > 0.0)
    for (double& s : out) s *= 0.5 / peak;
  return Waveform(std::move(out), sample_rate);
}

struct SourceCorpusOptions {
  std::size_t num_speakers = 8;
  std::size_t utterances_per_speaker = 4;
  double min_duration = 1.5;
  double max_duration = 4.0;
  int sample_rate = 8000;
};

/// Writes a synthetic source corpus and its `speaker<TAB>path` manifest.
inline std::vector<SourceEntry> write_synthetic_sources(const std::filesystem::path& out_dir,
                                                        const SourceCorpusOptions& opt,
                                                        std::uint64_t seed) {
  std::filesystem::create_directories(out_dir);
  std::vector<SourceEntry> entries, relative;
  for (std::size_t s = 0; s < opt.num_speakers; ++s) {
    Rng voice_rng = Rng::split(seed, 1000003 * (s + 1));
    const SyntheticVoice voice = make_voice(voice_rng);
    char spk[32];
    std::snprintf(spk, sizeof spk, "spk%02zu", s);
    for (std::size_t u = 0; u < opt.utterances_per_speaker; ++u) {
      Rng rng = Rng::split(seed, 1000003 * (s + 1) + u + 1);
      const double dur = rng.uniform(opt.min_duration, opt.max_duration);
      const auto w = synthesize_utterance(voice, dur, opt.sample_rate, rng);
      const std::string name = std::string(spk) + "_u" + std::to_string(u) + ".wav";
      write_wav(w, out_dir / name);
      entries.push_back({spk, out_dir / name});
      relative.push_back({spk, name});
    }
  }
  write_source_manifest(relative, out_dir / "sources.tsv");
  return entries;
}

// ------------------------------------------------------------ dataset build

struct SimulateOptions {
  int sample_rate = 8000;
  double snr_min_db = 0.0;
  double snr_max_db = 5.0;
  double peak_norm = 0.9;
  double min_ref_dur = 1.0;
  double oracle_threshold_db = 40.0;
  // Meeting-style staggering: s2 starts after a delay drawn uniformly from
  // [0, max_offset * len(s1)). Zero gives fully start-aligned mixtures.
  double max_offset = 0.0;
  FrameSpec frame_spec;
};

/// Class index per speaker: position in the sorted list of distinct ids.
inline std::map<std::string, int> speaker_inventory(const std::vector<SourceEntry>& sources) {
  std::set<std::string> ids;
  for (const auto& s : sources) ids.insert(s.speaker_id);
  std::map<std::string, int> out;
  int k = 0;
  for (const auto& id : ids) out[id] = k++;
  return out;
}

/// Simulates `count` two-speaker mixtures under `out_dir`. Each sample draws
/// from its own stream split off `seed`, so the output depends only on
/// (sources, count, seed, options).
inline Manifest build_dataset(const std::vector<SourceEntry>& sources, std::size_t count,
                              std::uint64_t seed, const std::filesystem::path& out_dir,
                              const SimulateOptions& opt = {}) {
  std::map<std::string, std::vector<std::size_t>> by_speaker;
  for (std::size_t i = 0; i < sources.size(); ++i)
    by_speaker[sources[i].speaker_id].push_back(i);
  if (count > 0 && by_speaker.size() < 2)
    throw DataError("need at least 2 distinct source speakers, got " +
                    std::to_string(by_speaker.size()));
  const auto inventory = speaker_inventory(sources);
  std::vector<std::string> speakers;
  for (const auto& [id, _] : by_speaker) speakers.push_back(id);

  std::map<std::size_t, Waveform> cache;
  const auto load = [&](std::size_t idx) -> const Waveform& {
    auto it = cache.find(idx);
    if (it == cache.end()) {
      auto w = read_wav(sources[idx].wav_path);
      if (w.sample_rate() != opt.sample_rate) w = resample(w, opt.sample_rate);
      it = cache.emplace(idx, std::move(w)).first;
    }
    return it->second;
  };
  // Enrollment-style reference: another utterance of the same speaker,
  // preferring ones at least min_ref_dur long.
  const auto pick_ref = [&](const std::string& spk, std::size_t exclude, Rng& rng) {
    std::vector<std::size_t> long_enough, others;
    for (std::size_t idx : by_speaker.at(spk)) {
      if (idx == exclude) continue;
      others.push_back(idx);
      if (load(idx).duration() >= opt.min_ref_dur) long_enough.push_back(idx);
    }
    const auto& pool = long_enough.empty() ? others : long_enough;
    if (pool.empty())
      throw DataError("speaker " + spk + " has a single utterance; no external reference");
    return pool[rng.below(pool.size())];
  };

  Manifest manifest;
  manifest.dir = out_dir;
  if (count == 0) return manifest;
  std::filesystem::create_directories(out_dir);

  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = Rng::split(seed, i);
    const std::size_t a = rng.below(speakers.size());
    std::size_t b = rng.below(speakers.size() - 1);
    if (b >= a) ++b;
    const auto& spk1 = speakers[a];
    const auto& spk2 = speakers[b];
    const auto& list1 = by_speaker.at(spk1);
    const auto& list2 = by_speaker.at(spk2);
    const std::size_t u1 = list1[rng.below(list1.size())];
    const std::size_t u2 = list2[rng.below(list2.size())];
    const std::size_t r1 = pick_ref(spk1, u1, rng);
    const std::size_t r2 = pick_ref(spk2, u2, rng);
    const double snr = rng.uniform(opt.snr_min_db, opt.snr_max_db);

    std::size_t offset = 0;
    if (opt.max_offset > 0.0)
      offset = static_cast<std::size_t>(rng.uniform() * opt.max_offset *
                                        static_cast<double>(load(u1).size()));
    auto mix = make_mixture(load(u1), load(u2), snr, opt.peak_norm, offset);
    char utt[96];
    std::snprintf(utt, sizeof utt, "mix%05zu_%s_%s", i, spk1.c_str(), spk2.c_str());
    mix.utterance_id = utt;
    mix.speakers = {spk1, spk2};
    mix.labels = {inventory.at(spk1), inventory.at(spk2)};

    const std::string rel = mix.utterance_id + "/";
    write_wav(mix.mixture, out_dir / (rel + "mix.wav"));
    write_wav(mix.stems[0], out_dir / (rel + "s1.wav"));
    write_wav(mix.stems[1], out_dir / (rel + "s2.wav"));
    write_wav(load(r1), out_dir / (rel + "ref_s1.wav"));
    write_wav(load(r2), out_dir / (rel + "ref_s2.wav"));
    const auto track = oracle_decisions(mix.speakers, mix.stems, opt.frame_spec,
                                        opt.oracle_threshold_db, mix.utterance_id);
    write_decisions_csv(track, out_dir / (rel + "decisions.csv"));

    ManifestRecord rec;
    rec.utt = mix.utterance_id;
    rec.mix = rel + "mix.wav";
    rec.s1 = rel + "s1.wav";
    rec.s2 = rel + "s2.wav";
    rec.ref_s1 = rel + "ref_s1.wav";
    rec.ref_s2 = rel + "ref_s2.wav";
    rec.decisions = rel + "decisions.csv";
    rec.snr_db = snr;
    rec.spk1 = spk1;
    rec.spk2 = spk2;
    rec.label1 = mix.labels[0];
    rec.label2 = mix.labels[1];
    manifest.records.push_back(std::move(rec));
  }
  write_manifest(manifest, out_dir / "manifest.jsonl");
  return manifest;
}

}  // namespace sdmtss

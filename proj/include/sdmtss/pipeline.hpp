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

// Subcommand bodies behind the sdmtss binary. Each function does the work
// and throws a typed error; the CLI maps errors onto exit codes.

#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sdmtss/audio.hpp"
#include "sdmtss/checkpoint.hpp"
#include "sdmtss/config.hpp"
#include "sdmtss/decisions.hpp"
#include "sdmtss/log.hpp"
#include "sdmtss/metrics.hpp"
#include "sdmtss/mixsim.hpp"
#include "sdmtss/separator.hpp"
#include "sdmtss/trainer.hpp"

namespace sdmtss {

namespace fs = std::filesystem;

/// Runs body(i) for i in [0, n) on up to `jobs` threads. Results must be
/// written by index so the outcome does not depend on scheduling.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& body) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) body(i, 0);
    return;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j)
    pool.emplace_back([&, j] {
      try {
        for (std::size_t i = j; i < n; i += jobs) body(i, j);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

// ------------------------------------------------------------ simulate

struct SimulateArgs {
  fs::path sources;                // TSV source manifest; empty with synthetic
  std::size_t synthetic_speakers = 0;  // > 0: generate a synthetic corpus first
  std::size_t synthetic_utts = 4;
  fs::path out_dir;
};

inline Manifest cmd_simulate(const RunConfig& cfg, const SimulateArgs& a) {
  std::vector<SourceEntry> sources;
  if (a.synthetic_speakers > 0) {
    SourceCorpusOptions so;
    so.num_speakers = a.synthetic_speakers;
    so.utterances_per_speaker = a.synthetic_utts;
    so.sample_rate = cfg.sample_rate;
    sources = write_synthetic_sources(a.out_dir / "sources", so, cfg.seed);
    log_info("wrote " + std::to_string(sources.size()) + " synthetic source utterances");
  } else {
    if (a.sources.empty()) throw ConfigError("simulate needs --sources or --synthetic-speakers");
    if (!fs::exists(a.sources)) throw ConfigError("source manifest not found: " + a.sources.string());
    sources = read_source_manifest(a.sources);
  }
  auto m = build_dataset(sources, cfg.simulate_count, cfg.seed, a.out_dir, cfg.simulate);
  write_manifest(m, a.out_dir / "manifest.jsonl");
  log_info("simulated " + std::to_string(m.records.size()) + " mixtures into " + a.out_dir.string());
  return m;
}

// ------------------------------------------------------------ oracle decisions

inline DecisionTrack cmd_oracle_decisions(const RunConfig& cfg, const std::vector<std::string>& speakers,
                                          const std::vector<fs::path>& stems, const std::string& utt,
                                          const fs::path& out) {
  if (speakers.size() != stems.size() || stems.empty())
    throw ConfigError("oracle-decisions needs one speaker id per stem");
  std::vector<Waveform> w;
  for (const auto& p : stems) w.push_back(read_wav(p));
  const auto t = oracle_decisions(speakers, w, cfg.frame_spec, cfg.simulate.oracle_threshold_db, utt);
  write_decisions_csv(t, out);
  return t;
}

// ------------------------------------------------------------ extract refs

inline BinaryDecision load_binary_decisions(const RunConfig& cfg, const fs::path& path, std::size_t num_samples,
                                            int sample_rate) {
  const std::size_t frames = cfg.frame_spec.num_frames(num_samples, sample_rate);
  const auto track = read_decisions(path, cfg.frame_spec, frames);
  return binarize(track, cfg.decisions.gamma, cfg.decisions.smoothing(cfg.frame_spec));
}

inline std::map<std::string, SpeakerReference> cmd_extract_refs(const RunConfig& cfg, const fs::path& mixture,
                                                                 const fs::path& decisions, const fs::path& out_dir) {
  const auto mix = read_wav(mixture);
  const auto d = load_binary_decisions(cfg, decisions, mix.size(), mix.sample_rate());
  const auto refs = extract_references(mix, d, cfg.decisions.selection());
  fs::create_directories(out_dir);
  std::ostringstream table;
  table << "spk,start_s,end_s\n";
  char buf[128];
  for (const auto& spk : d.speakers) {
    const auto& r = refs.at(spk);
    write_wav(r.ref, out_dir / ("ref_" + spk + ".wav"));
    for (const auto& s : r.segments) {
      std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f\n", spk.c_str(),
                    static_cast<double>(s.start_sample) / mix.sample_rate(),
                    static_cast<double>(s.end_sample) / mix.sample_rate());
      table << buf;
    }
  }
  write_text(out_dir / "segments.csv", table.str());
  return refs;
}

// ------------------------------------------------------------ train

struct TrainArgs {
  fs::path train_manifest, valid_manifest, out_dir;
};

inline TrainResult cmd_train(const RunConfig& cfg, const TrainArgs& a) {
  const auto train_m = read_manifest(a.train_manifest);
  const auto valid_m = read_manifest(a.valid_manifest.empty() ? a.train_manifest : a.valid_manifest);
  const auto data = load_train_data(train_m, valid_m);
  fs::create_directories(a.out_dir);
  std::ofstream log(a.out_dir / "loss.log", std::ios::binary | std::ios::trunc);
  log << "step\tloss\tsi_sdr_term\tce_term\tlr\n";
  auto res = train(data, cfg.separator, cfg.train, cfg.loss, &log, [](const std::string& s) { log_info(s); });
  save_checkpoint(res.best, a.out_dir / "best.ckpt");
  save_checkpoint(res.last, a.out_dir / "last.ckpt");
  std::ostringstream v;
  v << "step\tvalid_loss\n";
  char buf[64];
  for (const auto& [step, loss] : res.validation) {
    std::snprintf(buf, sizeof buf, "%zu\t%.9g\n", step, loss);
    v << buf;
  }
  write_text(a.out_dir / "valid.log", v.str());
  write_text(a.out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  return res;
}

// ------------------------------------------------------------ separate

/// Peak-limits to `peak` (never amplifies), then optionally gates by the
/// speaker decision. Gating is the last step before writing.
inline Waveform postprocess(const Waveform& est, double peak, const std::vector<double>* gains) {
  std::vector<double> v(est.vec());
  const double p = est.peak();
  if (p > peak) {
    const double k = peak / p;
    for (double& x : v) x *= k;
  }
  if (gains) {
    if (gains->size() != v.size()) throw DataError("gate and estimate lengths differ");
    for (std::size_t n = 0; n < v.size(); ++n) v[n] *= (*gains)[n];
  }
  return Waveform(std::move(v), est.sample_rate());
}

/// Estimates of both speakers, trimmed to the mixture length.
inline std::array<Waveform, 2> run_separator(Separator& model, const Waveform& mix, const Waveform& ref1,
                                             const Waveform& ref2, std::size_t ref_len) {
  const std::size_t min_len = model.config().filter_lengths[2];
  if (ref1.size() == 0 || ref2.size() == 0) throw DataError("empty reference audio");
  auto est = model.infer(at_least(mix, min_len), at_least(head(ref1, ref_len), min_len),
                         at_least(head(ref2, ref_len), min_len));
  for (auto& e : est) e = head(e, mix.size());
  return est;
}

struct SeparateInput {
  Waveform mixture;
  std::optional<Waveform> ref1, ref2;   // explicit references
  std::optional<BinaryDecision> decisions;
};

struct SeparateOutput {
  std::array<Waveform, 2> estimates;
  std::array<std::string, 2> speakers{"s1", "s2"};
  bool gated = false;
  bool refs_from_decisions = false;
};

inline bool modification_enabled(const RunConfig& cfg, bool have_decisions) {
  switch (cfg.inference.modify_with_decisions) {
    case ModifyMode::on:
      if (!have_decisions) throw ConfigError("modify_with_decisions is on but no decisions were given");
      return true;
    case ModifyMode::off:
      return false;
    case ModifyMode::automatic:
    default:
      return have_decisions;
  }
}

/// One mixture. With decisions and no explicit references, references are
/// harvested from the mixture (NoSingleTalkerSegment propagates). The
/// speaker order follows the decision track when present.
inline SeparateOutput separate_one(const RunConfig& cfg, Separator& model, const SeparateInput& in) {
  SeparateOutput out;
  Waveform r1, r2;
  if (in.ref1 && in.ref2) {
    r1 = *in.ref1;
    r2 = *in.ref2;
  } else if (in.decisions) {
    const auto refs = extract_references(in.mixture, *in.decisions, cfg.decisions.selection());
    r1 = refs.at(in.decisions->speakers[0]).ref;
    r2 = refs.at(in.decisions->speakers[1]).ref;
    out.refs_from_decisions = true;
  } else {
    throw ConfigError("separate needs two reference WAVs or a decisions file");
  }
  if (in.decisions) out.speakers = {in.decisions->speakers[0], in.decisions->speakers[1]};
  if (r1.sample_rate() != in.mixture.sample_rate() || r2.sample_rate() != in.mixture.sample_rate())
    throw DataError("reference and mixture sample rates differ");
  const auto ref_len = static_cast<std::size_t>(std::llround(cfg.decisions.max_ref_dur * in.mixture.sample_rate()));
  auto est = run_separator(model, in.mixture, r1, r2, ref_len);
  out.gated = modification_enabled(cfg, in.decisions.has_value());
  for (std::size_t s = 0; s < 2; ++s) {
    std::vector<double> gains;
    if (out.gated)
      gains = gate_to_samples(in.decisions->row(out.speakers[s]), in.decisions->frame_spec,
                              in.mixture.sample_rate(), in.mixture.size(), cfg.inference.ramp);
    out.estimates[s] = postprocess(est[s], cfg.inference.peak_norm, out.gated ? &gains : nullptr);
  }
  return out;
}

struct SeparateArgs {
  fs::path checkpoint;
  fs::path mixture, ref1, ref2, decisions;  // single-file mode
  fs::path manifest;                        // batch mode
  bool use_decisions = false;               // batch: harvest refs from record decisions
  fs::path out_dir;
  std::size_t jobs = 1;
};

struct SeparateSummary {
  std::size_t utterances = 0;
  std::size_t gated = 0;
  std::size_t fallbacks = 0;  // decisions gave no usable segment; external refs used
};

inline void write_estimates(const SeparateOutput& o, const fs::path& dir) {
  write_wav(o.estimates[0], dir / "est_s1.wav");
  write_wav(o.estimates[1], dir / "est_s2.wav");
}

/// Batch estimates for a manifest; fills est[i] for record i.
inline SeparateSummary separate_manifest(const RunConfig& cfg, const Separator& proto, const Manifest& m,
                                         bool use_decisions, std::size_t jobs,
                                         std::vector<SeparateOutput>& est) {
  est.assign(m.records.size(), {});
  std::vector<int> fallback(m.records.size(), 0);
  std::vector<Separator> models(std::max<std::size_t>(1, std::min(jobs, m.records.size())), proto);
  parallel_for(m.records.size(), jobs, [&](std::size_t i, std::size_t worker) {
    const auto& rec = m.records[i];
    SeparateInput in{read_wav(m.resolve(rec.mix)), {}, {}, {}};
    if (use_decisions) {
      if (rec.decisions.empty()) throw DataError(rec.utt + ": record has no decisions file");
      in.decisions = load_binary_decisions(cfg, m.resolve(rec.decisions), in.mixture.size(),
                                           in.mixture.sample_rate());
      if (in.decisions->speakers != std::vector<std::string>{rec.spk1, rec.spk2})
        throw DataError(rec.utt + ": decision speakers do not match the manifest");
    } else {
      in.ref1 = read_wav(m.resolve(rec.ref_s1));
      in.ref2 = read_wav(m.resolve(rec.ref_s2));
    }
    try {
      est[i] = separate_one(cfg, models[worker], in);
    } catch (const NoSingleTalkerSegment& e) {
      if (rec.ref_s1.empty() || rec.ref_s2.empty()) throw;
      log_info(rec.utt + ": " + e.what() + "; using the external references");
      in.ref1 = read_wav(m.resolve(rec.ref_s1));
      in.ref2 = read_wav(m.resolve(rec.ref_s2));
      est[i] = separate_one(cfg, models[worker], in);
      fallback[i] = 1;
    }
  });
  SeparateSummary s;
  s.utterances = m.records.size();
  for (std::size_t i = 0; i < est.size(); ++i) {
    s.gated += est[i].gated ? 1 : 0;
    s.fallbacks += static_cast<std::size_t>(fallback[i]);
  }
  return s;
}

inline SeparateSummary cmd_separate(const RunConfig& cfg, const SeparateArgs& a) {
  auto model = model_from_checkpoint(load_checkpoint(a.checkpoint));
  if (!a.manifest.empty()) {
    const auto m = read_manifest(a.manifest);
    std::vector<SeparateOutput> est;
    const auto s = separate_manifest(cfg, model, m, a.use_decisions, a.jobs, est);
    for (std::size_t i = 0; i < est.size(); ++i) write_estimates(est[i], a.out_dir / m.records[i].utt);
    log_info("separated " + std::to_string(s.utterances) + " mixtures (" + std::to_string(s.gated) + " gated, " +
             std::to_string(s.fallbacks) + " reference fallbacks)");
    return s;
  }
  if (a.mixture.empty()) throw ConfigError("separate needs --mixture or --manifest");
  SeparateInput in{read_wav(a.mixture), {}, {}, {}};
  if (!a.ref1.empty() || !a.ref2.empty()) {
    if (a.ref1.empty() || a.ref2.empty()) throw ConfigError("give both --ref1 and --ref2");
    in.ref1 = read_wav(a.ref1);
    in.ref2 = read_wav(a.ref2);
  }
  if (!a.decisions.empty())
    in.decisions = load_binary_decisions(cfg, a.decisions, in.mixture.size(), in.mixture.sample_rate());
  const auto o = separate_one(cfg, model, in);
  write_estimates(o, a.out_dir);
  return {1, o.gated ? 1u : 0u, 0};
}

// ------------------------------------------------------------ evaluate

struct VariantReport {
  std::string checkpoint;
  std::string mask_activation;
  EvalReport report;
};

/// Scores checkpoints directly on a manifest. With two checkpoints the
/// report carries a bind/unbind comparison; its direction is reported, not
/// asserted.
inline nlohmann::json compare_variants(const std::vector<VariantReport>& v) {
  nlohmann::json j;
  j["variants"] = nlohmann::json::array();
  for (const auto& r : v)
    j["variants"].push_back({{"checkpoint", r.checkpoint}, {"mask_activation", r.mask_activation},
                             {"report", to_json(r.report)}});
  if (v.size() == 2) {
    const double a = v[0].report.overall.si_sdri, b = v[1].report.overall.si_sdri;
    const double sa = v[0].report.overall.sdri, sb = v[1].report.overall.sdri;
    nlohmann::json c = {{"first", v[0].mask_activation},
                        {"second", v[1].mask_activation},
                        {"si_sdri_first", a},
                        {"si_sdri_second", b},
                        {"si_sdri_delta", a - b},
                        {"sdri_delta", sa - sb}};
    const auto find = [&](const char* name) -> const VariantReport* {
      for (const auto& r : v)
        if (r.mask_activation == name) return &r;
      return nullptr;
    };
    const auto* bind = find("softmax_bind");
    const auto* unbind = find("relu_unbind");
    if (bind && unbind && bind != unbind) {
      const double d = bind->report.overall.si_sdri - unbind->report.overall.si_sdri;
      c["bind_minus_unbind_si_sdri"] = d;
      c["direction"] = d > 0 ? "bind > unbind" : (d < 0 ? "bind < unbind" : "bind = unbind");
    }
    j["comparison"] = c;
  }
  return j;
}

inline EvalReport evaluate_checkpoint(const RunConfig& cfg, const Separator& model, const Manifest& m,
                                      bool use_decisions, std::size_t jobs) {
  std::vector<SeparateOutput> est;
  separate_manifest(cfg, model, m, use_decisions, jobs, est);
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < m.records.size(); ++i) index[m.records[i].utt] = i;
  return evaluate_with(
      m, [&](const ManifestRecord& rec) { return est[index.at(rec.utt)].estimates; }, cfg.filter_len);
}

struct EvaluateArgs {
  fs::path manifest;
  fs::path estimates_dir;
  std::vector<fs::path> checkpoints;
  bool use_decisions = false;
  fs::path report;  // JSON output; empty: none
  std::size_t jobs = 1;
};

/// Returns the report JSON; the rendered table goes to `table`.
inline nlohmann::json cmd_evaluate(const RunConfig& cfg, const EvaluateArgs& a, std::string* table = nullptr) {
  const auto m = read_manifest(a.manifest);
  nlohmann::json j;
  if (!a.checkpoints.empty()) {
    if (!a.estimates_dir.empty()) throw ConfigError("give either --estimates or --checkpoint, not both");
    if (a.checkpoints.size() > 2) throw ConfigError("evaluate compares at most two checkpoints");
    std::vector<VariantReport> v;
    for (const auto& ck : a.checkpoints) {
      const auto model = model_from_checkpoint(load_checkpoint(ck));
      v.push_back({ck.filename().string(), to_string(model.config().mask_activation),
                   evaluate_checkpoint(cfg, model, m, a.use_decisions, a.jobs)});
      if (table) *table += v.back().checkpoint + " (" + v.back().mask_activation + ")\n" + render_table(v.back().report);
    }
    j = compare_variants(v);
    if (table && j.contains("comparison") && j["comparison"].contains("direction"))
      *table += "direction: " + j["comparison"]["direction"].get<std::string>() + "\n";
  } else {
    if (a.estimates_dir.empty()) throw ConfigError("evaluate needs --estimates or --checkpoint");
    auto r = evaluate(m, a.estimates_dir, cfg.filter_len);
    r.config["estimates_dir"] = a.estimates_dir.filename().string();
    j = to_json(r);
    if (table) *table = render_table(r);
  }
  if (!a.report.empty()) write_text(a.report, j.dump(2) + "\n");
  return j;
}

// ------------------------------------------------------------ gradcheck

struct GradCheckArgs {
  bool use_config_model = false;  // default: the tiny preset
  std::size_t samples = 256;      // 0 checks every parameter
  double step = 1e-5;
  std::size_t input_length = 400;
  double tolerance = 1e-4;
  fs::path report;
};

inline GradCheckReport cmd_gradcheck(const RunConfig& cfg, const GradCheckArgs& a) {
  const auto sep = a.use_config_model ? cfg.separator : SeparatorConfig::tiny();
  const auto r = grad_check(sep, a.samples, a.step, cfg.loss, cfg.seed, a.input_length);
  if (!a.report.empty()) {
    auto j = to_json(r);
    j["tolerance"] = a.tolerance;
    j["passed"] = r.max_rel_err <= a.tolerance;
    write_text(a.report, j.dump(2) + "\n");
  }
  return r;
}

}  // namespace sdmtss

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

// sdmtss: single binary, one subcommand per pipeline stage.
//
// Exit codes: 0 ok, 1 verification failure, 2 usage or config error,
// 3 data-condition error (unreadable or inconsistent data, no single-talker
// segment, missing files).

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sdmtss/pipeline.hpp"

namespace {

using namespace sdmtss;

enum Exit { kOk = 0, kVerify = 1, kUsage = 2, kData = 3 };

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  std::optional<std::size_t> max_steps;
  std::optional<double> lr;
  std::optional<std::string> mask_activation;
  std::optional<std::string> modify;
  std::optional<int> sample_rate;
  std::optional<double> max_offset;
};

RunConfig resolve_config(const std::string& path, const Overrides& o) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  if (o.seed) {
    c.seed = *o.seed;
    c.train.seed = *o.seed;
  }
  if (o.count) c.simulate_count = *o.count;
  if (o.max_steps) c.train.max_steps = *o.max_steps;
  if (o.lr) c.train.learning_rate = *o.lr;
  if (o.mask_activation) c.separator.mask_activation = mask_activation_from_string(*o.mask_activation);
  if (o.modify) {
    if (*o.modify == "on") c.inference.modify_with_decisions = ModifyMode::on;
    else if (*o.modify == "off") c.inference.modify_with_decisions = ModifyMode::off;
    else if (*o.modify == "auto") c.inference.modify_with_decisions = ModifyMode::automatic;
    else throw ConfigError("--modify must be on, off or auto");
  }
  if (o.sample_rate) {
    c.sample_rate = *o.sample_rate;
    c.simulate.sample_rate = *o.sample_rate;
  }
  if (o.max_offset) c.simulate.max_offset = *o.max_offset;
  c.validate();
  return c;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sdmtss: speaker-diarization-guided target speech separation"};
  app.require_subcommand(1);
  std::string config_path;
  Overrides ov;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", ov.seed, "seed for every random stream");

  // simulate
  auto* sim = app.add_subcommand("simulate", "simulate two-speaker mixtures");
  SimulateArgs sim_args;
  std::string sim_sources, sim_out;
  sim->add_option("--sources", sim_sources, "TSV source manifest (speaker, wav)");
  sim->add_option("--synthetic-speakers", sim_args.synthetic_speakers, "generate a synthetic source corpus");
  sim->add_option("--synthetic-utts", sim_args.synthetic_utts, "utterances per synthetic speaker");
  sim->add_option("--count", ov.count, "number of mixtures");
  sim->add_option("--max-offset", ov.max_offset, "meeting-style start offset of s2, as a fraction of s1");
  sim->add_option("--sample-rate", ov.sample_rate, "output sample rate");
  sim->add_option("--out", sim_out, "output directory")->required();

  // oracle-decisions
  auto* orc = app.add_subcommand("oracle-decisions", "energy-based decisions from clean stems");
  std::vector<std::string> orc_stems;
  std::string orc_speakers, orc_out, orc_utt = "utt";
  orc->add_option("--stems", orc_stems, "stem WAVs, one per speaker")->required()->check(CLI::ExistingFile);
  orc->add_option("--speakers", orc_speakers, "comma-separated speaker ids")->required();
  orc->add_option("--utt", orc_utt, "utterance id");
  orc->add_option("--out", orc_out, "output CSV")->required();

  // extract-refs
  auto* ext = app.add_subcommand("extract-refs", "harvest single-talker references from a mixture");
  std::string ext_mix, ext_dec, ext_out;
  ext->add_option("--mixture", ext_mix, "mixture WAV")->required();
  ext->add_option("--decisions", ext_dec, "decision CSV or RTTM")->required();
  ext->add_option("--out", ext_out, "output directory")->required();

  // train
  auto* trn = app.add_subcommand("train", "train the separator");
  std::string trn_train, trn_valid, trn_out;
  trn->add_option("--train", trn_train, "training manifest")->required();
  trn->add_option("--valid", trn_valid, "validation manifest (default: training manifest)");
  trn->add_option("--out", trn_out, "output directory")->required();
  trn->add_option("--max-steps", ov.max_steps, "optimizer steps");
  trn->add_option("--lr", ov.lr, "learning rate");
  trn->add_option("--mask-activation", ov.mask_activation, "softmax_bind or relu_unbind");

  // separate
  auto* sep = app.add_subcommand("separate", "extract both speakers from mixtures");
  std::string sep_ck, sep_mix, sep_r1, sep_r2, sep_dec, sep_man, sep_out;
  bool sep_use_dec = false;
  std::size_t jobs = 1;
  sep->add_option("--checkpoint", sep_ck, "model checkpoint")->required();
  sep->add_option("--mixture", sep_mix, "mixture WAV");
  sep->add_option("--ref1", sep_r1, "reference WAV of speaker 1");
  sep->add_option("--ref2", sep_r2, "reference WAV of speaker 2");
  sep->add_option("--decisions", sep_dec, "decision CSV or RTTM");
  sep->add_option("--manifest", sep_man, "batch mode over a manifest");
  sep->add_flag("--use-decisions", sep_use_dec, "batch: harvest references from each record's decisions");
  sep->add_option("--modify", ov.modify, "gate estimates by decisions: on, off or auto");
  sep->add_option("--jobs", jobs, "worker threads");
  sep->add_option("--out", sep_out, "output directory")->required();

  // evaluate
  auto* evl = app.add_subcommand("evaluate", "score estimates or checkpoints");
  std::string evl_man, evl_est, evl_report;
  std::vector<std::string> evl_ck;
  bool evl_use_dec = false;
  evl->add_option("--manifest", evl_man, "manifest with stems")->required();
  evl->add_option("--estimates", evl_est, "directory with <utt>/est_s{1,2}.wav");
  evl->add_option("--checkpoint", evl_ck, "one or two checkpoints to run and compare");
  evl->add_flag("--use-decisions", evl_use_dec, "harvest references from decisions");
  evl->add_option("--modify", ov.modify, "gate estimates by decisions: on, off or auto");
  evl->add_option("--jobs", jobs, "worker threads");
  evl->add_option("--report", evl_report, "JSON report path");

  // gradcheck
  auto* grd = app.add_subcommand("gradcheck", "finite-difference check of the full loss");
  GradCheckArgs grd_args;
  std::string grd_report;
  grd->add_flag("--config-model", grd_args.use_config_model, "check the configured separator, not the tiny one");
  grd->add_option("--samples", grd_args.samples, "parameters to check (0: all)");
  grd->add_option("--step", grd_args.step, "finite-difference step");
  grd->add_option("--length", grd_args.input_length, "input length in samples");
  grd->add_option("--tolerance", grd_args.tolerance, "maximum relative error");
  grd->add_option("--report", grd_report, "JSON report path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    init_log_from_env();
    const RunConfig cfg = resolve_config(config_path, ov);

    if (*sim) {
      sim_args.sources = sim_sources;
      sim_args.out_dir = sim_out;
      cmd_simulate(cfg, sim_args);
    } else if (*orc) {
      std::vector<fs::path> stems(orc_stems.begin(), orc_stems.end());
      cmd_oracle_decisions(cfg, split_csv(orc_speakers), stems, orc_utt, orc_out);
    } else if (*ext) {
      const auto refs = cmd_extract_refs(cfg, ext_mix, ext_dec, ext_out);
      for (const auto& [spk, r] : refs)
        log_info(spk + ": " + std::to_string(r.segments.size()) + " segment(s), " +
                 std::to_string(r.ref.duration()) + " s");
    } else if (*trn) {
      cmd_train(cfg, {trn_train, trn_valid, trn_out});
    } else if (*sep) {
      SeparateArgs a;
      a.checkpoint = sep_ck;
      a.mixture = sep_mix;
      a.ref1 = sep_r1;
      a.ref2 = sep_r2;
      a.decisions = sep_dec;
      a.manifest = sep_man;
      a.use_decisions = sep_use_dec;
      a.out_dir = sep_out;
      a.jobs = jobs;
      cmd_separate(cfg, a);
    } else if (*evl) {
      EvaluateArgs a;
      a.manifest = evl_man;
      a.estimates_dir = evl_est;
      a.checkpoints.assign(evl_ck.begin(), evl_ck.end());
      a.use_decisions = evl_use_dec;
      a.report = evl_report;
      a.jobs = jobs;
      std::string table;
      cmd_evaluate(cfg, a, &table);
      std::cout << table;
    } else if (*grd) {
      grd_args.report = grd_report;
      const auto r = cmd_gradcheck(cfg, grd_args);
      std::printf("checked %zu of %zu parameters, %zu kink-skipped, max rel err %.3e (%s)\n", r.checked,
                  r.parameters, r.kink_skipped, r.max_rel_err, r.worst.c_str());
      if (!(r.max_rel_err <= grd_args.tolerance)) {
        log_error("gradient check failed: tolerance " + std::to_string(grd_args.tolerance));
        return kVerify;
      }
    }
    return kOk;
  } catch (const ConfigError& e) {
    log_error(e.what());
    return kUsage;
  } catch (const NoSingleTalkerSegment& e) {
    log_error(e.what());
    return kData;
  } catch (const DataError& e) {
    log_error(e.what());
    return kData;
  } catch (const Error& e) {
    log_error(e.what());
    return kData;
  } catch (const std::exception& e) {
    log_error(e.what());
    return kVerify;
  }
}

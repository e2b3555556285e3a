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

// Run configuration: one JSON document with fixed sections. Unknown keys
// are rejected and every value is range-checked on load.

#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>

#include "json.hpp"
#include "sdmtss/audio.hpp"
#include "sdmtss/decisions.hpp"
#include "sdmtss/error.hpp"
#include "sdmtss/mixsim.hpp"
#include "sdmtss/objectives.hpp"
#include "sdmtss/separator.hpp"
#include "sdmtss/trainer.hpp"

namespace sdmtss {

struct DecisionConfig {
  double gamma = 0.5;
  std::size_t median_width = 5;
  double merge_gap = 0.10;  // seconds
  double min_run = 0.20;    // seconds
  double min_ref_dur = 1.0;
  double max_ref_dur = 10.0;
  double ramp = 0.010;

  SmoothingParams smoothing(const FrameSpec& fs) const {
    return SmoothingParams::from_seconds(fs, median_width, merge_gap, min_run);
  }
  RefSelectionParams selection() const { return {min_ref_dur, max_ref_dur, ramp}; }
};

enum class ModifyMode { automatic, on, off };

struct InferenceConfig {
  // automatic: gate estimates only when references come from decisions.
  ModifyMode modify_with_decisions = ModifyMode::automatic;
  double ramp = 0.010;
  double peak_norm = 0.9;
};

struct RunConfig {
  int sample_rate = 8000;
  FrameSpec frame_spec;
  SimulateOptions simulate;
  std::size_t simulate_count = 10;
  std::uint64_t seed = 0;
  DecisionConfig decisions;
  SeparatorConfig separator;
  TrainConfig train;
  LossWeights loss;
  InferenceConfig inference;
  std::size_t filter_len = 512;

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("audio.sample_rate must be positive");
    frame_spec.validate();
    frame_spec.hop(sample_rate);
    if (simulate.snr_min_db > simulate.snr_max_db) throw ConfigError("simulate: snr_min_db > snr_max_db");
    if (!(simulate.peak_norm > 0.0 && simulate.peak_norm <= 1.0)) throw ConfigError("simulate.peak_norm must lie in (0, 1]");
    if (simulate.max_offset < 0.0 || simulate.max_offset >= 1.0) throw ConfigError("simulate.max_offset must lie in [0, 1)");
    if (!(decisions.gamma > 0.0 && decisions.gamma < 1.0)) throw ConfigError("decisions.gamma must lie in (0, 1)");
    if (decisions.median_width == 0 || decisions.median_width % 2 == 0)
      throw ConfigError("decisions.median_width must be odd and positive");
    if (decisions.merge_gap < 0.0 || decisions.min_run < 0.0 || decisions.ramp < 0.0)
      throw ConfigError("decisions: durations must be nonnegative");
    if (!(decisions.min_ref_dur >= 0.0 && decisions.max_ref_dur > 0.0 && decisions.min_ref_dur <= decisions.max_ref_dur))
      throw ConfigError("decisions: need 0 <= min_ref_dur <= max_ref_dur, max_ref_dur > 0");
    separator.validate();
    train.validate();
    loss.validate();
    if (inference.ramp < 0.0) throw ConfigError("inference.ramp must be nonnegative");
    if (!(inference.peak_norm > 0.0 && inference.peak_norm <= 1.0)) throw ConfigError("inference.peak_norm must lie in (0, 1]");
    if (filter_len == 0) throw ConfigError("evaluate.filter_len must be positive");
  }
};

namespace detail {

template <typename F>
void each_key(const nlohmann::json& j, const std::string& section, F&& f) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (!f(k, v)) throw ConfigError("unknown key '" + section + "." + k + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + section + "." + k + "': " + e.what());
    }
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& doc) {
  RunConfig c;
  detail::each_key(doc, "", [&](const std::string& section, const nlohmann::json& v) {
    if (section == "audio") {
      detail::each_key(v, "audio", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "sample_rate") x.get_to(c.sample_rate);
        else if (k == "frame_shift") x.get_to(c.frame_spec.frame_shift);
        else if (k == "frame_length") x.get_to(c.frame_spec.frame_length);
        else return false;
        return true;
      });
    } else if (section == "simulate") {
      detail::each_key(v, "simulate", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "snr_min_db") x.get_to(c.simulate.snr_min_db);
        else if (k == "snr_max_db") x.get_to(c.simulate.snr_max_db);
        else if (k == "peak_norm") x.get_to(c.simulate.peak_norm);
        else if (k == "min_ref_dur") x.get_to(c.simulate.min_ref_dur);
        else if (k == "oracle_threshold_db") x.get_to(c.simulate.oracle_threshold_db);
        else if (k == "max_offset") x.get_to(c.simulate.max_offset);
        else if (k == "count") x.get_to(c.simulate_count);
        else return false;
        return true;
      });
    } else if (section == "decisions") {
      detail::each_key(v, "decisions", [&](const std::string& k, const nlohmann::json& x) {
        auto& d = c.decisions;
        if (k == "gamma") x.get_to(d.gamma);
        else if (k == "median_width") x.get_to(d.median_width);
        else if (k == "merge_gap") x.get_to(d.merge_gap);
        else if (k == "min_run") x.get_to(d.min_run);
        else if (k == "min_ref_dur") x.get_to(d.min_ref_dur);
        else if (k == "max_ref_dur") x.get_to(d.max_ref_dur);
        else if (k == "ramp") x.get_to(d.ramp);
        else return false;
        return true;
      });
    } else if (section == "separator") {
      try {
        c.separator = v.get<SeparatorConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad separator section: ") + e.what());
      }
    } else if (section == "train") {
      try {
        c.train = v.get<TrainConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad train section: ") + e.what());
      }
    } else if (section == "loss") {
      detail::each_key(v, "loss", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "lambda1") x.get_to(c.loss.lambda1);
        else if (k == "lambda2") x.get_to(c.loss.lambda2);
        else if (k == "multiscale") x.get_to(c.loss.multiscale);
        else return false;
        return true;
      });
    } else if (section == "inference") {
      detail::each_key(v, "inference", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "modify_with_decisions") {
          if (x.is_boolean()) c.inference.modify_with_decisions = x.get<bool>() ? ModifyMode::on : ModifyMode::off;
          else if (x == "auto") c.inference.modify_with_decisions = ModifyMode::automatic;
          else throw ConfigError("inference.modify_with_decisions must be true, false or \"auto\"");
        } else if (k == "ramp") x.get_to(c.inference.ramp);
        else if (k == "peak_norm") x.get_to(c.inference.peak_norm);
        else return false;
        return true;
      });
    } else if (section == "evaluate") {
      detail::each_key(v, "evaluate", [&](const std::string& k, const nlohmann::json& x) {
        if (k == "filter_len") x.get_to(c.filter_len);
        else return false;
        return true;
      });
    } else if (section == "seed") {
      v.get_to(c.seed);
    } else {
      return false;
    }
    return true;
  });
  c.simulate.sample_rate = c.sample_rate;
  c.simulate.frame_spec = c.frame_spec;
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(doc);
}

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json modify = c.inference.modify_with_decisions == ModifyMode::automatic
                              ? nlohmann::json("auto")
                              : nlohmann::json(c.inference.modify_with_decisions == ModifyMode::on);
  return {
      {"seed", c.seed},
      {"audio", {{"sample_rate", c.sample_rate}, {"frame_shift", c.frame_spec.frame_shift},
                 {"frame_length", c.frame_spec.frame_length}}},
      {"simulate", {{"snr_min_db", c.simulate.snr_min_db}, {"snr_max_db", c.simulate.snr_max_db},
                    {"peak_norm", c.simulate.peak_norm}, {"min_ref_dur", c.simulate.min_ref_dur},
                    {"oracle_threshold_db", c.simulate.oracle_threshold_db},
                    {"max_offset", c.simulate.max_offset}, {"count", c.simulate_count}}},
      {"decisions", {{"gamma", c.decisions.gamma}, {"median_width", c.decisions.median_width},
                     {"merge_gap", c.decisions.merge_gap}, {"min_run", c.decisions.min_run},
                     {"min_ref_dur", c.decisions.min_ref_dur}, {"max_ref_dur", c.decisions.max_ref_dur},
                     {"ramp", c.decisions.ramp}}},
      {"separator", c.separator},
      {"train", c.train},
      {"loss", {{"lambda1", c.loss.lambda1}, {"lambda2", c.loss.lambda2}, {"multiscale", c.loss.multiscale}}},
      {"inference", {{"modify_with_decisions", modify}, {"ramp", c.inference.ramp},
                     {"peak_norm", c.inference.peak_norm}}},
      {"evaluate", {{"filter_len", c.filter_len}}},
  };
}

}  // namespace sdmtss

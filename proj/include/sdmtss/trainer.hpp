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
#include <cstdio>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdmtss/audio.hpp"
#include "sdmtss/autodiff.hpp"
#include "sdmtss/checkpoint.hpp"
#include "sdmtss/error.hpp"
#include "sdmtss/gradcheck.hpp"
#include "sdmtss/metrics.hpp"
#include "sdmtss/mixsim.hpp"
#include "sdmtss/objectives.hpp"
#include "sdmtss/rng.hpp"
#include "sdmtss/separator.hpp"

namespace sdmtss {

struct TrainConfig {
  double learning_rate = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip_l2 = 5.0;
  std::size_t batch_size = 2;
  std::size_t max_steps = 1000;
  std::size_t lr_halve_patience = 2;
  std::size_t eval_every = 100;
  std::uint64_t seed = 0;
  double crop_seconds = 2.0;
  double ref_seconds = 4.0;

  void validate() const {
    if (!(learning_rate > 0.0) || !(adam_eps > 0.0) || !(grad_clip_l2 > 0.0))
      throw ConfigError("train: rates must be positive");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw ConfigError("train: adam betas must lie in [0, 1)");
    if (batch_size == 0 || eval_every == 0 || lr_halve_patience == 0)
      throw ConfigError("train: batch_size, eval_every and lr_halve_patience must be >= 1");
    if (!(crop_seconds > 0.0) || !(ref_seconds > 0.0)) throw ConfigError("train: crop lengths must be positive");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"learning_rate", c.learning_rate}, {"adam_betas", {c.adam_beta1, c.adam_beta2}},
                     {"adam_eps", c.adam_eps},           {"grad_clip_l2", c.grad_clip_l2},
                     {"batch_size", c.batch_size},       {"max_steps", c.max_steps},
                     {"lr_halve_patience", c.lr_halve_patience}, {"eval_every", c.eval_every},
                     {"seed", c.seed},                   {"crop_seconds", c.crop_seconds},
                     {"ref_seconds", c.ref_seconds}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  for (const auto& [k, v] : j.items()) {
    if (k == "learning_rate") v.get_to(c.learning_rate);
    else if (k == "adam_betas") {
      const auto b = v.get<std::vector<double>>();
      if (b.size() != 2) throw ConfigError("train.adam_betas needs two values");
      c.adam_beta1 = b[0];
      c.adam_beta2 = b[1];
    } else if (k == "adam_eps") v.get_to(c.adam_eps);
    else if (k == "grad_clip_l2") v.get_to(c.grad_clip_l2);
    else if (k == "batch_size") v.get_to(c.batch_size);
    else if (k == "max_steps") v.get_to(c.max_steps);
    else if (k == "lr_halve_patience") v.get_to(c.lr_halve_patience);
    else if (k == "eval_every") v.get_to(c.eval_every);
    else if (k == "seed") v.get_to(c.seed);
    else if (k == "crop_seconds") v.get_to(c.crop_seconds);
    else if (k == "ref_seconds") v.get_to(c.ref_seconds);
    else throw ConfigError("unknown train key '" + k + "'");
  }
  c.validate();
}

// ------------------------------------------------------------ optimizer

/// Adam with bias correction. Moments are keyed by parameter name.
class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(ParamMap& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      if (p.grad.empty()) continue;
      auto& m = m_[name];
      auto& v = v_[name];
      if (m.empty()) {
        m.assign(p.size(), 0.0);
        v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double g = p.grad[i];
        m[i] = b1_ * m[i] + (1.0 - b1_) * g;
        v[i] = b2_ * v[i] + (1.0 - b2_) * g * g;
        p.values[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::size_t steps() const { return t_; }

  void save(CheckpointFile& ck) const {
    for (const auto& [name, m] : m_) ck.tensors["adam.m/" + name] = ad::Tensor({m.size()}, m);
    for (const auto& [name, v] : v_) ck.tensors["adam.v/" + name] = ad::Tensor({v.size()}, v);
    ck.meta["adam.t"] = std::to_string(t_);
  }
  void load(const CheckpointFile& ck) {
    m_.clear();
    v_.clear();
    for (const auto& [key, t] : ck.tensors) {
      if (key.starts_with("adam.m/")) m_[key.substr(7)] = t.values;
      if (key.starts_with("adam.v/")) v_[key.substr(7)] = t.values;
    }
    const auto it = ck.meta.find("adam.t");
    t_ = it == ck.meta.end() ? 0 : std::stoull(it->second);
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_grad_norm(ParamMap& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, p] : params)
    for (double g : p.grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double k = max_norm / norm;
    for (auto& [_, p] : params)
      for (double& g : p.grad) g *= k;
  }
  return norm;
}

// ------------------------------------------------------------ data

struct TrainingExample {
  std::string utt;
  Waveform mixture, s1, s2, ref1, ref2;
  int label1 = -1, label2 = -1;
};

/// Sorted distinct speaker ids of a manifest; the index is the class label.
inline std::vector<std::string> speaker_classes(const Manifest& m) {
  std::set<std::string> ids;
  for (const auto& r : m.records) {
    ids.insert(r.spk1);
    ids.insert(r.spk2);
  }
  return {ids.begin(), ids.end()};
}

inline Waveform head(const Waveform& w, std::size_t n) {
  if (w.size() <= n) return w;
  return Waveform(std::vector<double>(w.vec().begin(), w.vec().begin() + static_cast<long>(n)), w.sample_rate());
}

inline Waveform segment(const Waveform& w, std::size_t start, std::size_t n) {
  return Waveform(std::vector<double>(w.vec().begin() + static_cast<long>(start),
                                      w.vec().begin() + static_cast<long>(start + n)),
                  w.sample_rate());
}

/// Loads every record; labels come from `classes` (-1 for unseen speakers).
inline std::vector<TrainingExample> load_examples(const Manifest& m, const std::vector<std::string>& classes) {
  const auto label = [&](const std::string& spk) {
    const auto it = std::find(classes.begin(), classes.end(), spk);
    return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
  };
  std::vector<TrainingExample> out;
  for (const auto& r : m.records) {
    if (r.ref_s1.empty() || r.ref_s2.empty())
      throw DataError(r.utt + ": training needs reference audio for both speakers");
    TrainingExample e;
    e.utt = r.utt;
    e.mixture = read_wav(m.resolve(r.mix));
    e.s1 = read_wav(m.resolve(r.s1));
    e.s2 = read_wav(m.resolve(r.s2));
    e.ref1 = read_wav(m.resolve(r.ref_s1));
    e.ref2 = read_wav(m.resolve(r.ref_s2));
    e.label1 = label(r.spk1);
    e.label2 = label(r.spk2);
    out.push_back(std::move(e));
  }
  return out;
}

/// Zero-pads `w` up to `n` samples when shorter.
inline Waveform at_least(const Waveform& w, std::size_t n) { return w.size() >= n ? w : pad_to(w, n); }

/// Training view of an example: a crop of the mixture and stems starting at
/// `offset`, references truncated to `ref_len`.
inline TrainingExample crop_example(const TrainingExample& e, std::size_t offset, std::size_t crop_len,
                                    std::size_t ref_len, std::size_t min_len) {
  TrainingExample c;
  c.utt = e.utt;
  const std::size_t n = std::min(crop_len, e.mixture.size() - offset);
  c.mixture = at_least(segment(e.mixture, offset, n), min_len);
  c.s1 = at_least(segment(e.s1, offset, n), min_len);
  c.s2 = at_least(segment(e.s2, offset, n), min_len);
  c.ref1 = at_least(head(e.ref1, ref_len), min_len);
  c.ref2 = at_least(head(e.ref2, ref_len), min_len);
  c.label1 = e.label1;
  c.label2 = e.label2;
  return c;
}

// ------------------------------------------------------------ training

struct StepLog {
  std::size_t step = 0;
  double loss = 0.0, si_sdr_term = 0.0, ce_term = 0.0, lr = 0.0;
};

inline std::string format_step(const StepLog& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu\t%.9g\t%.9g\t%.9g\t%.9g", s.step, s.loss, s.si_sdr_term, s.ce_term, s.lr);
  return buf;
}

struct TrainResult {
  CheckpointFile best;
  CheckpointFile last;
  std::vector<StepLog> log;
  std::vector<std::pair<std::size_t, double>> validation;  // (step, loss)
};

/// Model checkpoint with config echo and class inventory.
inline CheckpointFile make_checkpoint(const Separator& model, const std::vector<std::string>& classes,
                                      const TrainConfig& tc, std::size_t step, double best_val,
                                      const Adam* adam = nullptr) {
  CheckpointFile ck;
  ck.meta["format"] = "sdmtss-model";
  ck.meta["separator_config"] = nlohmann::json(model.config()).dump();
  ck.meta["train_config"] = nlohmann::json(tc).dump();
  ck.meta["speakers"] = nlohmann::json(classes).dump();
  ck.meta["step"] = std::to_string(step);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", best_val);
  ck.meta["best_validation_loss"] = buf;
  for (const auto& [name, t] : model.params()) ck.tensors["param/" + name] = ad::Tensor(t.shape, t.values);
  if (adam) adam->save(ck);
  return ck;
}

inline Separator model_from_checkpoint(const CheckpointFile& ck) {
  const auto it = ck.meta.find("separator_config");
  if (it == ck.meta.end()) throw FormatError("checkpoint has no separator config");
  const auto cfg = nlohmann::json::parse(it->second).get<SeparatorConfig>();
  ParamMap params;
  for (const auto& [key, t] : ck.tensors)
    if (key.starts_with("param/")) params[key.substr(6)] = ad::Tensor(t.shape, t.values, true);
  return Separator(cfg, std::move(params));
}

/// Loss of one example; accumulates gradients into the model when `grad`.
/// The returned `total` handle is dead (its tape is gone); use `value`.
inline LossTerms example_loss(Separator& model, const TrainingExample& e, const LossWeights& w, bool grad) {
  ad::Tape tape;
  model.bind(tape);
  const auto out = model.forward(tape, e.mixture, e.ref1, e.ref2);
  auto terms = total_loss(out, e.s1.samples(), e.s2.samples(), e.label1, e.label2, w);
  if (grad) tape.backward(terms.total);
  model.unbind();
  return terms;
}

struct TrainData {
  std::vector<TrainingExample> train, valid;
  std::vector<std::string> classes;
};

inline TrainData load_train_data(const Manifest& train, const Manifest& valid) {
  if (train.records.empty()) throw DataError("training manifest is empty");
  if (valid.records.empty()) throw DataError("validation manifest is empty");
  TrainData d;
  d.classes = speaker_classes(train);
  d.train = load_examples(train, d.classes);
  d.valid = load_examples(valid, d.classes);
  return d;
}

/// Adam over the multi-task loss with global-norm clipping. The learning
/// rate halves after `lr_halve_patience` validations without improvement;
/// the best-by-validation parameters are kept. One line per step goes to
/// `log` in the `step loss si_sdr_term ce_term lr` format.
inline TrainResult train(const TrainData& data, SeparatorConfig sep_cfg, const TrainConfig& tc,
                         const LossWeights& weights, std::ostream* log = nullptr,
                         const std::function<void(const std::string&)>& progress = {}) {
  tc.validate();
  weights.validate();
  sep_cfg.num_speaker_classes = std::max<std::size_t>(data.classes.size(), 1);
  Separator model(sep_cfg, tc.seed);
  Adam adam(tc.learning_rate, tc.adam_beta1, tc.adam_beta2, tc.adam_eps);

  const int sr = data.train.front().mixture.sample_rate();
  const auto crop_len = static_cast<std::size_t>(std::llround(tc.crop_seconds * sr));
  const auto ref_len = static_cast<std::size_t>(std::llround(tc.ref_seconds * sr));
  const std::size_t min_len = sep_cfg.filter_lengths[2];

  const auto validate = [&] {
    std::vector<double> losses;
    for (const auto& e : data.valid)
      losses.push_back(example_loss(model, crop_example(e, 0, crop_len, ref_len, min_len), weights, false).value);
    return pairwise_sum(losses) / static_cast<double>(losses.size());
  };

  std::size_t unseen = 0;
  for (const auto& e : data.valid) unseen += (e.label1 < 0 ? 1 : 0) + (e.label2 < 0 ? 1 : 0);
  if (unseen > 0 && progress)
    progress(std::to_string(unseen) + " validation speaker slot(s) are outside the training inventory; "
             "their cross-entropy terms are skipped");

  TrainResult result;
  double best = validate();
  result.validation.emplace_back(0, best);
  result.best = make_checkpoint(model, data.classes, tc, 0, best, &adam);
  std::size_t stale = 0;

  for (std::size_t step = 1; step <= tc.max_steps; ++step) {
    model.zero_grad();
    StepLog s;
    s.step = step;
    s.lr = adam.lr();
    for (std::size_t k = 0; k < tc.batch_size; ++k) {
      Rng rng = Rng::split(tc.seed, (step - 1) * tc.batch_size + k + 0x5eed0000ULL);
      const std::size_t idx = rng.below(data.train.size());
      const auto& e = data.train[idx];
      const std::size_t slack = e.mixture.size() > crop_len ? e.mixture.size() - crop_len : 0;
      const std::size_t offset = slack > 0 ? rng.below(slack + 1) : 0;
      LossTerms terms;
      try {
        terms = example_loss(model, crop_example(e, offset, crop_len, ref_len, min_len), weights, true);
      } catch (const TensorError& err) {
        throw Error("non-finite value at step " + std::to_string(step) + ", batch item " + std::to_string(k) +
                    " (" + e.utt + "): " + err.what());
      }
      s.loss += terms.value / static_cast<double>(tc.batch_size);
      s.si_sdr_term += terms.si_sdr_term / static_cast<double>(tc.batch_size);
      s.ce_term += terms.ce_term / static_cast<double>(tc.batch_size);
    }
    if (!std::isfinite(s.loss))
      throw Error("non-finite loss at step " + std::to_string(step));
    for (auto& [_, p] : model.params())
      for (double& g : p.grad) g /= static_cast<double>(tc.batch_size);
    clip_grad_norm(model.params(), tc.grad_clip_l2);
    adam.step(model.params());
    result.log.push_back(s);
    if (log) *log << format_step(s) << '\n';

    if (step % tc.eval_every == 0 || step == tc.max_steps) {
      const double v = validate();
      result.validation.emplace_back(step, v);
      if (v < best) {
        best = v;
        stale = 0;
        result.best = make_checkpoint(model, data.classes, tc, step, best, &adam);
      } else if (++stale >= tc.lr_halve_patience) {
        adam.set_lr(adam.lr() * 0.5);
        stale = 0;
      }
      if (progress) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "step %zu: train loss %.4f, valid loss %.4f, lr %.3g", step, s.loss, v,
                      adam.lr());
        progress(buf);
      }
    }
  }
  result.last = make_checkpoint(model, data.classes, tc, tc.max_steps, best, &adam);
  return result;
}

/// Mean SI-SDR improvement of the scale-1 estimates over the mixture, over
/// both speakers of every example.
inline double mean_si_sdri(Separator& model, const std::vector<TrainingExample>& examples, std::size_t ref_len) {
  std::vector<double> gains;
  for (const auto& e : examples) {
    const std::size_t min_len = model.config().filter_lengths[2];
    const auto est = model.infer(at_least(e.mixture, min_len), at_least(head(e.ref1, ref_len), min_len),
                                 at_least(head(e.ref2, ref_len), min_len));
    const std::array<const Waveform*, 2> stems{&e.s1, &e.s2};
    for (std::size_t s = 0; s < 2; ++s) {
      const auto est_s = head(est[s], e.mixture.size());
      gains.push_back(si_sdr(est_s.samples(), stems[s]->samples()) -
                      si_sdr(e.mixture.samples(), stems[s]->samples()));
    }
  }
  double sum = 0.0;
  for (double g : gains) sum += g;
  return gains.empty() ? 0.0 : sum / static_cast<double>(gains.size());
}

// ------------------------------------------------------------ gradient check

struct GradCheckReport {
  std::size_t parameters = 0;
  std::size_t checked = 0;
  std::size_t kink_skipped = 0;
  double max_rel_err = 0.0;
  std::string worst;
  double loss = 0.0;
};

inline nlohmann::json to_json(const GradCheckReport& r) {
  return {{"parameters", r.parameters}, {"checked", r.checked}, {"kink_skipped", r.kink_skipped},
          {"max_rel_err", r.max_rel_err}, {"worst", r.worst}, {"loss", r.loss}};
}

struct GradCheckInput {
  Waveform mixture, aux1, aux2, s1, s2;
  int label1 = 0, label2 = 1;
};

inline GradCheckInput make_gradcheck_input(std::size_t length, int sample_rate, std::uint64_t seed,
                                           std::size_t num_classes) {
  Rng rng(seed ^ 0x9c0ffee);
  const auto noise = [&](std::size_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = 0.3 * rng.normal();
    return Waveform(std::move(v), sample_rate);
  };
  GradCheckInput in;
  in.s1 = noise(length);
  in.s2 = noise(length);
  std::vector<double> m(length);
  for (std::size_t i = 0; i < length; ++i) m[i] = in.s1[i] + in.s2[i];
  in.mixture = Waveform(std::move(m), sample_rate);
  in.aux1 = noise(length);
  in.aux2 = noise(length);
  in.label1 = 0;
  in.label2 = num_classes > 1 ? 1 : 0;
  return in;
}

/// Central finite differences of the multi-task loss against backprop on a
/// sample of parameter coordinates (all when `n_sampled` is 0). When the
/// perturbation flips a ReLU the step is shrunk; coordinates that still sit
/// on a kink are counted and skipped.
inline GradCheckReport grad_check(const SeparatorConfig& cfg, std::size_t n_sampled, double step,
                                  const LossWeights& weights = {}, std::uint64_t seed = 0,
                                  std::size_t input_length = 400) {
  Separator model(cfg, seed);
  const auto in = make_gradcheck_input(input_length, 8000, seed, cfg.num_speaker_classes);

  const auto eval = [&](std::uint64_t* kinks) {
    ad::Tape tape;
    model.bind(tape);
    const auto out = model.forward(tape, in.mixture, in.aux1, in.aux2);
    const auto terms = total_loss(out, in.s1.samples(), in.s2.samples(), in.label1, in.label2, weights);
    if (kinks) *kinks = tape.kink_signature();
    model.unbind();
    return terms.total.item();
  };

  model.zero_grad();
  GradCheckReport report;
  std::uint64_t base_kinks = 0;
  {
    ad::Tape tape;
    model.bind(tape);
    const auto out = model.forward(tape, in.mixture, in.aux1, in.aux2);
    const auto terms = total_loss(out, in.s1.samples(), in.s2.samples(), in.label1, in.label2, weights);
    base_kinks = tape.kink_signature();
    report.loss = terms.total.item();
    tape.backward(terms.total);
    model.unbind();
  }

  std::vector<std::pair<std::string, std::size_t>> coords;
  for (const auto& [name, t] : model.params())
    for (std::size_t i = 0; i < t.size(); ++i) coords.emplace_back(name, i);
  report.parameters = coords.size();
  if (n_sampled > 0 && n_sampled < coords.size()) {
    Rng rng(seed + 17);
    for (std::size_t i = 0; i < n_sampled; ++i) std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
    coords.resize(n_sampled);
    std::sort(coords.begin(), coords.end());
  }

  for (const auto& [name, i] : coords) {
    auto& t = model.params().at(name);
    const double analytic = t.grad.empty() ? 0.0 : t.grad[i];
    const double x0 = t.values[i];
    bool smooth = false;
    double numeric = 0.0;
    for (double h = step; h >= step * 1e-4; h *= 0.1) {
      std::uint64_t kp = 0, km = 0;
      t.values[i] = x0 + h;
      const double fp = eval(&kp);
      t.values[i] = x0 - h;
      const double fm = eval(&km);
      t.values[i] = x0;
      if (kp == base_kinks && km == base_kinks) {
        numeric = (fp - fm) / (2.0 * h);
        smooth = true;
        break;
      }
    }
    if (!smooth) {
      ++report.kink_skipped;
      continue;
    }
    ++report.checked;
    const double err = gradient_error(analytic, numeric);
    if (err > report.max_rel_err || report.worst.empty()) {
      report.max_rel_err = std::max(err, report.max_rel_err);
      report.worst = name + "[" + std::to_string(i) + "]";
    }
  }
  return report;
}

}  // namespace sdmtss

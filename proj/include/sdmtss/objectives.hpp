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
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "sdmtss/autodiff.hpp"
#include "sdmtss/error.hpp"
#include "sdmtss/separator.hpp"

namespace sdmtss {

inline constexpr double kSdrEps = 1e-8;
inline constexpr double kDbCap = 60.0;

/// Scale-invariant SDR in dB, capped to [-60, 60].
inline double si_sdr(std::span<const double> est, std::span<const double> ref, bool zero_mean = true,
                     double eps = kSdrEps) {
  if (est.size() != ref.size()) throw ConfigError("si_sdr: length mismatch");
  if (est.empty()) throw ConfigError("si_sdr: empty signals");
  const std::size_t n = est.size();
  double me = 0.0, mr = 0.0;
  if (zero_mean) {
    for (std::size_t i = 0; i < n; ++i) {
      me += est[i];
      mr += ref[i];
    }
    me /= static_cast<double>(n);
    mr /= static_cast<double>(n);
  }
  double dot = 0.0, rr = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += (est[i] - me) * (ref[i] - mr);
    rr += (ref[i] - mr) * (ref[i] - mr);
  }
  const double alpha = dot / (rr + eps);
  double sig = 0.0, err = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = alpha * (ref[i] - mr);
    const double e = (est[i] - me) - p;
    sig += p * p;
    err += e * e;
  }
  const double db = 10.0 * std::log10((sig + eps) / (err + eps));
  return std::clamp(db, -kDbCap, kDbCap);
}

/// Differentiable, uncapped SI-SDR of `est` ([T]) against a fixed reference.
inline ad::Var si_sdr_var(ad::Var est, std::span<const double> ref, bool zero_mean = true,
                          double eps = kSdrEps) {
  ad::Tape& t = *est.tape;
  const std::size_t n = est.size();
  if (ref.size() != n) throw ConfigError("si_sdr: length mismatch");
  std::vector<double> r(ref.begin(), ref.end());
  ad::Var e = est;
  if (zero_mean) {
    double mr = 0.0;
    for (double v : r) mr += v;
    mr /= static_cast<double>(n);
    for (double& v : r) v -= mr;
    e = ad::sub(est, ad::scale(ad::sum_all(est), 1.0 / static_cast<double>(n)));
  }
  double rr = 0.0;
  for (double v : r) rr += v * v;
  ad::Var rv = t.constant({n}, std::move(r));
  ad::Var alpha = ad::scale(ad::sum_all(ad::mul(e, rv)), 1.0 / (rr + eps));
  ad::Var proj = ad::mul(rv, alpha);
  ad::Var noise = ad::sub(e, proj);
  ad::Var num = ad::add_scalar(ad::sum_all(ad::mul(proj, proj)), eps);
  ad::Var den = ad::add_scalar(ad::sum_all(ad::mul(noise, noise)), eps);
  return ad::scale(ad::sub(ad::log(num), ad::log(den)), 10.0 / std::numbers::ln10);
}

struct LossWeights {
  double lambda1 = 0.5;   // SI-SDR terms
  double lambda2 = 0.25;  // cross-entropy terms
  std::array<double, 3> multiscale{0.8, 0.1, 0.1};

  void validate() const {
    if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("loss weights must be nonnegative");
    double s = 0.0;
    for (double w : multiscale) {
      if (w < 0.0) throw ConfigError("multi-scale weights must be nonnegative");
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ConfigError("multi-scale weights must sum to 1");
  }
};

/// -sum_scale w_scale * SI-SDR(estimate at scale, target).
inline ad::Var si_sdr_loss(const std::array<ad::Var, 3>& estimates, std::span<const double> target,
                           const std::array<double, 3>& weights) {
  ad::Var total;
  for (std::size_t i = 0; i < 3; ++i) {
    ad::Var term = ad::scale(si_sdr_var(estimates[i], target), -weights[i]);
    total = i == 0 ? term : ad::add(total, term);
  }
  return total;
}

/// -log_softmax(logits)[label] for logits of shape [C, 1] or [C].
inline ad::Var cross_entropy(ad::Var logits, std::size_t label) {
  const std::size_t C = logits.dim(0);
  if (label >= C)
    throw ConfigError("class label " + std::to_string(label) + " out of range for " + std::to_string(C) +
                      " classes");
  ad::Var flat = ad::reshape(logits, {C});
  return ad::scale(ad::slice(ad::log_softmax(flat, 0), 0, label, 1), -1.0);
}

struct LossTerms {
  ad::Var total;
  double value = 0.0;        // total.item(), usable after the tape is gone
  double si_sdr_term = 0.0;  // lambda1 * (siLoss_1 + siLoss_2)
  double ce_term = 0.0;      // lambda2 * (ce_1 + ce_2)
};

/// lambda1 * (siLoss_s1 + siLoss_s2) + lambda2 * (ce_s1 + ce_s2). A negative
/// label skips that speaker's cross-entropy term.
inline LossTerms total_loss(const SeparatorOutput& out, std::span<const double> s1, std::span<const double> s2,
                            int label1, int label2, const LossWeights& w) {
  const std::array<std::span<const double>, 2> targets{s1, s2};
  const std::array<int, 2> labels{label1, label2};
  ad::Var si, ce;
  bool have_ce = false;
  for (std::size_t s = 0; s < 2; ++s) {
    ad::Var l = si_sdr_loss(out.estimates[s], targets[s], w.multiscale);
    si = s == 0 ? l : ad::add(si, l);
    if (labels[s] >= 0) {
      ad::Var c = cross_entropy(out.logits[s], static_cast<std::size_t>(labels[s]));
      ce = have_ce ? ad::add(ce, c) : c;
      have_ce = true;
    }
  }
  LossTerms terms;
  ad::Var weighted_si = ad::scale(si, w.lambda1);
  terms.si_sdr_term = weighted_si.item();
  if (have_ce) {
    ad::Var weighted_ce = ad::scale(ce, w.lambda2);
    terms.ce_term = weighted_ce.item();
    terms.total = ad::add(weighted_si, weighted_ce);
  } else {
    terms.total = weighted_si;
  }
  terms.value = terms.total.item();
  return terms;
}

}  // namespace sdmtss

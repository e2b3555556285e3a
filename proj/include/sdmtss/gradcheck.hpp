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

// Finite-difference checks of the autodiff ops. Each case builds a scalar
// probe sum(W * f(x)) with a fixed random W, backpropagates once and
// compares every input coordinate against a central difference.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "sdmtss/autodiff.hpp"
#include "sdmtss/objectives.hpp"
#include "sdmtss/rng.hpp"

namespace sdmtss {

/// Relative error with an absolute floor: differences within `abs_floor`
/// count as zero error.
inline double gradient_error(double analytic, double numeric, double abs_floor = 1e-8) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= abs_floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

struct OpCheck {
  std::string name;
  std::size_t checked = 0;
  std::size_t kink_skipped = 0;
  double max_rel_err = 0.0;
};

using OpFn = std::function<ad::Var(ad::Tape&, const std::vector<ad::Var>&)>;

/// Checks d sum(W * f(inputs)) / d inputs. Perturbations that change the
/// ReLU activity pattern are retried with smaller steps, then skipped.
inline OpCheck check_op(const std::string& name, const OpFn& f, std::vector<ad::Tensor> inputs,
                        double step = 1e-5, std::uint64_t seed = 0) {
  for (auto& t : inputs) {
    t.requires_grad = true;
    t.zero_grad();
  }
  std::vector<double> weights;
  const auto probe = [&](std::uint64_t* kinks, bool grad) {
    ad::Tape tape;
    std::vector<ad::Var> vars;
    for (auto& t : inputs) vars.push_back(tape.param(t));
    auto y = f(tape, vars);
    if (weights.empty()) {
      Rng rng(seed ^ 0xabcdef);
      weights.resize(y.size());
      for (double& w : weights) w = rng.uniform(-1.0, 1.0);
    }
    auto loss = ad::sum_all(ad::mul(y, tape.constant(y.shape(), weights)));
    if (kinks) *kinks = tape.kink_signature();
    if (grad) tape.backward(loss);
    return loss.item();
  };

  std::uint64_t base = 0;
  probe(&base, true);
  OpCheck r;
  r.name = name;
  for (auto& t : inputs) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x0 = t.values[i];
      bool smooth = false;
      double numeric = 0.0;
      for (double h = step; h >= step * 1e-4; h *= 0.1) {
        std::uint64_t kp = 0, km = 0;
        t.values[i] = x0 + h;
        const double fp = probe(&kp, false);
        t.values[i] = x0 - h;
        const double fm = probe(&km, false);
        t.values[i] = x0;
        if (kp == base && km == base) {
          numeric = (fp - fm) / (2.0 * h);
          smooth = true;
          break;
        }
      }
      if (!smooth) {
        ++r.kink_skipped;
        continue;
      }
      ++r.checked;
      r.max_rel_err = std::max(r.max_rel_err, gradient_error(t.grad[i], numeric));
    }
  }
  return r;
}

/// One case per op (and per conv variant), on small random inputs.
inline std::vector<OpCheck> op_gradient_suite(std::uint64_t seed = 0, double step = 1e-5) {
  using namespace ad;
  Rng rng(seed);
  const auto rand = [&](Shape s, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(s));
    for (double& v : t.values) v = rng.uniform(lo, hi);
    return t;
  };
  std::vector<OpCheck> out;
  const auto run = [&](const std::string& name, const OpFn& f, std::vector<Tensor> in) {
    out.push_back(check_op(name, f, std::move(in), step, seed + out.size()));
  };
  using V = const std::vector<Var>&;

  run("add", [](Tape&, V x) { return x[0] + x[1]; }, {rand({3, 4}), rand({3, 4})});
  run("add_broadcast", [](Tape&, V x) { return x[0] + x[1]; }, {rand({3, 4}), rand({3, 1})});
  run("sub", [](Tape&, V x) { return x[0] - x[1]; }, {rand({2, 5}), rand({1, 5})});
  run("mul", [](Tape&, V x) { return x[0] * x[1]; }, {rand({3, 4}), rand({3, 4})});
  run("mul_broadcast", [](Tape&, V x) { return x[0] * x[1]; }, {rand({2, 3, 4}), rand({3, 1})});
  run("div", [](Tape&, V x) { return x[0] / x[1]; }, {rand({3, 4}), rand({3, 4}, 0.5, 2.0)});
  run("scale", [](Tape&, V x) { return scale(x[0], -2.5); }, {rand({6})});
  run("add_scalar", [](Tape&, V x) { return add_scalar(x[0], 0.7); }, {rand({6})});
  run("relu", [](Tape&, V x) { return relu(x[0]); }, {rand({4, 5})});
  run("sigmoid", [](Tape&, V x) { return sigmoid(x[0]); }, {rand({4, 5}, -3, 3)});
  run("tanh", [](Tape&, V x) { return ad::tanh(x[0]); }, {rand({4, 5}, -2, 2)});
  run("log", [](Tape&, V x) { return ad::log(x[0]); }, {rand({4, 5}, 0.2, 3.0)});
  run("broadcast_to", [](Tape&, V x) { return broadcast_to(x[0], Shape{2, 3, 4}); }, {rand({3, 1})});
  run("sum_axis0", [](Tape&, V x) { return sum(x[0], 0); }, {rand({3, 4, 2})});
  run("sum_axis_last", [](Tape&, V x) { return sum(x[0], -1); }, {rand({3, 4, 2})});
  run("mean", [](Tape&, V x) { return mean(x[0], 1); }, {rand({3, 4, 2})});
  run("sum_all", [](Tape&, V x) { return sum_all(x[0]); }, {rand({3, 4})});
  run("l2_norm_last", [](Tape&, V x) { return l2_norm_last(x[0]); }, {rand({3, 5})});
  run("softmax", [](Tape&, V x) { return softmax(x[0], 1); }, {rand({2, 3, 4}, -2, 2)});
  run("log_softmax", [](Tape&, V x) { return log_softmax(x[0], -1); }, {rand({3, 5}, -2, 2)});
  run("reshape", [](Tape&, V x) { return reshape(x[0], Shape{4, 3}); }, {rand({2, 6})});
  run("transpose", [](Tape&, V x) { return transpose(x[0], {2, 0, 1}); }, {rand({2, 3, 4})});
  run("concat", [](Tape&, V x) { return concat({x[0], x[1]}, 1); }, {rand({2, 3}), rand({2, 2})});
  run("slice", [](Tape&, V x) { return slice(x[0], 1, 1, 3); }, {rand({2, 5})});
  run("matmul", [](Tape&, V x) { return matmul(x[0], x[1]); }, {rand({3, 4}), rand({4, 2})});
  run("conv1d", [](Tape&, V x) { return conv1d(x[0], x[1], x[2]); }, {rand({2, 9}), rand({3, 2, 3}), rand({3})});
  run(
      "conv1d_strided_padded",
      [](Tape&, V x) { return conv1d(x[0], x[1], x[2], {.stride = 2, .pad_left = 2, .pad_right = 3}); },
      {rand({2, 11}), rand({3, 2, 4}), rand({3})});
  run(
      "conv1d_dilated",
      [](Tape&, V x) { return conv1d(x[0], x[1], Var{}, {.dilation = 3, .pad_left = 3, .pad_right = 3}); },
      {rand({2, 10}), rand({2, 2, 3})});
  run(
      "conv1d_depthwise",
      [](Tape&, V x) { return conv1d(x[0], x[1], x[2], {.dilation = 2, .pad_left = 2, .pad_right = 2, .groups = 3}); },
      {rand({3, 8}), rand({3, 1, 3}), rand({3})});
  run("conv1d_pointwise", [](Tape&, V x) { return conv1d(x[0], x[1], x[2]); },
      {rand({4, 6}), rand({3, 4, 1}), rand({3})});
  run("conv_transpose1d", [](Tape&, V x) { return conv_transpose1d(x[0], x[1], x[2], 2); },
      {rand({3, 5}), rand({3, 2, 4}), rand({2})});
  run("global_layer_norm", [](Tape&, V x) { return global_layer_norm(x[0], x[1], x[2]); },
      {rand({3, 6}), rand({3, 1}, 0.5, 1.5), rand({3, 1})});

  std::vector<double> ref(12);
  for (double& v : ref) v = rng.uniform(-1, 1);
  run("si_sdr", [ref](Tape&, V x) { return si_sdr_var(x[0], ref); }, {rand({12})});
  run("si_sdr_no_mean", [ref](Tape&, V x) { return si_sdr_var(x[0], ref, false); }, {rand({12})});
  run("cross_entropy", [](Tape&, V x) { return cross_entropy(x[0], 2); }, {rand({5}, -2, 2)});
  return out;
}

}  // namespace sdmtss

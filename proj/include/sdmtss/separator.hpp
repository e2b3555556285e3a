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

// Two-speaker extraction network in the SpEx+ layout: a multi-scale twin
// speech encoder shared by the mixture and both references, a speaker encoder
// with a classification head, a TCN extractor that runs once per speaker with
// shared weights, mask coupling across the speaker axis, and per-scale
// transposed-convolution decoders.
//
// Tensor layouts (no batch axis; batches are handled by the trainer):
//   waveform          [1, T]
//   encoder features  [3 * N, F]   (scale-major channel blocks)
//   embedding         [E, 1]
//   masks             [3, 2, N, F] (scale, speaker, channel, frame)
//   estimate          [T]

#pragma once

#include <array>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "sdmtss/audio.hpp"
#include "sdmtss/autodiff.hpp"
#include "sdmtss/checkpoint.hpp"
#include "sdmtss/error.hpp"
#include "sdmtss/rng.hpp"

namespace sdmtss {

enum class MaskActivation { softmax_bind, relu_unbind };

inline std::string to_string(MaskActivation a) {
  return a == MaskActivation::softmax_bind ? "softmax_bind" : "relu_unbind";
}
inline MaskActivation mask_activation_from_string(const std::string& s) {
  if (s == "softmax_bind" || s == "bind") return MaskActivation::softmax_bind;
  if (s == "relu_unbind" || s == "unbind") return MaskActivation::relu_unbind;
  throw ConfigError("unknown mask_activation '" + s + "'");
}

struct SeparatorConfig {
  std::size_t encoder_filters = 32;                        // N, also the TCN bottleneck width
  std::array<std::size_t, 3> filter_lengths{20, 80, 160};  // samples
  std::size_t tcn_channels = 64;                           // H
  std::size_t tcn_kernel = 3;
  std::size_t blocks_per_repeat = 2;
  std::size_t repeats = 2;
  std::size_t speaker_embed_dim = 64;  // E
  std::size_t speaker_blocks = 2;      // residual blocks in the speaker encoder
  std::size_t num_speaker_classes = 8;
  MaskActivation mask_activation = MaskActivation::softmax_bind;

  std::size_t stride() const { return filter_lengths[0] / 2; }

  void validate() const {
    const auto& L = filter_lengths;
    if (encoder_filters == 0 || tcn_channels == 0 || tcn_kernel == 0 || blocks_per_repeat == 0 ||
        repeats == 0 || speaker_embed_dim == 0 || num_speaker_classes == 0)
      throw ConfigError("separator extents must be positive");
    if (!(L[0] < L[1] && L[1] < L[2])) throw ConfigError("filter lengths must increase");
    if (L[0] < 2 || L[0] % 2 != 0) throw ConfigError("shortest filter length must be even");
    if ((L[1] - L[0]) % stride() != 0 || (L[2] - L[0]) % stride() != 0)
      throw ConfigError("filter lengths must be stride-compatible with L1/2");
    if (tcn_kernel % 2 == 0) throw ConfigError("tcn_kernel must be odd");
  }

  /// Closed-form parameter count; see Separator::init for the layout.
  std::size_t parameter_count() const {
    const std::size_t N = encoder_filters, H = tcn_channels, B = N, E = speaker_embed_dim,
                      S = tcn_channels, C = num_speaker_classes, K = tcn_kernel;
    std::size_t n = 0;
    for (auto L : filter_lengths) n += (N * L + N) + (N * L + 1);  // encoder + decoder
    n += 2 * 3 * N + (B * 3 * N + B);                               // extractor input
    for (std::size_t r = 0; r < repeats; ++r)
      for (std::size_t b = 0; b < blocks_per_repeat; ++b)
        n += H * (B + (b == 0 ? E : 0)) + H + 2 * H + (H * K + H) + 2 * H + (B * H + B);
    n += 3 * (N * B + N);                                      // mask heads
    n += 2 * 3 * N + (S * 3 * N + S) + speaker_blocks * 2 * (S * S + S);
    n += E * S + E + C * E + C;                                // embedding and class heads
    return n;
  }

  /// Full-size settings at 8 kHz.
  static SeparatorConfig full_scale(std::size_t classes) {
    SeparatorConfig c;
    c.encoder_filters = 256;
    c.tcn_channels = 512;
    c.blocks_per_repeat = 8;
    c.repeats = 4;
    c.speaker_embed_dim = 256;
    c.num_speaker_classes = classes;
    return c;
  }

  /// Smallest configuration used by the finite-difference checks.
  static SeparatorConfig tiny(std::size_t classes = 4) {
    SeparatorConfig c;
    c.encoder_filters = 4;
    c.tcn_channels = 8;
    c.blocks_per_repeat = 1;
    c.repeats = 1;
    c.speaker_embed_dim = 8;
    c.speaker_blocks = 1;
    c.num_speaker_classes = classes;
    return c;
  }

  /// Small model for the 4-mixture memorization run. The tiny preset above
  /// is too narrow to get there within 2000 steps.
  static SeparatorConfig overfit(std::size_t classes = 4) {
    SeparatorConfig c;
    c.encoder_filters = 16;
    c.tcn_channels = 32;
    c.blocks_per_repeat = 2;
    c.repeats = 1;
    c.speaker_embed_dim = 16;
    c.speaker_blocks = 1;
    c.num_speaker_classes = classes;
    return c;
  }
};

inline void to_json(nlohmann::json& j, const SeparatorConfig& c) {
  j = nlohmann::json{{"encoder_filters", c.encoder_filters},
                     {"filter_lengths", c.filter_lengths},
                     {"tcn_channels", c.tcn_channels},
                     {"tcn_kernel", c.tcn_kernel},
                     {"blocks_per_repeat", c.blocks_per_repeat},
                     {"repeats", c.repeats},
                     {"speaker_embed_dim", c.speaker_embed_dim},
                     {"speaker_blocks", c.speaker_blocks},
                     {"num_speaker_classes", c.num_speaker_classes},
                     {"mask_activation", to_string(c.mask_activation)}};
}

inline void from_json(const nlohmann::json& j, SeparatorConfig& c) {
  for (const auto& [k, v] : j.items()) {
    if (k == "encoder_filters") v.get_to(c.encoder_filters);
    else if (k == "filter_lengths") v.get_to(c.filter_lengths);
    else if (k == "tcn_channels") v.get_to(c.tcn_channels);
    else if (k == "tcn_kernel") v.get_to(c.tcn_kernel);
    else if (k == "blocks_per_repeat") v.get_to(c.blocks_per_repeat);
    else if (k == "repeats") v.get_to(c.repeats);
    else if (k == "speaker_embed_dim") v.get_to(c.speaker_embed_dim);
    else if (k == "speaker_blocks") v.get_to(c.speaker_blocks);
    else if (k == "num_speaker_classes") v.get_to(c.num_speaker_classes);
    else if (k == "mask_activation") c.mask_activation = mask_activation_from_string(v.get<std::string>());
    else throw ConfigError("unknown separator key '" + k + "'");
  }
  c.validate();
}

struct EncodedFeatures {
  std::array<ad::Var, 3> scales;  // each [N, F]
  ad::Var all;                    // [3N, F]
  std::size_t input_length = 0;
};

struct SpeakerCode {
  ad::Var embedding;  // [E, 1], unit norm
  ad::Var logits;     // [C, 1]
};

struct SeparatorOutput {
  std::array<std::array<ad::Var, 3>, 2> estimates;  // [speaker][scale], each [T]
  std::array<ad::Var, 2> logits;
  std::array<ad::Var, 2> embeddings;
  ad::Var masks;
};

class Separator {
 public:
  explicit Separator(SeparatorConfig cfg, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init(seed);
  }
  Separator(SeparatorConfig cfg, ParamMap params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    Separator reference(cfg_, 0);
    for (const auto& [name, t] : reference.params_) {
      auto it = params_.find(name);
      if (it == params_.end()) throw FormatError("checkpoint lacks parameter " + name);
      if (it->second.shape != t.shape)
        throw FormatError("parameter " + name + " has shape " + ad::to_string(it->second.shape) +
                          ", expected " + ad::to_string(t.shape));
      it->second.requires_grad = true;
    }
    if (params_.size() != reference.params_.size())
      throw FormatError("checkpoint has unexpected parameters");
  }

  const SeparatorConfig& config() const { return cfg_; }
  ParamMap& params() { return params_; }
  const ParamMap& params() const { return params_; }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }
  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Copies every parameter onto the tape. Call once per tape.
  void bind(ad::Tape& tape) {
    bound_.clear();
    bound_tape_ = &tape;
    for (auto& [name, t] : params_) bound_.emplace(name, tape.param(t));
  }

  /// Frame count produced by the encoder for an input of `length` samples.
  std::size_t num_frames(std::size_t length) const {
    const std::size_t L1 = cfg_.filter_lengths[0], S = cfg_.stride();
    if (length < cfg_.filter_lengths[2])
      throw ConfigError("input of " + std::to_string(length) + " samples is shorter than the longest filter (" +
                        std::to_string(cfg_.filter_lengths[2]) + ")");
    return (length - L1 + S - 1) / S + 1;
  }

  /// Twin encoder: the same weights serve the mixture and the references.
  EncodedFeatures encode(ad::Tape& tape, const Waveform& w) {
    check_bound(tape);
    const std::size_t T = w.size();
    const std::size_t F = num_frames(T);
    const std::size_t L1 = cfg_.filter_lengths[0], S = cfg_.stride();
    const std::size_t padded = L1 + (F - 1) * S;
    ad::Var x = tape.constant({1, T}, w.vec());
    EncodedFeatures out;
    out.input_length = T;
    for (std::size_t i = 0; i < 3; ++i) {
      ad::Conv1dOptions o;
      o.stride = S;
      o.pad_right = padded - T + (cfg_.filter_lengths[i] - L1);
      out.scales[i] = ad::relu(ad::conv1d(x, p("enc.w" + std::to_string(i)), p("enc.b" + std::to_string(i)), o));
    }
    out.all = ad::concat({out.scales[0], out.scales[1], out.scales[2]}, 0);
    return out;
  }

  /// Pointwise residual stack, mean pooling over time, unit-norm embedding
  /// and a linear classification head.
  SpeakerCode speaker_encode(ad::Tape& tape, ad::Var features) {
    check_bound(tape);
    ad::Var h = ad::global_layer_norm(features, p("spk.ln.g"), p("spk.ln.b"));
    h = ad::relu(ad::conv1d(h, p("spk.in.w"), p("spk.in.b")));
    for (std::size_t j = 0; j < cfg_.speaker_blocks; ++j) {
      const std::string pre = "spk.res" + std::to_string(j);
      ad::Var r = ad::relu(ad::conv1d(h, p(pre + ".c1.w"), p(pre + ".c1.b")));
      r = ad::conv1d(r, p(pre + ".c2.w"), p(pre + ".c2.b"));
      h = ad::relu(ad::add(h, r));
    }
    ad::Var pooled = ad::mean(h, 1);  // [S, 1]
    ad::Var e = ad::add(ad::matmul(p("spk.emb.w"), pooled), p("spk.emb.b"));
    const std::size_t E = cfg_.speaker_embed_dim;
    ad::Var row = ad::reshape(e, {1, E});
    ad::Var unit = ad::reshape(ad::div(row, ad::l2_norm_last(row)), {E, 1});
    ad::Var logits = ad::add(ad::matmul(p("spk.cls.w"), unit), p("spk.cls.b"));
    return {unit, logits};
  }

  /// Shared TCN run once per speaker, mask heads per scale, then coupling
  /// across the speaker axis.
  ad::Var extract_masks(ad::Tape& tape, ad::Var mix_features, ad::Var emb1, ad::Var emb2) {
    check_bound(tape);
    ad::Var y = ad::global_layer_norm(mix_features, p("ext.ln.g"), p("ext.ln.b"));
    y = ad::conv1d(y, p("ext.in.w"), p("ext.in.b"));
    const std::size_t N = cfg_.encoder_filters, F = y.dim(1);
    std::array<std::array<ad::Var, 3>, 2> logits;
    const std::array<ad::Var, 2> embs{emb1, emb2};
    for (std::size_t s = 0; s < 2; ++s) {
      ad::Var h = y;
      for (std::size_t r = 0; r < cfg_.repeats; ++r)
        for (std::size_t b = 0; b < cfg_.blocks_per_repeat; ++b)
          h = tcn_block(h, r, b, b == 0 ? embs[s] : ad::Var{});
      for (std::size_t i = 0; i < 3; ++i) {
        const std::string k = std::to_string(i);
        logits[s][i] = ad::reshape(ad::conv1d(h, p("mask.w" + k), p("mask.b" + k)), {1, 1, N, F});
      }
    }
    std::vector<ad::Var> per_scale;
    for (std::size_t i = 0; i < 3; ++i) per_scale.push_back(ad::concat({logits[0][i], logits[1][i]}, 1));
    ad::Var raw = ad::concat(per_scale, 0);  // [3, 2, N, F]
    return cfg_.mask_activation == MaskActivation::softmax_bind ? ad::softmax(raw, 1) : ad::relu(raw);
  }

  /// Masked encoder features through the per-scale decoders, trimmed to
  /// `target_len`. Returns [speaker][scale].
  std::array<std::array<ad::Var, 3>, 2> decode(ad::Tape& tape, const EncodedFeatures& mix, ad::Var masks,
                                               std::size_t target_len) {
    check_bound(tape);
    const std::size_t N = cfg_.encoder_filters, F = mix.scales[0].dim(1);
    if (masks.shape() != ad::Shape{3, 2, N, F})
      throw TensorError("decode: mask shape " + ad::to_string(masks.shape()));
    std::array<std::array<ad::Var, 3>, 2> est;
    for (std::size_t i = 0; i < 3; ++i) {
      ad::Var scale_masks = ad::slice(masks, 0, i, 1);
      for (std::size_t s = 0; s < 2; ++s) {
        ad::Var m = ad::reshape(ad::slice(scale_masks, 1, s, 1), {N, F});
        ad::Var wave = ad::conv_transpose1d(ad::mul(mix.scales[i], m), p("dec.w" + std::to_string(i)),
                                            p("dec.b" + std::to_string(i)), cfg_.stride());
        est[s][i] = ad::reshape(ad::slice(wave, 1, 0, target_len), {target_len});
      }
    }
    return est;
  }

  /// Full network on one mixture and the two speakers' references.
  SeparatorOutput forward(ad::Tape& tape, const Waveform& mixture, const Waveform& aux1,
                          const Waveform& aux2) {
    if (bound_tape_ != &tape) bind(tape);
    const auto mix = encode(tape, mixture);
    const auto a1 = encode(tape, aux1);
    const auto a2 = encode(tape, aux2);
    const auto c1 = speaker_encode(tape, a1.all);
    const auto c2 = speaker_encode(tape, a2.all);
    SeparatorOutput out;
    out.masks = extract_masks(tape, mix.all, c1.embedding, c2.embedding);
    out.estimates = decode(tape, mix, out.masks, mixture.size());
    out.logits = {c1.logits, c2.logits};
    out.embeddings = {c1.embedding, c2.embedding};
    return out;
  }

  /// Scale-1 estimates as waveforms, without keeping a tape around.
  std::array<Waveform, 2> infer(const Waveform& mixture, const Waveform& aux1, const Waveform& aux2) {
    ad::Tape tape;
    const auto out = forward(tape, mixture, aux1, aux2);
    std::array<Waveform, 2> w;
    for (std::size_t s = 0; s < 2; ++s) {
      const auto v = out.estimates[s][0].values();
      w[s] = Waveform(std::vector<double>(v.begin(), v.end()), mixture.sample_rate());
    }
    unbind();
    return w;
  }

  void unbind() {
    bound_.clear();
    bound_tape_ = nullptr;
  }

 private:
  ad::Var p(const std::string& name) const {
    const auto it = bound_.find(name);
    if (it == bound_.end()) throw TensorError("parameter " + name + " is not bound");
    return it->second;
  }
  void check_bound(const ad::Tape& tape) const {
    if (bound_tape_ != &tape) throw TensorError("separator parameters are not bound to this tape");
  }

  // Conv-TasNet block: 1x1 up, ReLU, gLN, dilated depthwise, ReLU, gLN,
  // 1x1 down, residual. The first block of a repeat also sees the speaker
  // embedding, tiled over time and stacked onto the channels.
  ad::Var tcn_block(ad::Var x, std::size_t r, std::size_t b, ad::Var emb) {
    const std::string pre = "tcn.r" + std::to_string(r) + ".b" + std::to_string(b);
    ad::Var in = x;
    if (emb.tape != nullptr) {
      const std::size_t F = x.dim(1);
      in = ad::concat({x, ad::broadcast_to(emb, {emb.dim(0), F})}, 0);
    }
    ad::Var h = ad::relu(ad::conv1d(in, p(pre + ".in.w"), p(pre + ".in.b")));
    h = ad::global_layer_norm(h, p(pre + ".ln1.g"), p(pre + ".ln1.b"));
    ad::Conv1dOptions o;
    o.dilation = std::size_t{1} << b;
    o.pad_left = o.pad_right = o.dilation * (cfg_.tcn_kernel - 1) / 2;
    o.groups = cfg_.tcn_channels;
    h = ad::relu(ad::conv1d(h, p(pre + ".dw.w"), p(pre + ".dw.b"), o));
    h = ad::global_layer_norm(h, p(pre + ".ln2.g"), p(pre + ".ln2.b"));
    h = ad::conv1d(h, p(pre + ".out.w"), p(pre + ".out.b"));
    return ad::add(x, h);
  }

  void init(std::uint64_t seed) {
    const std::size_t N = cfg_.encoder_filters, H = cfg_.tcn_channels, B = N, E = cfg_.speaker_embed_dim,
                      S = cfg_.tcn_channels, C = cfg_.num_speaker_classes, K = cfg_.tcn_kernel;
    const auto bias = [&](const std::string& name, ad::Shape shape, double value = 0.0) {
      const auto n = ad::numel(shape);
      params_[name] = ad::Tensor(std::move(shape), std::vector<double>(n, value), true);
    };
    // Weight shapes are registered first and drawn afterwards in name order.
    std::map<std::string, std::pair<ad::Shape, std::size_t>> weights;
    const auto w = [&](const std::string& name, ad::Shape shape, std::size_t fan_in) {
      weights[name] = {std::move(shape), fan_in};
    };
    for (std::size_t i = 0; i < 3; ++i) {
      const std::string k = std::to_string(i);
      const std::size_t L = cfg_.filter_lengths[i];
      w("enc.w" + k, {N, 1, L}, L);
      bias("enc.b" + k, {N});
      w("dec.w" + k, {N, 1, L}, N * L / cfg_.stride());
      bias("dec.b" + k, {1});
      w("mask.w" + k, {N, B, 1}, B);
      bias("mask.b" + k, {N});
    }
    bias("ext.ln.g", {3 * N, 1}, 1.0);
    bias("ext.ln.b", {3 * N, 1});
    w("ext.in.w", {B, 3 * N, 1}, 3 * N);
    bias("ext.in.b", {B});
    for (std::size_t r = 0; r < cfg_.repeats; ++r)
      for (std::size_t b = 0; b < cfg_.blocks_per_repeat; ++b) {
        const std::string pre = "tcn.r" + std::to_string(r) + ".b" + std::to_string(b);
        const std::size_t in = B + (b == 0 ? E : 0);
        w(pre + ".in.w", {H, in, 1}, in);
        bias(pre + ".in.b", {H});
        bias(pre + ".ln1.g", {H, 1}, 1.0);
        bias(pre + ".ln1.b", {H, 1});
        w(pre + ".dw.w", {H, 1, K}, K);
        bias(pre + ".dw.b", {H});
        bias(pre + ".ln2.g", {H, 1}, 1.0);
        bias(pre + ".ln2.b", {H, 1});
        w(pre + ".out.w", {B, H, 1}, H);
        bias(pre + ".out.b", {B});
      }
    bias("spk.ln.g", {3 * N, 1}, 1.0);
    bias("spk.ln.b", {3 * N, 1});
    w("spk.in.w", {S, 3 * N, 1}, 3 * N);
    bias("spk.in.b", {S});
    for (std::size_t j = 0; j < cfg_.speaker_blocks; ++j) {
      const std::string pre = "spk.res" + std::to_string(j);
      w(pre + ".c1.w", {S, S, 1}, S);
      bias(pre + ".c1.b", {S});
      w(pre + ".c2.w", {S, S, 1}, S);
      bias(pre + ".c2.b", {S});
    }
    w("spk.emb.w", {E, S}, S);
    bias("spk.emb.b", {E, 1});
    w("spk.cls.w", {C, E}, E);
    bias("spk.cls.b", {C, 1});

    // Kaiming-uniform: U(-b, b) with b = sqrt(6 / fan_in).
    Rng rng(seed);
    for (auto& [name, spec] : weights) {
      const double bound = std::sqrt(6.0 / static_cast<double>(spec.second));
      std::vector<double> v(ad::numel(spec.first));
      for (auto& e : v) e = rng.uniform(-bound, bound);
      params_[name] = ad::Tensor(spec.first, std::move(v), true);
    }
  }

  SeparatorConfig cfg_;
  ParamMap params_;
  std::map<std::string, ad::Var> bound_;
  const ad::Tape* bound_tape_ = nullptr;
};

}  // namespace sdmtss

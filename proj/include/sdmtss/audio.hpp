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
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sdmtss/error.hpp"

namespace sdmtss {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

/// Mono audio at a fixed sample rate. Samples are 64-bit and must be finite.
class Waveform {
 public:
  Waveform() = default;
  Waveform(std::vector<double> samples, int sample_rate)
      : samples_(std::move(samples)), sample_rate_(sample_rate) {
    if (sample_rate_ <= 0)
      throw ConfigError("sample rate must be positive, got " +
                        std::to_string(sample_rate_));
    for (double s : samples_)
      if (!std::isfinite(s)) throw FormatError("waveform sample is not finite");
  }
  static Waveform zeros(std::size_t n, int sample_rate) {
    return Waveform(std::vector<double>(n, 0.0), sample_rate);
  }

  std::span<const double> samples() const { return samples_; }
  const std::vector<double>& vec() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  int sample_rate() const { return sample_rate_; }
  double duration() const {
    return static_cast<double>(samples_.size()) / sample_rate_;
  }
  double operator[](std::size_t i) const { return samples_[i]; }

  double energy() const {
    double e = 0.0;
    for (double s : samples_) e += s * s;
    return e;
  }
  double peak() const {
    double p = 0.0;
    for (double s : samples_) p = std::max(p, std::abs(s));
    return p;
  }

  friend bool operator==(const Waveform&, const Waveform&) = default;

 private:
  std::vector<double> samples_;
  int sample_rate_ = 8000;
};

/// Frame grid of decision tracks, in seconds.
struct FrameSpec {
  double frame_shift = 0.010;
  double frame_length = 0.025;

  void validate() const {
    if (!(frame_shift > 0.0))
      throw ConfigError("frame_shift must be positive");
    if (!(frame_length >= frame_shift))
      throw ConfigError("frame_length must be >= frame_shift");
  }
  /// Frame shift in samples; must be a whole number at this rate.
  std::size_t hop(int sample_rate) const {
    const double h = frame_shift * sample_rate;
    const double r = std::round(h);
    if (r < 1.0 || std::abs(h - r) > 1e-6)
      throw ConfigError("frame shift is not a whole number of samples at " +
                        std::to_string(sample_rate) + " Hz");
    return static_cast<std::size_t>(r);
  }
  /// Frames needed to cover `num_samples`; a trailing partial frame counts.
  std::size_t num_frames(std::size_t num_samples, int sample_rate) const {
    const std::size_t h = hop(sample_rate);
    return (num_samples + h - 1) / h;
  }
  friend bool operator==(const FrameSpec&, const FrameSpec&) = default;
};

/// Sample span [start, end) held by a decision frame.
inline std::pair<std::size_t, std::size_t> frame_to_sample_span(
    std::size_t frame_index, const FrameSpec& spec, int sample_rate) {
  const std::size_t h = spec.hop(sample_rate);
  return {frame_index * h, frame_index * h + h};
}

// ---------------------------------------------------------------- WAV I/O

namespace detail {

template <typename T>
T read_le(const unsigned char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}

template <typename T>
void put_le(std::vector<unsigned char>& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  out.insert(out.end(), b, b + sizeof(T));
}

inline std::vector<unsigned char> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace detail

/// Reads a RIFF/WAVE file holding PCM16 or IEEE float32 samples. For
/// multichannel files only channel 0 is kept.
inline Waveform read_wav(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  const auto fail = [&](const std::string& why) -> FormatError {
    return FormatError(path.string() + ": " + why);
  };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw fail("not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const auto chunk_size = detail::read_le<std::uint32_t>(hdr + 4);
    const std::size_t body = pos + 8;
    if (body + chunk_size > bytes.size()) {
      // Some writers leave a bogus size on the final data chunk.
      if (std::memcmp(hdr, "data", 4) != 0) throw fail("truncated chunk");
    }
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw fail("fmt chunk too small");
      const unsigned char* f = bytes.data() + body;
      format = detail::read_le<std::uint16_t>(f);
      channels = detail::read_le<std::uint16_t>(f + 2);
      rate = detail::read_le<std::uint32_t>(f + 4);
      bits = detail::read_le<std::uint16_t>(f + 14);
      if (format == 0xFFFE) {
        if (chunk_size < 26) throw fail("extensible fmt chunk too small");
        format = detail::read_le<std::uint16_t>(f + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = std::min<std::size_t>(chunk_size, bytes.size() - body);
      break;
    }
    pos = body + chunk_size + (chunk_size & 1u);
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (data == nullptr) throw fail("missing data chunk");
  if (channels == 0 || rate == 0) throw fail("malformed fmt chunk");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw fail("unsupported encoding (format " + std::to_string(format) +
               ", " + std::to_string(bits) + " bits)");
  const std::size_t frame_bytes = std::size_t{channels} * bits / 8;
  const std::size_t n = data_size / frame_bytes;
  if (n == 0) throw fail("empty payload");

  std::vector<double> samples(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* p = data + i * frame_bytes;
    samples[i] = pcm16 ? detail::read_le<std::int16_t>(p) / 32768.0
                       : static_cast<double>(detail::read_le<float>(p));
  }
  return Waveform(std::move(samples), static_cast<int>(rate));
}

/// PCM16 quantization used by write_wav.
inline std::int16_t quantize_pcm16(double x) {
  const double clipped = std::clamp(x, -1.0, 1.0 - 1.0 / 32768.0);
  return static_cast<std::int16_t>(std::lround(clipped * 32768.0));
}

inline std::vector<unsigned char> encode_wav(const Waveform& w) {
  const auto n = static_cast<std::uint32_t>(w.size());
  std::vector<unsigned char> out;
  out.reserve(44 + 2 * std::size_t{n});
  const auto tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  tag("RIFF");
  detail::put_le<std::uint32_t>(out, 36 + 2 * n);
  tag("WAVE");
  tag("fmt ");
  detail::put_le<std::uint32_t>(out, 16);
  detail::put_le<std::uint16_t>(out, 1);
  detail::put_le<std::uint16_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(w.sample_rate()) * 2);
  detail::put_le<std::uint16_t>(out, 2);
  detail::put_le<std::uint16_t>(out, 16);
  tag("data");
  detail::put_le<std::uint32_t>(out, 2 * n);
  for (double s : w.samples()) detail::put_le<std::int16_t>(out, quantize_pcm16(s));
  return out;
}

/// Writes mono PCM16. Amplitudes are clipped to [-1, 1 - 2^-15].
inline void write_wav(const Waveform& w, const std::filesystem::path& path) {
  const auto bytes = encode_wav(w);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + path.string());
}

// ------------------------------------------------------------- resampling

namespace detail {

// Zeroth-order modified Bessel function of the first kind (power series).
inline double bessel_i0(double x) {
  double sum = 1.0, term = 1.0;
  const double q = x * x / 4.0;
  for (int k = 1; k < 200; ++k) {
    term *= q / (static_cast<double>(k) * k);
    sum += term;
    if (term < sum * 1e-17) break;
  }
  return sum;
}

}  // namespace detail

/// Band-limited resampling by an integer ratio (up or down) with a
/// Kaiser-windowed sinc (beta 8, 64 taps per polyphase branch). Every branch
/// is normalized to unit DC gain.
inline Waveform resample(const Waveform& w, int target_rate) {
  if (target_rate <= 0) throw ConfigError("target rate must be positive");
  const int rate = w.sample_rate();
  if (target_rate == rate) return w;

  int up = 1, down = 1;
  if (target_rate > rate && target_rate % rate == 0) {
    up = target_rate / rate;
  } else if (rate > target_rate && rate % target_rate == 0) {
    down = rate / target_rate;
  } else {
    throw ConfigError("only integer resampling ratios are supported (" +
                      std::to_string(rate) + " -> " +
                      std::to_string(target_rate) + ")");
  }

  constexpr double kBeta = 8.0;
  constexpr int kHalfTaps = 32;
  // Cutoff in cycles per input sample, just below the lower Nyquist rate.
  const double cutoff = 0.5 / down * 0.97;
  const int half_width = kHalfTaps * down;  // input samples each side
  const double i0_beta = detail::bessel_i0(kBeta);

  const auto kernel = [&](double t) {
    const double r = t / (half_width + 1);
    if (std::abs(r) >= 1.0) return 0.0;
    const double window = detail::bessel_i0(kBeta * std::sqrt(1.0 - r * r)) / i0_beta;
    const double x = 2.0 * cutoff * t;
    const double sinc =
        x == 0.0 ? 1.0 : std::sin(std::numbers::pi * x) / (std::numbers::pi * x);
    return 2.0 * cutoff * sinc * window;
  };

  // Output sample n sits at input time n * down / up. Its fractional part
  // cycles through `up` phases.
  struct Branch {
    int first;  // offset of the first tap relative to floor(time)
    std::vector<double> taps;
  };
  std::vector<Branch> branches(static_cast<std::size_t>(up));
  for (int p = 0; p < up; ++p) {
    const double frac = static_cast<double>(p) / up;
    Branch b;
    b.first = -half_width;
    double sum = 0.0;
    for (int k = -half_width; k <= half_width + 1; ++k) {
      const double v = kernel(frac - k);
      b.taps.push_back(v);
      sum += v;
    }
    for (double& v : b.taps) v /= sum;
    branches[static_cast<std::size_t>(p)] = std::move(b);
  }

  const auto in = w.samples();
  const auto n_in = static_cast<long long>(in.size());
  const auto n_out = static_cast<std::size_t>(
      std::llround(static_cast<double>(in.size()) * target_rate / rate));
  std::vector<double> out(n_out, 0.0);
  for (std::size_t n = 0; n < n_out; ++n) {
    const long long num = static_cast<long long>(n) * down;
    const long long base = num / up;
    const auto& b = branches[static_cast<std::size_t>(num % up)];
    double acc = 0.0;
    for (std::size_t j = 0; j < b.taps.size(); ++j) {
      const long long idx = base + b.first + static_cast<long long>(j);
      if (idx >= 0 && idx < n_in) acc += b.taps[j] * in[static_cast<std::size_t>(idx)];
    }
    out[n] = acc;
  }
  return Waveform(std::move(out), target_rate);
}

}  // namespace sdmtss

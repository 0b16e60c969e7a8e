#pragma once

// Audio frontend: 16 kHz mono PCM -> log-mel spectrogram, plus the time-mask
// augmentation applied during training. Pure functions over immutable
// inputs; safe to call concurrently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "fuselm/common.hpp"
#include "fuselm/tensor.hpp"

namespace fuselm {

constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<double> samples;  // in [-1, 1]
  int sample_rate = kSampleRate;
};

inline void validate_waveform(const Waveform& w) {
  if (w.sample_rate != kSampleRate)
    fail(ErrorKind::format, "waveform: sample rate must be ", kSampleRate, " Hz, got ", w.sample_rate);
  if (w.samples.empty()) fail(ErrorKind::invalid, "waveform: no samples");
  for (size_t i = 0; i < w.samples.size(); ++i) {
    double s = w.samples[i];
    if (!std::isfinite(s)) fail(ErrorKind::invalid, "waveform: non-finite sample at index ", i);
    if (s < -1.0 || s > 1.0)
      fail(ErrorKind::invalid, "waveform: sample ", s, " at index ", i, " outside [-1, 1]");
  }
}

struct MelSpectrogram {
  Tensor frames;  // [n_frames x n_mels]
  double frame_hop_s = 0.0;
};

struct MelConfig {
  int64_t n_mels = 80;
  int64_t n_fft = 400;
  int64_t hop = 160;
  int64_t target_frames = 3000;  // 30 s at the default hop
  bool whisper_norm = false;     // clamp to (max-8) then rescale (x+4)/4
};

// log10 floor applied to spectral power before compression.
constexpr double kPowerFloor = 1e-10;
inline double log_floor_value() { return std::log10(kPowerFloor); }

namespace detail {

// Slaney mel scale: linear below 1 kHz, logarithmic above.
inline double hz_to_mel(double hz) {
  const double hz_per_mel = 200.0 / 3.0;
  const double log_knee_hz = 1000.0;
  const double knee_mel = log_knee_hz / hz_per_mel;  // 15
  const double logstep = std::log(6.4) / 27.0;
  if (hz < log_knee_hz) return hz / hz_per_mel;
  return knee_mel + std::log(hz / log_knee_hz) / logstep;
}

inline double mel_to_hz(double mel) {
  const double hz_per_mel = 200.0 / 3.0;
  const double log_knee_hz = 1000.0;
  const double knee_mel = log_knee_hz / hz_per_mel;
  const double logstep = std::log(6.4) / 27.0;
  if (mel < knee_mel) return mel * hz_per_mel;
  return log_knee_hz * std::exp(logstep * (mel - knee_mel));
}

// Triangular filters with Slaney area normalization, evaluated at the
// FFT bin frequencies. Returns [n_mels x n_bins] weights.
inline std::vector<double> mel_filterbank(int64_t n_mels, int64_t n_fft, int sample_rate) {
  int64_t n_bins = n_fft / 2 + 1;
  double mel_max = hz_to_mel(sample_rate / 2.0);
  std::vector<double> edges_hz(static_cast<size_t>(n_mels) + 2);
  for (int64_t m = 0; m < n_mels + 2; ++m)
    edges_hz[static_cast<size_t>(m)] = mel_to_hz(mel_max * static_cast<double>(m) / (n_mels + 1));
  std::vector<double> fb(static_cast<size_t>(n_mels * n_bins), 0.0);
  for (int64_t m = 0; m < n_mels; ++m) {
    double lo = edges_hz[m], center = edges_hz[m + 1], hi = edges_hz[m + 2];
    double norm = 2.0 / (hi - lo);
    for (int64_t k = 0; k < n_bins; ++k) {
      double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double rise = (f - lo) / (center - lo);
      double fall = (hi - f) / (hi - center);
      double w = std::max(0.0, std::min(rise, fall));
      fb[m * n_bins + k] = w * norm;
    }
  }
  return fb;
}

// Reflect-padding index: triangle fold of i into [0, len).
inline int64_t reflect_index(int64_t i, int64_t len) {
  if (len == 1) return 0;
  int64_t period = 2 * len - 2;
  i = ((i % period) + period) % period;
  return i < len ? i : period - i;
}

}  // namespace detail

// Magnitude-squared STFT -> mel filterbank -> log10 with floor, padded or
// truncated to exactly cfg.target_frames rows. Frames are centered on
// multiples of hop over a reflect-padded signal; before padding the count
// is ceil(T / hop). Padding rows hold the log floor (the value silence
// produces), so a short clip behaves like one zero-extended to the window.
inline MelSpectrogram log_mel(const Waveform& w, const MelConfig& cfg) {
  validate_waveform(w);
  if (cfg.n_mels < 1) fail(ErrorKind::config, "log_mel: n_mels must be >= 1, got ", cfg.n_mels);
  if (cfg.n_fft < 2 || cfg.n_fft % 2 != 0)
    fail(ErrorKind::config, "log_mel: n_fft must be even and >= 2, got ", cfg.n_fft);
  if (cfg.hop < 1) fail(ErrorKind::config, "log_mel: hop must be >= 1, got ", cfg.hop);
  if (cfg.hop > cfg.n_fft)
    fail(ErrorKind::config, "log_mel: hop ", cfg.hop, " exceeds n_fft ", cfg.n_fft);
  if (cfg.target_frames < 1)
    fail(ErrorKind::config, "log_mel: target_frames must be >= 1, got ", cfg.target_frames);

  int64_t t_samples = static_cast<int64_t>(w.samples.size());
  int64_t raw_frames = (t_samples + cfg.hop - 1) / cfg.hop;  // ceil(T / hop)
  int64_t n_bins = cfg.n_fft / 2 + 1;

  std::vector<double> window(static_cast<size_t>(cfg.n_fft));
  for (int64_t n = 0; n < cfg.n_fft; ++n)
    window[n] = 0.5 * (1.0 - std::cos(2.0 * M_PI * n / static_cast<double>(cfg.n_fft)));

  // Direct DFT with precomputed bases: at desk scale the transparency is
  // worth more than an FFT, and it keeps consumers link-free.
  std::vector<double> cos_table(static_cast<size_t>(n_bins * cfg.n_fft));
  std::vector<double> sin_table(static_cast<size_t>(n_bins * cfg.n_fft));
  for (int64_t k = 0; k < n_bins; ++k)
    for (int64_t n = 0; n < cfg.n_fft; ++n) {
      double angle = 2.0 * M_PI * k * n / static_cast<double>(cfg.n_fft);
      cos_table[k * cfg.n_fft + n] = std::cos(angle);
      sin_table[k * cfg.n_fft + n] = std::sin(angle);
    }

  std::vector<double> fb = detail::mel_filterbank(cfg.n_mels, cfg.n_fft, w.sample_rate);

  int64_t emit_frames = std::min(raw_frames, cfg.target_frames);
  Tensor out = Tensor::full({cfg.target_frames, cfg.n_mels}, log_floor_value());
  std::vector<double> frame(static_cast<size_t>(cfg.n_fft));
  std::vector<double> power(static_cast<size_t>(n_bins));
  int64_t half = cfg.n_fft / 2;
  for (int64_t t = 0; t < emit_frames; ++t) {
    for (int64_t n = 0; n < cfg.n_fft; ++n) {
      int64_t idx = detail::reflect_index(t * cfg.hop + n - half, t_samples);
      frame[n] = w.samples[static_cast<size_t>(idx)] * window[n];
    }
    for (int64_t k = 0; k < n_bins; ++k) {
      double re = 0.0, im = 0.0;
      const double* ct = cos_table.data() + k * cfg.n_fft;
      const double* st = sin_table.data() + k * cfg.n_fft;
      for (int64_t n = 0; n < cfg.n_fft; ++n) {
        re += frame[n] * ct[n];
        im -= frame[n] * st[n];
      }
      power[k] = re * re + im * im;
    }
    for (int64_t m = 0; m < cfg.n_mels; ++m) {
      double acc = 0.0;
      const double* fm = fb.data() + m * n_bins;
      for (int64_t k = 0; k < n_bins; ++k) acc += fm[k] * power[k];
      out.at(t, m) = std::log10(std::max(acc, kPowerFloor));
    }
  }

  if (cfg.whisper_norm) {
    double global_max = out.data()[0];
    for (double v : out.data()) global_max = std::max(global_max, v);
    for (double& v : out.data()) v = (std::max(v, global_max - 8.0) + 4.0) / 4.0;
  }

  MelSpectrogram mel;
  mel.frames = out;
  mel.frame_hop_s = static_cast<double>(cfg.hop) / w.sample_rate;
  return mel;
}

struct SpecAugmentConfig {
  int64_t mask_width = 20;
  double mask_probability = 0.05;
  double mask_value = 0.0;
  uint64_t rng_seed = 0;
  // Alternative reading of the masking rule: each frame independently opens
  // a mask with the given probability. Off by default.
  bool per_frame = false;
};

// Time masking: one Bernoulli(mask_probability) draw decides whether to mask
// at all; if it fires, a single run of mask_width consecutive frames at a
// uniformly random valid offset is set to mask_value across every mel bin.
// Deterministic for a fixed rng_seed.
inline MelSpectrogram spec_augment(const MelSpectrogram& m, const SpecAugmentConfig& cfg) {
  if (cfg.mask_probability < 0.0 || cfg.mask_probability > 1.0)
    fail(ErrorKind::config, "spec_augment: mask_probability ", cfg.mask_probability, " outside [0, 1]");
  if (cfg.mask_width < 1) fail(ErrorKind::config, "spec_augment: mask_width must be >= 1, got ", cfg.mask_width);
  int64_t n_frames = m.frames.rows();
  int64_t n_mels = m.frames.cols();
  if (cfg.mask_width > n_frames)
    fail(ErrorKind::config, "spec_augment: mask_width ", cfg.mask_width, " exceeds ", n_frames, " frames");

  MelSpectrogram out;
  out.frames = Tensor::from(m.frames.shape(), m.frames.data());
  out.frame_hop_s = m.frame_hop_s;
  Rng rng(cfg.rng_seed);
  auto mask_run = [&](int64_t start) {
    int64_t end = std::min(start + cfg.mask_width, n_frames);
    for (int64_t t = start; t < end; ++t)
      for (int64_t b = 0; b < n_mels; ++b) out.frames.at(t, b) = cfg.mask_value;
  };
  if (cfg.per_frame) {
    for (int64_t t = 0; t < n_frames; ++t)
      if (rng.uniform() < cfg.mask_probability) mask_run(t);
  } else {
    if (rng.uniform() < cfg.mask_probability)
      mask_run(rng.uniform_int(0, n_frames - cfg.mask_width + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// WAV I/O: RIFF/WAVE, PCM 16-bit little-endian, mono, 16 kHz. Anything else
// is rejected with a format error naming the offending field.

namespace detail {

inline uint32_t read_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
inline uint16_t read_u16le(const unsigned char* p) {
  return static_cast<uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

inline Waveform decode_wav(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 44) fail(ErrorKind::format, "wav: file truncated at ", bytes.size(), " bytes");
  if (std::memcmp(bytes.data(), "RIFF", 4) != 0) fail(ErrorKind::format, "wav: missing RIFF magic");
  if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) fail(ErrorKind::format, "wav: missing WAVE form type");

  size_t pos = 12;
  bool have_fmt = false;
  Waveform w;
  std::vector<double> samples;
  while (pos + 8 <= bytes.size()) {
    char id[5] = {0};
    std::memcpy(id, bytes.data() + pos, 4);
    uint32_t chunk = detail::read_u32le(bytes.data() + pos + 4);
    pos += 8;
    if (pos + chunk > bytes.size())
      fail(ErrorKind::format, "wav: chunk '", id, "' overruns file by ", pos + chunk - bytes.size(), " bytes");
    if (std::memcmp(id, "fmt ", 4) == 0) {
      if (chunk < 16) fail(ErrorKind::format, "wav: fmt chunk too short (", chunk, " bytes)");
      const unsigned char* f = bytes.data() + pos;
      uint16_t format = detail::read_u16le(f);
      uint16_t channels = detail::read_u16le(f + 2);
      uint32_t rate = detail::read_u32le(f + 4);
      uint16_t bits = detail::read_u16le(f + 14);
      if (format != 1) fail(ErrorKind::format, "wav: audio format ", format, " is not PCM (1)");
      if (channels != 1) fail(ErrorKind::format, "wav: ", channels, " channels, expected mono");
      if (rate != kSampleRate) fail(ErrorKind::format, "wav: sample rate ", rate, ", expected ", kSampleRate);
      if (bits != 16) fail(ErrorKind::format, "wav: ", bits, " bits per sample, expected 16");
      have_fmt = true;
    } else if (std::memcmp(id, "data", 4) == 0) {
      if (!have_fmt) fail(ErrorKind::format, "wav: data chunk before fmt chunk");
      if (chunk % 2 != 0) fail(ErrorKind::format, "wav: data chunk of odd length ", chunk);
      samples.reserve(chunk / 2);
      for (uint32_t i = 0; i + 1 < chunk; i += 2) {
        auto raw = static_cast<int16_t>(detail::read_u16le(bytes.data() + pos + i));
        samples.push_back(static_cast<double>(raw) / 32768.0);
      }
    }
    pos += chunk + (chunk % 2);  // chunks are word-aligned
  }
  if (!have_fmt) fail(ErrorKind::format, "wav: no fmt chunk");
  if (samples.empty()) fail(ErrorKind::format, "wav: no data chunk or empty data");
  w.samples = std::move(samples);
  w.sample_rate = kSampleRate;
  return w;
}

inline Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "wav: cannot open ", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes);
}

inline std::vector<unsigned char> encode_wav(const Waveform& w) {
  validate_waveform(w);
  auto n = static_cast<uint32_t>(w.samples.size());
  uint32_t data_bytes = n * 2;
  std::vector<unsigned char> out;
  out.reserve(44 + data_bytes);
  auto push_u32 = [&](uint32_t v) {
    out.push_back(v & 0xff);
    out.push_back((v >> 8) & 0xff);
    out.push_back((v >> 16) & 0xff);
    out.push_back((v >> 24) & 0xff);
  };
  auto push_u16 = [&](uint16_t v) {
    out.push_back(v & 0xff);
    out.push_back((v >> 8) & 0xff);
  };
  auto push_tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };
  push_tag("RIFF");
  push_u32(36 + data_bytes);
  push_tag("WAVE");
  push_tag("fmt ");
  push_u32(16);
  push_u16(1);  // PCM
  push_u16(1);  // mono
  push_u32(kSampleRate);
  push_u32(kSampleRate * 2);  // byte rate
  push_u16(2);                // block align
  push_u16(16);               // bits per sample
  push_tag("data");
  push_u32(data_bytes);
  for (double s : w.samples) {
    double scaled = s * 32768.0;
    auto q = static_cast<int32_t>(std::lrint(scaled));
    q = std::clamp(q, -32768, 32767);
    push_u16(static_cast<uint16_t>(static_cast<int16_t>(q)));
  }
  return out;
}

inline void write_wav(const std::string& path, const Waveform& w) {
  std::vector<unsigned char> bytes = encode_wav(w);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "wav: cannot open ", path, " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "wav: short write to ", path);
}

// Raw PCM16 LE mono payloads (the storage format of shard records), using
// the same quantization as the WAV writer.
inline std::vector<uint8_t> waveform_to_pcm16(const Waveform& w) {
  validate_waveform(w);
  std::vector<uint8_t> out;
  out.reserve(w.samples.size() * 2);
  for (double s : w.samples) {
    auto q = static_cast<int32_t>(std::lrint(s * 32768.0));
    q = std::clamp(q, -32768, 32767);
    auto u = static_cast<uint16_t>(static_cast<int16_t>(q));
    out.push_back(static_cast<uint8_t>(u & 0xff));
    out.push_back(static_cast<uint8_t>((u >> 8) & 0xff));
  }
  return out;
}

inline Waveform pcm16_to_waveform(const std::vector<uint8_t>& bytes) {
  if (bytes.empty() || bytes.size() % 2 != 0)
    fail(ErrorKind::format, "pcm16: payload of ", bytes.size(), " bytes is not a whole sample count");
  Waveform w;
  w.samples.reserve(bytes.size() / 2);
  for (size_t i = 0; i + 1 < bytes.size(); i += 2) {
    auto raw = static_cast<int16_t>(detail::read_u16le(&bytes[i]));
    w.samples.push_back(static_cast<double>(raw) / 32768.0);
  }
  return w;
}

}  // namespace fuselm

#pragma once

// WAV decoding/encoding and the waveform conditioning steps that turn an
// arbitrary clip into a fixed-length mono network input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "wavetag/error.hpp"

namespace wavetag {

inline constexpr int kDefaultSampleRate = 16000;
inline constexpr std::size_t kDefaultClipLen = 160000;  // 10 s at 16 kHz

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kDefaultSampleRate;

  std::size_t size() const noexcept { return samples.size(); }
  bool operator==(const Waveform&) const = default;
};

namespace detail {

inline std::uint16_t read_u16(const std::uint8_t* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t read_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline void put_tag(std::vector<std::uint8_t>& out, const char* tag) {
  out.insert(out.end(), tag, tag + 4);
}

inline bool tag_is(const std::uint8_t* p, const char* tag) { return std::memcmp(p, tag, 4) == 0; }

constexpr std::uint16_t kFormatPcm = 0x0001;
constexpr std::uint16_t kFormatFloat = 0x0003;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

}  // namespace detail

// Decodes a little-endian RIFF/WAVE container holding 16-bit PCM or 32-bit
// IEEE float samples with one or two channels. Stereo is averaged to mono and
// int16 samples are scaled by 1/32768. A data chunk that claims more bytes than
// are present is clamped to the whole frames actually available.
inline Waveform decode_wav(std::span<const std::uint8_t> bytes) {
  using detail::read_u16;
  using detail::read_u32;
  using detail::tag_is;
  if (bytes.size() < 12 || !tag_is(bytes.data(), "RIFF") || !tag_is(bytes.data() + 8, "WAVE")) {
    throw DecodeError(DecodeErrorKind::malformed_header, "not a RIFF/WAVE container");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const std::uint8_t* data = nullptr;
  std::size_t data_bytes = 0;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint8_t* chunk = bytes.data() + pos;
    const std::size_t chunk_size = read_u32(chunk + 4);
    const std::size_t body = pos + 8;
    if (tag_is(chunk, "fmt ")) {
      if (chunk_size < 16 || body + 16 > bytes.size()) {
        throw DecodeError(DecodeErrorKind::malformed_header, "truncated fmt chunk");
      }
      const std::uint8_t* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == detail::kFormatExtensible) {
        if (chunk_size < 40 || body + 40 > bytes.size()) {
          throw DecodeError(DecodeErrorKind::malformed_header, "truncated extensible fmt chunk");
        }
        format = read_u16(f + 24);  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (tag_is(chunk, "data")) {
      if (!have_fmt) throw DecodeError(DecodeErrorKind::malformed_header, "data chunk before fmt chunk");
      data = bytes.data() + body;
      data_bytes = std::min(chunk_size, bytes.size() - std::min(body, bytes.size()));
      break;
    }
    pos = body + chunk_size + (chunk_size & 1);
  }

  if (!have_fmt) throw DecodeError(DecodeErrorKind::malformed_header, "missing fmt chunk");
  if (data == nullptr) throw DecodeError(DecodeErrorKind::malformed_header, "missing data chunk");
  if (rate == 0) throw DecodeError(DecodeErrorKind::malformed_header, "zero sample rate");
  if (channels != 1 && channels != 2) {
    throw DecodeError(DecodeErrorKind::unsupported_codec,
                      "unsupported channel count " + std::to_string(channels));
  }
  const bool pcm16 = format == detail::kFormatPcm && bits == 16;
  const bool f32 = format == detail::kFormatFloat && bits == 32;
  if (!pcm16 && !f32) {
    throw DecodeError(DecodeErrorKind::unsupported_codec,
                      "unsupported codec: format " + std::to_string(format) + ", " +
                          std::to_string(bits) + " bits");
  }

  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * (bits / 8);
  const std::size_t frames = data_bytes / frame_bytes;
  if (frames == 0) throw DecodeError(DecodeErrorKind::empty_data, "no sample frames in data chunk");

  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  w.samples.resize(frames);
  for (std::size_t i = 0; i < frames; ++i) {
    const std::uint8_t* frame = data + i * frame_bytes;
    float acc = 0.0f;
    for (std::size_t c = 0; c < channels; ++c) {
      if (pcm16) {
        const auto v = static_cast<std::int16_t>(read_u16(frame + 2 * c));
        acc += static_cast<float>(v) / 32768.0f;
      } else {
        float v;
        std::memcpy(&v, frame + 4 * c, 4);
        acc += v;
      }
    }
    w.samples[i] = channels == 1 ? acc : acc * 0.5f;
  }
  return w;
}

enum class WavEncoding { pcm16, float32 };

// Mono WAV encoder. pcm16 clips to [-1, 32767/32768] and rounds to nearest.
inline std::vector<std::uint8_t> encode_wav(const Waveform& w, WavEncoding enc = WavEncoding::float32) {
  using namespace detail;
  const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : 32;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * (bits / 8));
  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, enc == WavEncoding::pcm16 ? kFormatPcm : kFormatFloat);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(w.sample_rate) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (float s : w.samples) {
    if (enc == WavEncoding::pcm16) {
      const float scaled = std::round(std::clamp(s, -1.0f, 1.0f) * 32768.0f);
      const auto v = static_cast<std::int16_t>(std::clamp(scaled, -32768.0f, 32767.0f));
      put_u16(out, static_cast<std::uint16_t>(v));
    } else {
      std::uint32_t raw;
      std::memcpy(&raw, &s, 4);
      put_u32(out, raw);
    }
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline Waveform read_wav(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_wav(bytes);
  } catch (const DecodeError& e) {
    throw DecodeError(e.kind(), path.string() + ": " + e.what());
  }
}

inline void write_wav(const std::filesystem::path& path, const Waveform& w,
                      WavEncoding enc = WavEncoding::float32) {
  write_file_bytes(path, encode_wav(w, enc));
}

// Linear-interpolation resampler. Output length is round(n * target / source)
// and output sample i reads input position i * source / target; positions past
// the last input sample hold the last sample.
inline Waveform resample_linear(const Waveform& w, int target_rate) {
  if (target_rate <= 0) throw Error("resample_linear: target rate must be positive");
  if (w.sample_rate <= 0) throw Error("resample_linear: source rate must be positive");
  if (target_rate == w.sample_rate) return w;

  const auto n = static_cast<std::uint64_t>(w.samples.size());
  const auto src = static_cast<std::uint64_t>(w.sample_rate);
  const auto dst = static_cast<std::uint64_t>(target_rate);
  const std::uint64_t out_len = (n * dst + src / 2) / src;

  Waveform out;
  out.sample_rate = target_rate;
  out.samples.resize(out_len);
  if (n == 0) return out;
  for (std::uint64_t i = 0; i < out_len; ++i) {
    const std::uint64_t num = i * src;
    const std::uint64_t k = num / dst;
    if (k + 1 >= n) {
      out.samples[i] = w.samples[n - 1];
      continue;
    }
    const double frac = static_cast<double>(num % dst) / static_cast<double>(dst);
    out.samples[i] = static_cast<float>(w.samples[k] * (1.0 - frac) + w.samples[k + 1] * frac);
  }
  return out;
}

// Truncates to the first clip_len samples or zero-pads at the end.
inline Waveform fit_length(Waveform w, std::size_t clip_len) {
  if (clip_len == 0) throw Error("fit_length: clip_len must be positive");
  w.samples.resize(clip_len, 0.0f);
  return w;
}

inline Waveform peak_normalize(Waveform w) {
  float peak = 0.0f;
  for (float s : w.samples) peak = std::max(peak, std::abs(s));
  if (peak > 1e-8f) {
    for (float& s : w.samples) s /= peak;
  }
  return w;
}

// The fixed input conditioning applied to every clip before it reaches the model.
inline Waveform prepare_clip(const Waveform& w, int sample_rate, std::size_t clip_len) {
  return peak_normalize(fit_length(resample_linear(w, sample_rate), clip_len));
}

}  // namespace wavetag

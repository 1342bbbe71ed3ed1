#pragma once

// Label vocabulary, clip manifests, balanced sampling, clip mixing, and the
// synthetic tone dataset used for desk-scale runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"
#include "wavetag/audio_io.hpp"
#include "wavetag/error.hpp"

namespace wavetag {

namespace fs = std::filesystem;

class LabelVocabulary {
 public:
  LabelVocabulary() = default;
  explicit LabelVocabulary(std::vector<std::string> names) : names_(std::move(names)) {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i].empty()) {
        throw ManifestError(ManifestErrorKind::vocabulary, "empty class name at line " + std::to_string(i + 1));
      }
      if (!index_.emplace(names_[i], i).second) {
        throw ManifestError(ManifestErrorKind::vocabulary, "duplicate class name '" + names_[i] + "'");
      }
    }
  }

  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::string& name(std::size_t i) const { return names_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool operator==(const LabelVocabulary& o) const { return names_ == o.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::size_t> index_;
};

// One class name per line; line number is the class index.
inline LabelVocabulary load_vocabulary(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open vocabulary " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == std::char_traits<char>::eof()) break;
    names.push_back(line);
  }
  return LabelVocabulary(std::move(names));
}

inline void save_vocabulary(const fs::path& path, const LabelVocabulary& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& n : vocab.names()) out << n << '\n';
}

struct MultiHotLabel {
  std::vector<std::uint8_t> bits;

  std::size_t size() const noexcept { return bits.size(); }
  std::size_t popcount() const noexcept {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
  }
  bool operator==(const MultiHotLabel&) const = default;
};

struct ClipRecord {
  std::string id;
  std::string path;
  MultiHotLabel label;

  bool operator==(const ClipRecord&) const = default;
};

// Parses JSON Lines records {"id", "path", "labels"} against a vocabulary.
inline std::vector<ClipRecord> parse_manifest(std::istream& in, const LabelVocabulary& vocab) {
  std::vector<ClipRecord> records;
  std::unordered_set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ManifestError(ManifestErrorKind::parse, "manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!j.is_object() || !j.contains("id") || !j["id"].is_string() || !j.contains("path") ||
        !j["path"].is_string() || !j.contains("labels") || !j["labels"].is_array()) {
      throw ManifestError(ManifestErrorKind::parse,
                          "manifest line " + std::to_string(lineno) + ": expected {id, path, labels}");
    }
    ClipRecord rec;
    rec.id = j["id"].get<std::string>();
    rec.path = j["path"].get<std::string>();
    rec.label.bits.assign(vocab.size(), 0);
    if (j["labels"].empty()) {
      throw ManifestError(ManifestErrorKind::empty_labels, "record '" + rec.id + "' has no labels");
    }
    for (const auto& name : j["labels"]) {
      if (!name.is_string()) {
        throw ManifestError(ManifestErrorKind::parse, "record '" + rec.id + "': label names must be strings");
      }
      auto idx = vocab.find(name.get<std::string>());
      if (!idx) {
        throw ManifestError(ManifestErrorKind::unknown_label,
                            "record '" + rec.id + "': unknown label '" + name.get<std::string>() + "'");
      }
      rec.label.bits[*idx] = 1;
    }
    if (!seen.insert(rec.id).second) {
      throw ManifestError(ManifestErrorKind::duplicate_id, "duplicate record id '" + rec.id + "'");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

inline std::vector<ClipRecord> load_manifest(const fs::path& path, const LabelVocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, vocab);
}

inline std::string manifest_line(const ClipRecord& rec, const LabelVocabulary& vocab) {
  nlohmann::json labels = nlohmann::json::array();
  for (std::size_t i = 0; i < rec.label.size(); ++i) {
    if (rec.label.bits[i]) labels.push_back(vocab.name(i));
  }
  nlohmann::ordered_json j;
  j["id"] = rec.id;
  j["path"] = rec.path;
  j["labels"] = labels;
  return j.dump();
}

inline void write_manifest(const fs::path& path, const std::vector<ClipRecord>& records,
                           const LabelVocabulary& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << manifest_line(r, vocab) << '\n';
}

// Records paired with their conditioned waveforms, ready for batching.
struct ClipSet {
  std::vector<ClipRecord> records;
  std::vector<Waveform> waveforms;

  std::size_t size() const noexcept { return records.size(); }
};

// Loads and conditions every clip in a manifest. Relative paths resolve
// against the manifest's directory.
inline ClipSet load_clip_set(const fs::path& manifest, const LabelVocabulary& vocab, int sample_rate,
                             std::size_t clip_len) {
  ClipSet set;
  set.records = load_manifest(manifest, vocab);
  const fs::path base = manifest.parent_path();
  set.waveforms.reserve(set.records.size());
  for (const auto& r : set.records) {
    fs::path p(r.path);
    if (p.is_relative()) p = base / p;
    set.waveforms.push_back(prepare_clip(read_wav(p), sample_rate, clip_len));
  }
  return set;
}

// Convex combination alpha * a + (1 - alpha) * b.
inline Waveform mix_waveforms(const Waveform& a, const Waveform& b, double alpha) {
  if (a.size() != b.size()) throw ShapeError("mix_waveforms: length mismatch");
  if (a.sample_rate != b.sample_rate) throw ShapeError("mix_waveforms: sample rate mismatch");
  if (!(alpha > 0.0 && alpha < 1.0)) throw Error("mix_waveforms: alpha must lie in (0, 1)");
  Waveform out;
  out.sample_rate = a.sample_rate;
  out.samples.resize(a.size());
  const double beta = 1.0 - alpha;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.samples[i] = static_cast<float>(alpha * a.samples[i] + beta * b.samples[i]);
  }
  return out;
}

// Label union: elementwise sign of the label sum. Inputs are nonnegative, so this
// is min(a + b, 1).
inline MultiHotLabel mix_labels(const MultiHotLabel& a, const MultiHotLabel& b) {
  if (a.size() != b.size()) throw ShapeError("mix_labels: length mismatch");
  MultiHotLabel out;
  out.bits.resize(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.bits[i] = static_cast<std::uint8_t>(std::min(a.bits[i] + b.bits[i], 1));
  }
  return out;
}

// Serializable position of a BalancedSampler.
struct SamplerState {
  std::string rng;  // std::mt19937_64 textual state
  std::vector<std::size_t> cycle;
  std::size_t cursor = 0;
};

// Round-robin class-anchored sampler. Anchor classes come from a shuffled
// cycle of all classes that have at least one clip; a fresh shuffle starts when
// the cycle is exhausted, so the cycle carries over across batch boundaries.
// For each anchor one clip containing that class is drawn uniformly.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<ClipRecord>& records, std::size_t n_classes, std::uint64_t seed)
      : rng_(seed), by_class_(n_classes) {
    if (records.empty()) throw Error("balanced sampler: empty dataset");
    n_records_ = records.size();
    for (std::size_t r = 0; r < records.size(); ++r) {
      const auto& bits = records[r].label.bits;
      if (bits.size() != n_classes) throw ShapeError("balanced sampler: label length mismatch");
      for (std::size_t c = 0; c < n_classes; ++c) {
        if (bits[c]) by_class_[c].push_back(r);
      }
    }
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (by_class_[c].empty()) {
        excluded_.push_back(c);
        std::cerr << "warning: class " << c << " has no clips; excluded from balanced sampling\n";
      } else {
        included_.push_back(c);
      }
    }
    if (included_.empty()) throw Error("balanced sampler: no class has any clip");
  }

  // Returns record indices, one per anchor draw.
  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t cls = next_anchor();
      const auto& pool = by_class_[cls];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      out.push_back(pool[pick(rng_)]);
    }
    return out;
  }

  std::size_t next_anchor() {
    if (cursor_ >= cycle_.size()) {
      cycle_ = included_;
      std::shuffle(cycle_.begin(), cycle_.end(), rng_);
      cursor_ = 0;
    }
    const std::size_t cls = cycle_[cursor_++];
    ++anchor_counts_[cls];
    return cls;
  }

  // Uniform draw in the open interval (lo, hi).
  double uniform_open(double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    double v = d(rng_);
    while (!(v > lo && v < hi)) v = d(rng_);
    return v;
  }

  SamplerState state() const {
    std::ostringstream os;
    os << rng_;
    return {os.str(), cycle_, cursor_};
  }

  void restore(const SamplerState& s) {
    std::istringstream is(s.rng);
    is >> rng_;
    if (!is) throw Error("balanced sampler: bad rng state");
    cycle_ = s.cycle;
    cursor_ = s.cursor;
  }

  const std::vector<std::size_t>& included_classes() const noexcept { return included_; }
  const std::vector<std::size_t>& excluded_classes() const noexcept { return excluded_; }
  const std::unordered_map<std::size_t, std::size_t>& anchor_counts() const noexcept { return anchor_counts_; }
  std::size_t record_count() const noexcept { return n_records_; }

 private:
  std::mt19937_64 rng_;
  std::vector<std::vector<std::size_t>> by_class_;
  std::vector<std::size_t> included_;
  std::vector<std::size_t> excluded_;
  std::vector<std::size_t> cycle_;
  std::size_t cursor_ = 0;
  std::size_t n_records_ = 0;
  std::unordered_map<std::size_t, std::size_t> anchor_counts_;
};

struct MixedExample {
  Waveform waveform;
  MultiHotLabel label;
  double alpha = 0.5;
  std::pair<std::string, std::string> source_ids;
  std::pair<std::size_t, std::size_t> source_index;
};

// Draws a balanced pair with distinct ids and a per-pair ratio in (alpha_min, alpha_max).
struct MixPlan {
  std::size_t first = 0;
  std::size_t second = 0;
  double alpha = 0.5;
};

inline std::vector<MixPlan> plan_mixed_batch(BalancedSampler& sampler, std::size_t batch_size,
                                             double alpha_min, double alpha_max) {
  if (!(alpha_min >= 0.0 && alpha_min < alpha_max && alpha_max <= 1.0)) {
    throw ConfigError("mixing ratio bounds must satisfy 0 <= alpha_min < alpha_max <= 1");
  }
  if (sampler.record_count() < 2) throw Error("mixed batch: need at least two clips to form a pair");
  std::vector<MixPlan> plans(batch_size);
  for (auto& p : plans) {
    p.first = sampler.next(1).front();
    // Both draws are balanced; a collision is redrawn. This terminates because
    // at least two records exist, but a class whose only clip is the first
    // draw can be anchored repeatedly, so give up after a bounded number.
    std::size_t tries = 0;
    do {
      p.second = sampler.next(1).front();
      if (++tries > 10000) throw Error("mixed batch: cannot draw a distinct partner clip");
    } while (p.second == p.first);
    p.alpha = sampler.uniform_open(alpha_min, alpha_max);
  }
  return plans;
}

inline std::vector<MixedExample> make_mixed_batch(BalancedSampler& sampler, const ClipSet& clips,
                                                  std::size_t batch_size, double alpha_min = 0.4,
                                                  double alpha_max = 0.6) {
  std::vector<MixedExample> out;
  out.reserve(batch_size);
  for (const auto& p : plan_mixed_batch(sampler, batch_size, alpha_min, alpha_max)) {
    MixedExample ex;
    ex.waveform = mix_waveforms(clips.waveforms[p.first], clips.waveforms[p.second], p.alpha);
    ex.label = mix_labels(clips.records[p.first].label, clips.records[p.second].label);
    ex.alpha = p.alpha;
    ex.source_ids = {clips.records[p.first].id, clips.records[p.second].id};
    ex.source_index = {p.first, p.second};
    out.push_back(std::move(ex));
  }
  return out;
}

// Tone frequency of toy class c: half-octave spacing from 220 Hz.
inline double toy_class_frequency(std::size_t c) { return 220.0 * std::pow(2.0, static_cast<double>(c) / 2.0); }

inline std::string toy_class_name(std::size_t c) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "tone_%02zu", c);
  return buf;
}

struct ToyDatasetOptions {
  std::size_t n_classes = 8;
  std::size_t n_clips = 512;
  double clip_seconds = 1.0;
  int sample_rate = kDefaultSampleRate;
  std::uint64_t seed = 0;
};

struct ToyDataset {
  LabelVocabulary vocab;
  std::vector<ClipRecord> records;
  fs::path manifest_path;
  fs::path vocab_path;
};

// Writes vocab.txt, manifest.jsonl and wav/<id>.wav under out_dir. Each clip
// holds 1-3 distinct tone bursts of 0.5-2 s (clamped to the clip) with 10 ms
// raised-cosine edges, random amplitude in [0.5, 1], random phase, plus white
// Gaussian noise 30 dB below the clip peak. Deterministic in the seed.
inline ToyDataset make_toy_dataset(const fs::path& out_dir, const ToyDatasetOptions& opts) {
  if (opts.n_classes < 2) throw ConfigError("toy dataset needs at least 2 classes");
  if (opts.n_clips == 0) throw ConfigError("toy dataset needs at least one clip");
  if (opts.sample_rate <= 0 || !(opts.clip_seconds > 0.0)) {
    throw ConfigError("toy dataset needs positive sample rate and clip length");
  }
  if (toy_class_frequency(opts.n_classes - 1) >= opts.sample_rate / 2.0) {
    throw ConfigError("highest toy tone exceeds the Nyquist frequency; raise the sample rate");
  }
  std::error_code ec;
  fs::create_directories(out_dir / "wav", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "wav").string() + ": " + ec.message());

  std::vector<std::string> names;
  for (std::size_t c = 0; c < opts.n_classes; ++c) names.push_back(toy_class_name(c));
  ToyDataset ds{LabelVocabulary(names), {}, out_dir / "manifest.jsonl", out_dir / "vocab.txt"};

  std::mt19937_64 rng(opts.seed);
  const auto n = static_cast<std::size_t>(std::llround(opts.clip_seconds * opts.sample_rate));
  const std::size_t edge = std::max<std::size_t>(1, static_cast<std::size_t>(0.01 * opts.sample_rate));
  std::uniform_int_distribution<int> n_events_dist(1, static_cast<int>(std::min<std::size_t>(3, opts.n_classes)));
  std::uniform_real_distribution<double> dur_dist(0.5, 2.0);
  std::uniform_real_distribution<double> amp_dist(0.5, 1.0);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);
  std::normal_distribution<double> noise(0.0, 1.0);

  std::vector<std::size_t> classes(opts.n_classes);
  for (std::size_t i = 0; i < opts.n_clips; ++i) {
    std::vector<double> x(n, 0.0);
    const int n_events = n_events_dist(rng);
    std::iota(classes.begin(), classes.end(), std::size_t{0});
    std::shuffle(classes.begin(), classes.end(), rng);
    MultiHotLabel label{std::vector<std::uint8_t>(opts.n_classes, 0)};
    for (int e = 0; e < n_events; ++e) {
      const std::size_t c = classes[static_cast<std::size_t>(e)];
      label.bits[c] = 1;
      const auto len = std::min(n, static_cast<std::size_t>(dur_dist(rng) * opts.sample_rate));
      std::uniform_int_distribution<std::size_t> off_dist(0, n - len);
      const std::size_t offset = off_dist(rng);
      const double amp = amp_dist(rng);
      const double phase = phase_dist(rng);
      const double w = 2.0 * std::numbers::pi * toy_class_frequency(c) / opts.sample_rate;
      for (std::size_t t = 0; t < len; ++t) {
        double env = 1.0;
        const std::size_t from_end = len - 1 - t;
        const std::size_t d = std::min(t, from_end);
        if (d < edge) env = 0.5 - 0.5 * std::cos(std::numbers::pi * static_cast<double>(d) / edge);
        x[offset + t] += amp * env * std::sin(w * static_cast<double>(t) + phase);
      }
    }
    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    const double sigma = peak * std::pow(10.0, -30.0 / 20.0);
    for (double& v : x) v += sigma * noise(rng);
    peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    const double scale = peak > 0.0 ? 0.9 / peak : 1.0;

    Waveform wav;
    wav.sample_rate = opts.sample_rate;
    wav.samples.resize(n);
    for (std::size_t t = 0; t < n; ++t) wav.samples[t] = static_cast<float>(x[t] * scale);

    char id[32];
    std::snprintf(id, sizeof id, "clip_%05zu", i);
    const std::string rel = std::string("wav/") + id + ".wav";
    write_wav(out_dir / rel, wav);
    ds.records.push_back({id, rel, std::move(label)});
  }
  save_vocabulary(ds.vocab_path, ds.vocab);
  write_manifest(ds.manifest_path, ds.records, ds.vocab);
  return ds;
}

}  // namespace wavetag

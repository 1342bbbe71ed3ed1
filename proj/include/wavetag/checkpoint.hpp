#pragma once

// Checkpoint file layout:
//   line 1  compact JSON header terminated by '\n'
//   rest    little-endian float32 blob
// The header lists every tensor as {name, shape, dtype, offset}, offsets in
// bytes from the start of the blob, laid out contiguously in header order.
// Optimizer moments follow the parameters under the "optimizer" section.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "wavetag/adam.hpp"
#include "wavetag/audio_io.hpp"
#include "wavetag/json_util.hpp"
#include "wavetag/model.hpp"

namespace wavetag {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

inline constexpr int kCheckpointVersion = 1;

struct CheckpointMeta {
  std::string phase;  // "phase1", "phase2" or "baseline"
  std::uint64_t step = 0;
  std::vector<std::string> labels;
  Json extra = Json::object();  // trainer state: strategy, sampler position, seed
};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct LoadedCheckpoint {
  ModelConfig config;
  std::string config_hash;
  CheckpointMeta meta;
  std::vector<NamedTensor> params;
  std::optional<AdamState<float>> optimizer;
};

namespace detail {

inline void append_floats(std::vector<std::uint8_t>& blob, const Tensor<float>& t) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(t.data());
  blob.insert(blob.end(), p, p + t.size() * sizeof(float));
}

inline Json tensor_entry(const std::string& name, const Shape& shape, std::size_t offset) {
  Json e;
  e["name"] = name;
  e["shape"] = shape;
  e["dtype"] = "float32";
  e["offset"] = offset;
  return e;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_checkpoint(const Model<float>& model, const CheckpointMeta& meta,
                                                      const AdamState<float>* optimizer = nullptr) {
  std::vector<std::uint8_t> blob;
  Json header;
  header["format_version"] = kCheckpointVersion;
  header["configs"] = {{"model", to_json(model.config())}};
  header["config_hash"] = config_hash(model.config());
  header["labels"] = meta.labels;
  header["phase"] = meta.phase;
  header["step"] = meta.step;
  header["extra"] = meta.extra;
  Json params = Json::array();
  for (const auto& p : model.params()) {
    params.push_back(detail::tensor_entry(p.name, p.value.shape(), blob.size()));
    detail::append_floats(blob, p.value);
  }
  header["params"] = std::move(params);
  if (optimizer) {
    Json opt;
    opt["t"] = optimizer->t;
    opt["beta1"] = optimizer->hyper.beta1;
    opt["beta2"] = optimizer->hyper.beta2;
    opt["eps"] = optimizer->hyper.eps;
    Json entries = Json::array();
    const auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i].trainable) continue;
      entries.push_back(detail::tensor_entry(ps[i].name + "#m", optimizer->m[i].shape(), blob.size()));
      detail::append_floats(blob, optimizer->m[i]);
      entries.push_back(detail::tensor_entry(ps[i].name + "#v", optimizer->v[i].shape(), blob.size()));
      detail::append_floats(blob, optimizer->v[i]);
    }
    opt["entries"] = std::move(entries);
    header["optimizer"] = std::move(opt);
  }
  header["blob_bytes"] = blob.size();

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(text.begin(), text.end());
  out.push_back('\n');
  out.insert(out.end(), blob.begin(), blob.end());
  return out;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const CheckpointMeta& meta,
                            const AdamState<float>* optimizer = nullptr) {
  write_file_bytes(path, serialize_checkpoint(model, meta, optimizer));
}

namespace detail {

// Reads a contiguous run of tensor entries starting at `expected_offset`.
inline std::vector<NamedTensor> read_entries(const Json& entries, std::span<const std::uint8_t> blob,
                                             std::size_t& expected_offset) {
  std::vector<NamedTensor> out;
  for (const auto& e : entries) {
    std::string name;
    Shape shape;
    std::size_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      offset = e.at("offset").get<std::size_t>();
      if (e.at("dtype").get<std::string>() != "float32") {
        throw CheckpointError(CheckpointErrorKind::corrupt_header, "tensor '" + name + "' is not float32");
      }
    } catch (const nlohmann::json::exception& ex) {
      throw CheckpointError(CheckpointErrorKind::corrupt_header, std::string("bad tensor entry: ") + ex.what());
    }
    const std::size_t bytes = shape_numel(shape) * sizeof(float);
    if (offset != expected_offset || offset + bytes > blob.size()) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            "tensor '" + name + "' with shape " + shape_str(shape) + " at offset " +
                                std::to_string(offset) + " does not fit the blob layout (expected offset " +
                                std::to_string(expected_offset) + ", blob " + std::to_string(blob.size()) +
                                " bytes)");
    }
    auto t = Tensor<float>::uninitialized(shape);
    std::memcpy(t.data(), blob.data() + offset, bytes);
    out.push_back({std::move(name), std::move(t)});
    expected_offset += bytes;
  }
  return out;
}

}  // namespace detail

inline LoadedCheckpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto* nl = static_cast<const std::uint8_t*>(std::memchr(bytes.data(), '\n', bytes.size()));
  if (!nl) throw CheckpointError(CheckpointErrorKind::corrupt_header, "missing header terminator");
  const std::size_t header_len = static_cast<std::size_t>(nl - bytes.data());
  Json header;
  try {
    header = Json::parse(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, std::string("header is not valid JSON: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version") || !header["format_version"].is_number_integer()) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, "header lacks format_version");
  }
  if (header["format_version"].get<int>() != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::version_mismatch,
                          "checkpoint format_version " + std::to_string(header["format_version"].get<int>()) +
                              " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto blob = bytes.subspan(header_len + 1);

  LoadedCheckpoint ck;
  try {
    ck.config = model_config_from_json(header.at("configs").at("model"));
    ck.config_hash = header.at("config_hash").get<std::string>();
    ck.meta.labels = header.at("labels").get<std::vector<std::string>>();
    ck.meta.phase = header.at("phase").get<std::string>();
    ck.meta.step = header.at("step").get<std::uint64_t>();
    ck.meta.extra = header.at("extra");
    if (header.at("blob_bytes").get<std::size_t>() != blob.size()) {
      throw CheckpointError(CheckpointErrorKind::corrupt_header, "blob length does not match header");
    }
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, std::string("bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, std::string("bad model config: ") + e.what());
  }
  if (ck.config_hash != config_hash(ck.config)) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, "config_hash does not match the stored config");
  }
  if (!header.contains("params") || !header["params"].is_array()) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, "header lacks params");
  }

  std::size_t offset = 0;
  ck.params = detail::read_entries(header["params"], blob, offset);
  if (header.contains("optimizer")) {
    const auto& o = header["optimizer"];
    AdamState<float> st;
    try {
      st.t = o.at("t").get<std::uint64_t>();
      st.hyper = {o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>()};
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(CheckpointErrorKind::corrupt_header, std::string("bad optimizer section: ") + e.what());
    }
    if (!o.contains("entries") || !o["entries"].is_array()) {
      throw CheckpointError(CheckpointErrorKind::corrupt_header, "optimizer section lacks entries");
    }
    // Entries alternate name#m, name#v for trainable parameters only; they are
    // spread back over the full parameter layout by apply_checkpoint.
    auto moments = detail::read_entries(o["entries"], blob, offset);
    if (moments.size() % 2 != 0) {
      throw CheckpointError(CheckpointErrorKind::corrupt_header, "optimizer section has unpaired moments");
    }
    for (std::size_t i = 0; i < moments.size(); i += 2) {
      st.m.push_back(std::move(moments[i].value));
      st.v.push_back(std::move(moments[i + 1].value));
    }
    ck.optimizer = std::move(st);
  }
  if (offset != blob.size()) {
    throw CheckpointError(CheckpointErrorKind::shape_mismatch, "blob has trailing bytes past the last tensor");
  }
  return ck;
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint not found: " + path.string());
  return parse_checkpoint(read_file_bytes(path));
}

// Copies checkpoint values into `model`. A config hash mismatch is refused
// unless `force` is set; names and shapes must always agree.
inline void apply_checkpoint(const LoadedCheckpoint& ck, Model<float>& model, AdamState<float>* optimizer = nullptr,
                             bool force = false) {
  if (!force && ck.config_hash != config_hash(model.config())) {
    throw CheckpointError(CheckpointErrorKind::config_mismatch,
                          "checkpoint config " + ck.config_hash + " does not match model config " +
                              config_hash(model.config()));
  }
  auto& ps = model.params();
  if (ck.params.size() != ps.size()) {
    throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                          "checkpoint holds " + std::to_string(ck.params.size()) + " tensors, model has " +
                              std::to_string(ps.size()));
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ck.params[i].name != ps[i].name || ck.params[i].value.shape() != ps[i].value.shape()) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            "tensor " + std::to_string(i) + ": checkpoint has '" + ck.params[i].name + "' " +
                                shape_str(ck.params[i].value.shape()) + ", model expects '" + ps[i].name + "' " +
                                shape_str(ps[i].value.shape()));
    }
  }
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value = ck.params[i].value;

  if (!optimizer) return;
  if (!ck.optimizer) throw CheckpointError(CheckpointErrorKind::corrupt_header, "checkpoint has no optimizer state");
  auto st = AdamState<float>::fresh(ps, ck.optimizer->hyper);
  st.t = ck.optimizer->t;
  std::size_t k = 0;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!ps[i].trainable) continue;
    if (k >= ck.optimizer->m.size() || ck.optimizer->m[k].shape() != ps[i].value.shape() ||
        ck.optimizer->v[k].shape() != ps[i].value.shape()) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch, "optimizer moments do not match '" + ps[i].name + "'");
    }
    st.m[i] = ck.optimizer->m[k];
    st.v[i] = ck.optimizer->v[k];
    ++k;
  }
  if (k != ck.optimizer->m.size()) {
    throw CheckpointError(CheckpointErrorKind::shape_mismatch, "optimizer section has extra moments");
  }
  *optimizer = std::move(st);
}

}  // namespace wavetag

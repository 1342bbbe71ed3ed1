#pragma once

// Training loops: two-phase mix-training (mixed batches with union labels,
// then fine-tuning on raw clips at a lower rate) and the comparison arms.

#include <chrono>
#include <filesystem>
#include <functional>
#include <future>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "wavetag/adam.hpp"
#include "wavetag/checkpoint.hpp"
#include "wavetag/dataset.hpp"
#include "wavetag/metrics.hpp"
#include "wavetag/model.hpp"

namespace wavetag {

enum class Strategy { mix_training, mix_no_finetune, mixup_baseline, none };

inline const std::vector<std::string>& strategy_names() {
  static const std::vector<std::string> names{"mix_training", "mix_no_finetune", "mixup_baseline", "none"};
  return names;
}

inline std::string strategy_name(Strategy s) { return strategy_names()[static_cast<std::size_t>(s)]; }

inline Strategy parse_strategy(const std::string& s) {
  const auto& names = strategy_names();
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == s) return static_cast<Strategy>(i);
  }
  throw ConfigError("unknown strategy '" + s + "' (valid: mix_training, mix_no_finetune, mixup_baseline, none)");
}

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr_phase1 = 3e-4;
  double lr_phase2 = 3e-5;
  double alpha_min = 0.4;
  double alpha_max = 0.6;
  std::size_t steps_phase1 = 4000;
  std::size_t steps_phase2 = 1000;
  std::uint64_t seed = 0;
  Strategy strategy = Strategy::mix_training;
  bool deterministic = true;
  std::size_t checkpoint_interval = 0;  // 0: only at the end of each phase
  std::size_t eval_interval = 0;        // 0: only at the end of each phase
  std::size_t log_interval = 100;
  std::size_t workers = 0;  // >0: prepare the next batch on a background thread

  void validate() const {
    if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
    if (!(lr_phase1 > 0.0) || !(lr_phase2 > 0.0)) throw ConfigError("train: learning rates must be positive");
    if (!(alpha_min >= 0.0 && alpha_min < alpha_max && alpha_max <= 1.0)) {
      throw ConfigError("train: mixing ratio bounds must satisfy 0 <= alpha_min < alpha_max <= 1");
    }
  }

  std::size_t total_steps() const { return steps_phase1 + steps_phase2; }
};

inline Json to_json(const TrainConfig& c) {
  Json j;
  j["batch_size"] = c.batch_size;
  j["lr_phase1"] = c.lr_phase1;
  j["lr_phase2"] = c.lr_phase2;
  j["alpha_min"] = c.alpha_min;
  j["alpha_max"] = c.alpha_max;
  j["steps_phase1"] = c.steps_phase1;
  j["steps_phase2"] = c.steps_phase2;
  j["seed"] = c.seed;
  j["strategy"] = strategy_name(c.strategy);
  j["deterministic"] = c.deterministic;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["eval_interval"] = c.eval_interval;
  j["log_interval"] = c.log_interval;
  j["workers"] = c.workers;
  return j;
}

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  const std::string ctx = "train";
  require_known_keys(j, {"batch_size", "lr_phase1", "lr_phase2", "alpha_min", "alpha_max", "steps_phase1",
                         "steps_phase2", "seed", "strategy", "deterministic", "checkpoint_interval",
                         "eval_interval", "log_interval", "workers"},
                     ctx);
  read_key(j, "batch_size", c.batch_size, ctx);
  read_key(j, "lr_phase1", c.lr_phase1, ctx);
  read_key(j, "lr_phase2", c.lr_phase2, ctx);
  read_key(j, "alpha_min", c.alpha_min, ctx);
  read_key(j, "alpha_max", c.alpha_max, ctx);
  read_key(j, "steps_phase1", c.steps_phase1, ctx);
  read_key(j, "steps_phase2", c.steps_phase2, ctx);
  read_key(j, "seed", c.seed, ctx);
  if (j.contains("strategy")) {
    std::string s;
    read_key(j, "strategy", s, ctx);
    c.strategy = parse_strategy(s);
  }
  read_key(j, "deterministic", c.deterministic, ctx);
  read_key(j, "checkpoint_interval", c.checkpoint_interval, ctx);
  read_key(j, "eval_interval", c.eval_interval, ctx);
  read_key(j, "log_interval", c.log_interval, ctx);
  read_key(j, "workers", c.workers, ctx);
  return c;
}

// ---------------------------------------------------------------------------
// Loss.

template <typename T>
struct LossResult {
  double loss = 0.0;
  double level[3] = {0.0, 0.0, 0.0};
  Tensor<T> dp2, dp3, dp4;
};

// Mean of the three per-level binary cross-entropies.
template <typename T>
LossResult<T> multi_level_loss(const LevelPredictions<T>& p, const Tensor<T>& y) {
  LossResult<T> r;
  r.level[0] = bce_from_probability(p.p2, y);
  r.level[1] = bce_from_probability(p.p3, y);
  r.level[2] = bce_from_probability(p.p4, y);
  r.loss = (r.level[0] + r.level[1] + r.level[2]) / 3.0;
  r.dp2 = bce_from_probability_backward(p.p2, y, 1.0 / 3.0);
  r.dp3 = bce_from_probability_backward(p.p3, y, 1.0 / 3.0);
  r.dp4 = bce_from_probability_backward(p.p4, y, 1.0 / 3.0);
  return r;
}

// ---------------------------------------------------------------------------
// Batches.

enum class BatchKind {
  mixed_union,  // convex waveform mixture, union labels
  mixed_ratio,  // convex waveform mixture, ratio-weighted labels (mixup arm)
  raw,          // manifest clips and labels
};

// Counts what the data path actually built; phase separation is asserted on these.
struct DataPathCounters {
  std::size_t mixed_examples = 0;
  std::size_t raw_examples = 0;
};

struct TrainBatch {
  Tensor<float> x;  // [B, 1, L]
  Tensor<float> y;  // [B, N]
  std::vector<std::string> ids;
  SamplerState sampler_after;  // sampler position once this batch was drawn
};

class BatchSource {
 public:
  BatchSource(const ClipSet& clips, std::size_t n_classes, std::uint64_t seed, BatchKind kind,
              std::size_t batch_size, double alpha_min, double alpha_max, DataPathCounters* counters = nullptr)
      : clips_(clips),
        sampler_(clips.records, n_classes, seed),
        kind_(kind),
        batch_(batch_size),
        n_classes_(n_classes),
        amin_(alpha_min),
        amax_(alpha_max),
        counters_(counters) {}

  TrainBatch next() {
    if (clips_.waveforms.empty()) throw Error("batch source: no clips");
    const std::size_t L = clips_.waveforms.front().size();
    TrainBatch b{Tensor<float>::uninitialized({batch_, 1, L}), Tensor<float>({batch_, n_classes_}), {}, {}};
    if (kind_ == BatchKind::raw) {
      const auto idx = sampler_.next(batch_);
      for (std::size_t i = 0; i < batch_; ++i) {
        put(b, i, clips_.waveforms[idx[i]].samples, clips_.records[idx[i]].label, nullptr, 1.0);
        b.ids.push_back(clips_.records[idx[i]].id);
      }
      if (counters_) counters_->raw_examples += batch_;
    } else {
      const auto mixed = make_mixed_batch(sampler_, clips_, batch_, amin_, amax_);
      for (std::size_t i = 0; i < batch_; ++i) {
        const auto& m = mixed[i];
        if (kind_ == BatchKind::mixed_union) {
          put(b, i, m.waveform.samples, m.label, nullptr, 1.0);
        } else {
          put(b, i, m.waveform.samples, clips_.records[m.source_index.first].label,
              &clips_.records[m.source_index.second].label, m.alpha);
        }
        b.ids.push_back(m.source_ids.first + "+" + m.source_ids.second);
      }
      if (counters_) counters_->mixed_examples += batch_;
    }
    b.sampler_after = sampler_.state();
    return b;
  }

  SamplerState state() const { return sampler_.state(); }
  void restore(const SamplerState& s) { sampler_.restore(s); }

 private:
  // Label row is a*first + (1-a)*second, or first alone.
  void put(TrainBatch& b, std::size_t i, const std::vector<float>& wave, const MultiHotLabel& first,
           const MultiHotLabel* second, double a) const {
    const std::size_t L = b.x.dim(2);
    if (wave.size() != L) throw ShapeError("batch source: clip lengths differ");
    std::copy(wave.begin(), wave.end(), b.x.data() + i * L);
    float* row = b.y.data() + i * n_classes_;
    for (std::size_t c = 0; c < n_classes_; ++c) {
      row[c] = second ? static_cast<float>(a * first.bits[c] + (1.0 - a) * second->bits[c])
                      : static_cast<float>(first.bits[c]);
    }
  }

  const ClipSet& clips_;
  BalancedSampler sampler_;
  BatchKind kind_;
  std::size_t batch_;
  std::size_t n_classes_;
  double amin_, amax_;
  DataPathCounters* counters_;
};

// Keeps one batch in flight on a worker thread. Batches are still drawn one at
// a time from a single sampler, so the sequence is the same as serial.
class BatchPipeline {
 public:
  BatchPipeline(BatchSource& src, bool prefetch) : src_(src), prefetch_(prefetch) {}
  ~BatchPipeline() {
    if (pending_.valid()) pending_.wait();
  }

  TrainBatch next() {
    if (!prefetch_) return src_.next();
    TrainBatch b = pending_.valid() ? pending_.get() : src_.next();
    pending_ = std::async(std::launch::async, [this] { return src_.next(); });
    return b;
  }

 private:
  BatchSource& src_;
  bool prefetch_;
  std::future<TrainBatch> pending_;
};

// One optimizer step; returns the loss. Non-finite values abort with the step,
// learning rate and batch ids in the message.
template <typename T>
double train_step(Model<T>& model, AdamState<T>& opt, const Tensor<T>& x, const Tensor<T>& y, double lr,
                  const std::string& where, const std::vector<std::string>& ids) {
  auto diag = [&] {
    std::string s = where + " lr=" + std::to_string(lr) + " batch=[";
    for (std::size_t i = 0; i < ids.size(); ++i) s += (i ? "," : "") + ids[i];
    return s + "]";
  };
  model.params().zero_grad();
  const auto preds = model.forward(x, Mode::train);
  auto loss = multi_level_loss(preds, y);
  if (!std::isfinite(loss.loss)) throw NonFiniteError("non-finite loss at " + diag());
  model.backward(loss.dp2, loss.dp3, loss.dp4);
  try {
    adam_step(model.params(), opt, lr);
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string(e.what()) + " at " + diag());
  }
  return loss.loss;
}

// ---------------------------------------------------------------------------
// Orchestration.

struct PhasePlan {
  std::string name;  // phase1, phase2, baseline
  BatchKind kind;
  std::size_t steps;
  double lr;
};

inline std::vector<PhasePlan> phase_plan(const TrainConfig& c) {
  switch (c.strategy) {
    case Strategy::mix_training:
      return {{"phase1", BatchKind::mixed_union, c.steps_phase1, c.lr_phase1},
              {"phase2", BatchKind::raw, c.steps_phase2, c.lr_phase2}};
    case Strategy::mix_no_finetune:
      return {{"phase1", BatchKind::mixed_union, c.total_steps(), c.lr_phase1}};
    case Strategy::mixup_baseline:
      return {{"baseline", BatchKind::mixed_ratio, c.total_steps(), c.lr_phase1}};
    case Strategy::none:
      return {{"baseline", BatchKind::raw, c.total_steps(), c.lr_phase1}};
  }
  throw ConfigError("unknown strategy");
}

inline std::uint64_t phase_seed(std::uint64_t seed, const std::string& phase) {
  return fnv1a64(std::to_string(seed) + ":" + phase);
}

struct StepInfo {
  std::string phase;
  std::size_t step = 0;         // 1-based within the phase
  std::size_t global_step = 0;  // 1-based across phases
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainHooks {
  // Return false to stop training after this step.
  std::function<bool(const StepInfo&)> on_step;
  // Called with the model right before the first step of each phase.
  std::function<void(const std::string& phase, const Model<float>&)> on_phase_start;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  const ClipSet* eval_set = nullptr;
  std::optional<std::filesystem::path> resume;
  bool force = false;
  TrainHooks hooks;
  std::ostream* log = &std::cerr;
};

struct EvalPoint {
  std::string phase;
  std::size_t step = 0;
  std::size_t global_step = 0;
  MetricsReport metrics;
};

struct TrainReport {
  std::vector<double> loss_trace;
  std::vector<EvalPoint> evals;
  std::vector<std::string> checkpoints;
  std::string final_checkpoint;
  double wall_clock_seconds = 0.0;
  DataPathCounters counters;
  std::vector<std::pair<std::string, DataPathCounters>> phase_counters;
  bool stopped_early = false;
};

inline Json to_json(const EvalPoint& e) {
  return {{"phase", e.phase}, {"step", e.step}, {"global_step", e.global_step}, {"metrics", to_json(e.metrics)}};
}

namespace detail {

inline Json sampler_to_json(const SamplerState& s) { return {{"rng", s.rng}, {"cycle", s.cycle}, {"cursor", s.cursor}}; }

inline SamplerState sampler_from_json(const Json& j) {
  try {
    return {j.at("rng").get<std::string>(), j.at("cycle").get<std::vector<std::size_t>>(),
            j.at("cursor").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::corrupt_header, std::string("bad sampler state: ") + e.what());
  }
}

}  // namespace detail

// Runs every phase of cfg.strategy on `train`, writing checkpoints, report.jsonl
// and summary.json into opts.out_dir. `model` must be built from the run's
// model config and seed.
inline TrainReport run_training(Model<float>& model, const ClipSet& train, const LabelVocabulary& vocab,
                                const TrainConfig& cfg, const TrainOptions& opts) {
  namespace fs = std::filesystem;
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t N = model.config().head.n_classes;
  if (vocab.size() != N) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " classes, model expects " +
                      std::to_string(N));
  }
  if (train.records.empty()) throw ConfigError("training set is empty");
  fs::create_directories(opts.out_dir);
  std::ofstream report_out(opts.out_dir / "report.jsonl", std::ios::trunc);
  if (!report_out) throw IoError("cannot write " + (opts.out_dir / "report.jsonl").string());
  std::ostream& log = *opts.log;

  const auto plan = phase_plan(cfg);
  TrainReport rep;

  // Resume position: phase index and completed steps within it.
  std::size_t start_phase = 0, start_step = 0, global = 0;
  std::optional<LoadedCheckpoint> resumed;
  if (opts.resume) {
    resumed = load_checkpoint(*opts.resume);
    apply_checkpoint(*resumed, model, nullptr, opts.force);
    const auto& ex = resumed->meta.extra;
    if (ex.contains("strategy") && ex["strategy"] != strategy_name(cfg.strategy) &&
        !(ex["strategy"] == "mix_no_finetune" && cfg.strategy == Strategy::mix_training)) {
      log << "warning: resuming a " << ex["strategy"].get<std::string>() << " checkpoint under strategy "
          << strategy_name(cfg.strategy) << '\n';
    }
    std::size_t k = 0;
    while (k < plan.size() && plan[k].name != resumed->meta.phase) ++k;
    if (k == plan.size()) {
      throw ConfigError("checkpoint phase '" + resumed->meta.phase + "' is not part of strategy " +
                        strategy_name(cfg.strategy));
    }
    start_phase = k;
    start_step = std::min<std::size_t>(resumed->meta.step, plan[k].steps);
    for (std::size_t i = 0; i < k; ++i) global += plan[i].steps;
    global += start_step;
    log << "resuming from " << opts.resume->string() << " at " << resumed->meta.phase << " step " << start_step
        << '\n';
  }

  auto extra_for = [&](const PhasePlan& ph, std::size_t step, const SamplerState& s) {
    Json e;
    e["strategy"] = strategy_name(cfg.strategy);
    e["seed"] = cfg.seed;
    e["phase_steps"] = ph.steps;
    e["sampler"] = detail::sampler_to_json(s);
    e["train"] = to_json(cfg);
    (void)step;
    return e;
  };
  auto save = [&](const fs::path& p, const PhasePlan& ph, std::size_t step, const SamplerState& s,
                  const AdamState<float>& opt) {
    CheckpointMeta meta{ph.name, step, vocab.names(), extra_for(ph, step, s)};
    save_checkpoint(p, model, meta, &opt);
    rep.checkpoints.push_back(p.string());
    log << "saved " << p.string() << '\n';
  };
  auto run_eval = [&](const PhasePlan& ph, std::size_t step) {
    if (!opts.eval_set) return;
    EvalPoint e{ph.name, step, global, evaluate(model, *opts.eval_set, vocab)};
    report_out << to_json(e).dump() << '\n';
    report_out.flush();
    log << ph.name << " step " << step << " eval mAP " << e.metrics.mAP << " AUC " << e.metrics.AUC << '\n';
    rep.evals.push_back(std::move(e));
  };

  bool stop = false;
  for (std::size_t k = start_phase; k < plan.size() && !stop; ++k) {
    const auto& ph = plan[k];
    const fs::path final_path = opts.out_dir / (ph.name + ".ckpt");

    // Phase 2 starts from the phase-1 checkpoint as written to disk.
    if (ph.name == "phase2" && !(resumed && k == start_phase)) {
      const fs::path p1 = opts.out_dir / "phase1.ckpt";
      apply_checkpoint(load_checkpoint(p1), model, nullptr, opts.force);
      log << "loaded " << p1.string() << " for fine-tuning\n";
    }

    DataPathCounters counters;
    BatchSource src(train, N, phase_seed(cfg.seed, ph.name), ph.kind, cfg.batch_size, cfg.alpha_min,
                    cfg.alpha_max, &counters);
    auto opt = AdamState<float>::fresh(model.params());
    std::size_t first = 0;
    SamplerState last_state = src.state();
    if (resumed && k == start_phase) {
      first = start_step;
      if (resumed->optimizer && first > 0) {
        apply_checkpoint(*resumed, model, &opt, opts.force);
        last_state = detail::sampler_from_json(resumed->meta.extra.at("sampler"));
        src.restore(last_state);
      }
    }

    if (opts.hooks.on_phase_start) opts.hooks.on_phase_start(ph.name, model);
    log << ph.name << ": " << ph.steps << " steps at lr " << ph.lr << '\n';

    BatchPipeline pipe(src, cfg.workers > 0);
    double window = 0.0;
    std::size_t window_n = 0;
    for (std::size_t step = first + 1; step <= ph.steps; ++step) {
      auto batch = pipe.next();
      ++global;
      const double loss = train_step(model, opt, batch.x, batch.y, ph.lr,
                                     ph.name + " step " + std::to_string(step), batch.ids);
      rep.loss_trace.push_back(loss);
      last_state = batch.sampler_after;
      window += loss;
      ++window_n;
      if (cfg.log_interval && step % cfg.log_interval == 0) {
        log << ph.name << " step " << step << "/" << ph.steps << " loss " << window / window_n << '\n';
        window = 0.0;
        window_n = 0;
      }
      const bool go_on = !opts.hooks.on_step || opts.hooks.on_step({ph.name, step, global, loss, ph.lr});
      if (cfg.checkpoint_interval && step % cfg.checkpoint_interval == 0 && step < ph.steps) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "_step%06zu.ckpt", step);
        save(opts.out_dir / (ph.name + buf), ph, step, last_state, opt);
      }
      if (cfg.eval_interval && step % cfg.eval_interval == 0 && step < ph.steps) run_eval(ph, step);
      if (!go_on) {
        stop = true;
        rep.stopped_early = true;
        save(final_path, ph, step, last_state, opt);
        rep.final_checkpoint = final_path.string();
        run_eval(ph, step);
        break;
      }
    }
    if (!stop) {
      save(final_path, ph, ph.steps, last_state, opt);
      rep.final_checkpoint = final_path.string();
      run_eval(ph, ph.steps);
    }
    rep.counters.mixed_examples += counters.mixed_examples;
    rep.counters.raw_examples += counters.raw_examples;
    rep.phase_counters.emplace_back(ph.name, counters);
  }

  rep.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  Json summary;
  summary["strategy"] = strategy_name(cfg.strategy);
  summary["seed"] = cfg.seed;
  summary["total_steps"] = rep.loss_trace.size();
  summary["stopped_early"] = rep.stopped_early;
  summary["final_checkpoint"] = rep.final_checkpoint;
  summary["checkpoints"] = rep.checkpoints;
  summary["wall_clock_seconds"] = rep.wall_clock_seconds;
  Json pc = Json::object();
  for (const auto& [name, c] : rep.phase_counters) {
    pc[name] = {{"mixed_examples", c.mixed_examples}, {"raw_examples", c.raw_examples}};
  }
  summary["data_path"] = std::move(pc);
  summary["final_eval"] = rep.evals.empty() ? Json(nullptr) : to_json(rep.evals.back().metrics);
  summary["loss_trace"] = rep.loss_trace;
  std::ofstream(opts.out_dir / "summary.json", std::ios::trunc) << summary.dump(2) << '\n';
  return rep;
}

}  // namespace wavetag

// wavetag: synthesize toy data, train, evaluate and tag clips.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "wavetag/audio_io.hpp"
#include "wavetag/checkpoint.hpp"
#include "wavetag/config.hpp"
#include "wavetag/dataset.hpp"
#include "wavetag/metrics.hpp"
#include "wavetag/model.hpp"
#include "wavetag/training.hpp"

namespace fs = std::filesystem;
using namespace wavetag;

namespace {

// Raised for argument combinations CLI11 cannot check on its own.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Shared {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool deterministic = false;
  std::size_t workers = 0;
};

void add_shared(CLI::App* cmd, Shared& s, bool with_out) {
  cmd->add_option("--config", s.config, "JSON run config")->check(CLI::ExistingFile);
  cmd->add_option("--seed", s.seed, "random seed (overrides the config)");
  if (with_out) cmd->add_option("--out", s.out, "output location")->required();
  cmd->add_flag("--deterministic", s.deterministic, "reproducible run");
  cmd->add_option("--workers", s.workers, "background data workers (0: none)");
}

void write_json(const fs::path& p, const Json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  Shared shared;
  std::size_t classes = 8;
  std::size_t clips = 512;
  double seconds = 1.0;
  int rate = 16000;
};

int cmd_synth(const SynthArgs& a) {
  if (a.classes < 2) throw UsageError("--classes must be at least 2: mixing needs two distinguishable sources");
  ToyDatasetOptions o;
  o.n_classes = a.classes;
  o.n_clips = a.clips;
  o.clip_seconds = a.seconds;
  o.sample_rate = a.rate;
  o.seed = a.shared.seed.value_or(0);
  const fs::path out(a.shared.out);
  const auto ds = make_toy_dataset(out, o);
  write_json(out / "synth_config.json", {{"classes", o.n_classes},
                                         {"clips", o.n_clips},
                                         {"seconds", o.clip_seconds},
                                         {"rate", o.sample_rate},
                                         {"seed", o.seed}});
  std::cerr << "wrote " << ds.records.size() << " clips to " << out.string() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  Shared shared;
  std::string strategy;
  std::string resume;
  bool force = false;
  std::optional<std::size_t> steps1, steps2, batch;
};

int cmd_train(const TrainArgs& a) {
  if (a.shared.config.empty()) throw UsageError("train needs --config");
  auto rc = load_run_config(a.shared.config);
  if (!a.strategy.empty()) rc.train.strategy = parse_strategy(a.strategy);
  if (a.shared.seed) rc.train.seed = *a.shared.seed;
  if (a.shared.deterministic) rc.train.deterministic = true;
  if (a.shared.workers) rc.train.workers = a.shared.workers;
  if (a.steps1) rc.train.steps_phase1 = *a.steps1;
  if (a.steps2) rc.train.steps_phase2 = *a.steps2;
  if (a.batch) rc.train.batch_size = *a.batch;
  rc.train.validate();
  if (rc.data.train_manifest.empty()) throw ConfigError("config: data.train_manifest is required");
  if (rc.data.vocab.empty()) rc.data.vocab = rc.data.train_manifest.parent_path() / "vocab.txt";

  const auto vocab = load_vocabulary(rc.data.vocab);
  if (!rc.n_classes_given) rc.model.head.n_classes = vocab.size();
  if (rc.model.head.n_classes != vocab.size()) {
    throw ConfigError("model.head.n_classes is " + std::to_string(rc.model.head.n_classes) + " but the vocabulary has " +
                      std::to_string(vocab.size()) + " classes");
  }
  rc.model.validate();

  const fs::path out(a.shared.out);
  fs::create_directories(out);
  Json resolved = to_json(rc);
  resolved["resume"] = a.resume;
  write_json(out / "resolved_config.json", resolved);

  const auto train = load_clip_set(rc.data.train_manifest, vocab, rc.model.sample_rate, rc.model.clip_len);
  std::optional<ClipSet> eval;
  if (!rc.data.eval_manifest.empty()) {
    eval = load_clip_set(rc.data.eval_manifest, vocab, rc.model.sample_rate, rc.model.clip_len);
  }
  std::cerr << "train clips " << train.size() << ", eval clips " << (eval ? eval->size() : 0) << ", strategy "
            << strategy_name(rc.train.strategy) << ", seed " << rc.train.seed << '\n';

  Model<float> model(rc.model, rc.train.seed);
  TrainOptions opts;
  opts.out_dir = out;
  opts.eval_set = eval ? &*eval : nullptr;
  if (!a.resume.empty()) opts.resume = fs::path(a.resume);
  opts.force = a.force;
  const auto rep = run_training(model, train, vocab, rc.train, opts);
  std::cerr << "done in " << rep.wall_clock_seconds << " s; final checkpoint " << rep.final_checkpoint << '\n';
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  Shared shared;
  std::string checkpoint;
  std::string manifest;
  std::size_t batch = 0;
};

Model<float> model_from_checkpoint(const std::string& path, LoadedCheckpoint& ck) {
  ck = load_checkpoint(path);
  Model<float> model(ck.config);
  apply_checkpoint(ck, model);
  return model;
}

int cmd_eval(const EvalArgs& a) {
  std::size_t batch = 16;
  if (!a.shared.config.empty()) batch = load_run_config(a.shared.config).eval.batch_size;
  if (a.batch) batch = a.batch;
  LoadedCheckpoint ck;
  const auto model = model_from_checkpoint(a.checkpoint, ck);
  const LabelVocabulary vocab(ck.meta.labels);
  const auto set = load_clip_set(a.manifest, vocab, ck.config.sample_rate, ck.config.clip_len);
  const auto rep = evaluate(model, set, vocab, batch);
  Json j = to_json(rep);
  j["checkpoint"] = fs::path(a.checkpoint).filename().string();
  j["clips"] = set.size();
  const fs::path out(a.shared.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_json(out, j);
  std::cerr << "mAP " << rep.mAP << " AUC " << rep.AUC << " over " << rep.evaluated_classes << " classes\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct PredictArgs {
  Shared shared;
  std::string checkpoint;
  std::string wav;
  std::size_t top = 5;
};

int cmd_predict(const PredictArgs& a) {
  LoadedCheckpoint ck;
  const auto model = model_from_checkpoint(a.checkpoint, ck);
  const auto& cfg = ck.config;
  const auto clip = prepare_clip(read_wav(a.wav), cfg.sample_rate, cfg.clip_len);
  const Tensor<float> x({1, 1, cfg.clip_len}, clip.samples);
  const auto p = model.predict(x).fused;
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return p[i] > p[j]; });
  const std::size_t k = std::min(a.top, order.size());
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t c = order[i];
    const std::string name = c < ck.meta.labels.size() ? ck.meta.labels[c] : std::to_string(c);
    std::printf("%s\t%.6f\n", name.c_str(), static_cast<double>(p[c]));
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"wavetag: raw-waveform audio tagging"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth-data", "write a synthetic tone dataset");
  add_shared(s, synth.shared, true);
  s->add_option("--classes", synth.classes, "number of classes");
  s->add_option("--clips", synth.clips, "number of clips");
  s->add_option("--seconds", synth.seconds, "clip length in seconds")->check(CLI::PositiveNumber);
  s->add_option("--rate", synth.rate, "sample rate")->check(CLI::PositiveNumber);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a model");
  add_shared(t, train.shared, true);
  t->add_option("--strategy", train.strategy, "training strategy")
      ->check(CLI::IsMember(strategy_names()));
  t->add_option("--resume", train.resume, "continue from a checkpoint");
  t->add_flag("--force", train.force, "accept a checkpoint whose config differs");
  t->add_option("--steps-phase1", train.steps1, "override train.steps_phase1");
  t->add_option("--steps-phase2", train.steps2, "override train.steps_phase2");
  t->add_option("--batch-size", train.batch, "override train.batch_size");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint on a manifest");
  add_shared(e, ev.shared, true);
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint file")->required();
  e->add_option("--manifest", ev.manifest, "manifest to evaluate")->required();
  e->add_option("--batch-size", ev.batch, "inference batch size");

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "print the top classes for one WAV file");
  add_shared(p, pr.shared, false);
  p->add_option("--checkpoint", pr.checkpoint, "checkpoint file")->required();
  p->add_option("--wav", pr.wav, "input WAV")->required();
  p->add_option("--top", pr.top, "rows to print");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*p) return cmd_predict(pr);
  } catch (const UsageError& ex) {
    std::cerr << "usage error: " << ex.what() << '\n';
    return 2;
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << '\n';
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << '\n';
    return 1;
  }
  return 2;
}

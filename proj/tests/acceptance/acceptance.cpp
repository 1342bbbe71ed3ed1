// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run criteria 1-10
//   acceptance --only N   run criterion N
//
// Training criteria read the desk-scale model and schedule from configs/toy.json
// and write their runs under ./acceptance_work.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "support.hpp"
#include "wavetag/checkpoint.hpp"
#include "wavetag/config.hpp"

using namespace wavetag;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

const fs::path kWork = "acceptance_work";

// The toy set has 8 classes; the config leaves n_classes to the vocabulary.
RunConfig toy_run_config() {
  auto rc = load_run_config(fs::path(WAVETAG_CONFIG_DIR) / "toy.json");
  if (!rc.n_classes_given) rc.model.head.n_classes = ToyDatasetOptions{}.n_classes;
  return rc;
}

struct ToySet {
  LabelVocabulary vocab;
  ClipSet clips;
};

ToySet toy_set(const fs::path& dir, std::size_t n_clips, std::uint64_t seed, const ModelConfig& m) {
  ToyDatasetOptions o;
  o.n_clips = n_clips;
  o.seed = seed;
  o.sample_rate = m.sample_rate;
  o.clip_seconds = static_cast<double>(m.clip_len) / m.sample_rate;
  const auto ds = make_toy_dataset(dir, o);
  return {ds.vocab, load_clip_set(ds.manifest_path, ds.vocab, m.sample_rate, m.clip_len)};
}

struct ArmResult {
  double mAP = 0.0;
  double seconds = 0.0;
  TrainReport report;
};

// Trains one arm from scratch and scores the final model on `eval`.
ArmResult train_arm(const RunConfig& rc, TrainConfig tc, const ToySet& train, const ClipSet& eval, const fs::path& out,
                    TrainHooks hooks = {}) {
  fs::create_directories(out);
  std::ofstream log(out / "train.log");
  Model<float> model(rc.model, tc.seed);
  TrainOptions opts;
  opts.out_dir = out;
  opts.log = &log;
  opts.hooks = std::move(hooks);
  tc.eval_interval = 0;
  ArmResult r;
  r.report = run_training(model, train.clips, train.vocab, tc, opts);
  r.mAP = evaluate(model, eval, train.vocab, rc.eval.batch_size).mAP;
  r.seconds = r.report.wall_clock_seconds;
  return r;
}

// ---------------------------------------------------------------------------

Outcome shape_contract() {
  ModelConfig cfg;  // full-scale defaults
  Model<float> model(cfg, 0);
  std::mt19937_64 rng(1);
  const auto x = wt_test::random_tensor<float>({1, 1, cfg.clip_len}, rng);
  const auto t0 = std::chrono::steady_clock::now();
  const auto fe = model.frontend_forward(x, Mode::eval);
  const auto p = model.predict(x);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool shape_ok = fe.shape() == Shape{1, 128, 1, 2500};
  const bool out_ok = p.fused.shape() == Shape{1, cfg.head.n_classes} && p.fused.all_finite();
  return {shape_ok && out_ok && secs < 60.0,
          "front-end " + shape_str(fe.shape()) + ", fused " + shape_str(p.fused.shape()) + ", " +
              fmt("%.1f s", secs)};
}

Outcome dprime_anchors() {
  const std::pair<double, double> anchors[] = {
      {0.959, 2.452}, {0.965, 2.558}, {0.962, 2.510}, {0.968, 2.614}, {0.970, 2.660}};
  double worst = 0.0;
  for (auto [auc, want] : anchors) worst = std::max(worst, std::abs(d_prime(auc) - want));
  return {worst <= 0.02, "max |d' - table| = " + fmt("%.4f", worst)};
}

Outcome gradient_suite() {
  const auto suite = wt_test::op_gradient_suite(1);
  std::size_t failed = 0;
  std::string names;
  double worst_ratio = 0.0;
  for (const auto& g : suite) {
    worst_ratio = std::max(worst_ratio, g.error / g.tol);
    if (!g.ok()) {
      ++failed;
      names += " " + g.name;
    }
  }
  const auto e2e = wt_test::end_to_end_gradient(1);
  std::string detail = std::to_string(suite.size() - failed) + "/" + std::to_string(suite.size()) +
                       " ops, worst error/tol " + fmt("%.3g", worst_ratio) + ", end-to-end " +
                       fmt("%.3g", e2e.error);
  if (failed) detail += ", failing:" + names;
  return {failed == 0 && e2e.ok(), detail};
}

Outcome metric_oracles() {
  const auto g = wt_test::metric_oracle_gap(2024, 200);
  return {g.ap <= 1e-9 && g.auc <= 1e-9,
          "200 instances, " + std::to_string(g.columns) + " columns, max gap AP " + fmt("%.2g", g.ap) + " AUC " +
              fmt("%.2g", g.auc)};
}

Outcome mixing_algebra() {
  const auto v = wt_test::mixing_properties(2024, 1000);
  std::ostringstream s;
  s << "1000 cases; violations: commutative " << v.commutative << ", associative " << v.associative
    << ", idempotent " << v.idempotent << ", popcount " << v.popcount << ", convexity " << v.convexity << ", swap "
    << v.swap;
  return {v.total() == 0, s.str()};
}

Outcome overfit() {
  const auto rc = toy_run_config();
  const auto dir = kWork / "c6";
  const auto train = toy_set(dir / "data", 32, 6, rc.model);
  TrainConfig tc = rc.train;
  tc.strategy = Strategy::none;
  tc.steps_phase1 = 2000;
  tc.steps_phase2 = 0;
  std::vector<double> window;
  double reached = -1.0;
  std::size_t reached_at = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const StepInfo& s) {
    window.push_back(s.loss);
    if (window.size() > 10) window.erase(window.begin());
    double mean = 0.0;
    for (double l : window) mean += l;
    mean /= static_cast<double>(window.size());
    if (window.size() == 10 && mean < 0.05) {
      reached = mean;
      reached_at = s.global_step;
      return false;
    }
    return true;
  };
  const auto r = train_arm(rc, tc, train, train.clips, dir / "run", hooks);
  const bool ok = reached >= 0.0 && r.mAP >= 0.95 && r.seconds < 900.0;
  std::string detail = reached >= 0.0 ? "loss (10-step mean) " + fmt("%.4f", reached) + " at step " +
                                            std::to_string(reached_at)
                                      : "loss never below 0.05 in 2000 steps (last " +
                                            fmt("%.4f", r.report.loss_trace.back()) + ")";
  return {ok, detail + ", train mAP " + fmt("%.4f", r.mAP) + ", " + fmt("%.0f s", r.seconds)};
}

struct ToyPair {
  ToySet train;
  ToySet eval;
};

ToyPair toy_pair(const fs::path& dir, const ModelConfig& m) {
  return {toy_set(dir / "train", 512, 11, m), toy_set(dir / "eval", 256, 12, m)};
}

Outcome toy_learning() {
  const auto rc = toy_run_config();
  const auto data = toy_pair(kWork / "c7" / "data", rc.model);
  TrainConfig tc = rc.train;
  tc.strategy = Strategy::none;
  const auto r = train_arm(rc, tc, data.train, data.eval.clips, kWork / "c7" / "run");
  return {r.mAP >= 0.60 && r.seconds < 1800.0,
          "eval mAP " + fmt("%.4f", r.mAP) + " after " + std::to_string(r.report.loss_trace.size()) + " steps, " +
              fmt("%.0f s", r.seconds)};
}

Outcome mix_direction() {
  const auto rc = toy_run_config();
  const auto data = toy_pair(kWork / "c8" / "data", rc.model);
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::string> arms{"mix_training", "mix_no_finetune", "none", "mixup_baseline"};
  std::map<std::string, std::vector<double>> maps;
  Json record = Json::object();
  for (std::uint64_t seed : {0, 1, 2}) {
    for (const auto& arm : arms) {
      TrainConfig tc = rc.train;
      tc.strategy = parse_strategy(arm);
      tc.seed = seed;
      const auto r = train_arm(rc, tc, data.train, data.eval.clips,
                               kWork / "c8" / (arm + "_seed" + std::to_string(seed)));
      maps[arm].push_back(r.mAP);
      record[arm].push_back({{"seed", seed}, {"mAP", r.mAP}, {"seconds", r.seconds}});
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::map<std::string, double> med;
  for (const auto& arm : arms) {
    med[arm] = median3(maps[arm]);
    record[arm + "_median"] = med[arm];
  }
  std::ofstream(kWork / "c8" / "results.json") << record.dump(2) << '\n';
  const bool ok = med["mix_training"] >= med["mix_no_finetune"] && med["mix_training"] > med["none"] && secs < 7200.0;
  std::string detail = "median eval mAP over 3 seeds:";
  for (const auto& arm : arms) detail += " " + arm + " " + fmt("%.4f", med[arm]);
  return {ok, detail + ", " + fmt("%.0f s", secs)};
}

Outcome determinism() {
  const auto rc = toy_run_config();
  const auto dir = kWork / "c9";
  const auto train = toy_set(dir / "train", 64, 21, rc.model);
  const auto eval = toy_set(dir / "eval", 64, 22, rc.model);
  TrainConfig tc = rc.train;
  tc.strategy = Strategy::mix_training;
  tc.steps_phase1 = 80;
  tc.steps_phase2 = 20;
  tc.deterministic = true;
  tc.seed = 9;
  std::vector<std::vector<double>> traces;
  std::vector<std::string> reports;
  for (const char* name : {"a", "b"}) {
    const auto r = train_arm(rc, tc, train, eval.clips, dir / name);
    traces.push_back(r.report.loss_trace);
    const auto ck = load_checkpoint(r.report.final_checkpoint);
    Model<float> m(ck.config);
    apply_checkpoint(ck, m);
    const auto report = to_json(evaluate(m, eval.clips, eval.vocab, rc.eval.batch_size)).dump(2);
    std::ofstream(dir / name / "eval.json") << report;
    reports.push_back(report);
  }
  const bool same_trace = traces[0].size() == 100 && traces[0] == traces[1];
  const bool same_report = reports[0] == reports[1];
  return {same_trace && same_report, std::string("loss traces ") + (same_trace ? "identical" : "differ") +
                                         " over " + std::to_string(traces[0].size()) + " steps, eval reports " +
                                         (same_report ? "byte-identical" : "differ")};
}

Outcome checkpoint_round_trip() {
  const auto rc = toy_run_config();
  const auto dir = kWork / "c10";
  const auto train = toy_set(dir / "data", 16, 31, rc.model);
  TrainConfig tc = rc.train;
  tc.strategy = Strategy::mix_training;
  tc.batch_size = 4;
  tc.steps_phase1 = 3;
  tc.steps_phase2 = 2;
  ParamStore<float> phase2_start;
  TrainHooks hooks;
  hooks.on_phase_start = [&](const std::string& phase, const Model<float>& m) {
    if (phase == "phase2") phase2_start = m.params();
  };
  const auto r = train_arm(rc, tc, train, train.clips, dir / "run", hooks);

  const auto p1 = load_checkpoint(dir / "run" / "phase1.ckpt");
  bool start_equal = phase2_start.size() == p1.params.size();
  for (std::size_t i = 0; start_equal && i < p1.params.size(); ++i) {
    start_equal = phase2_start[i].name == p1.params[i].name && phase2_start[i].value == p1.params[i].value;
  }

  const fs::path path = r.report.final_checkpoint;
  const auto ck = load_checkpoint(path);
  Model<float> fresh(ck.config, 12345);
  AdamState<float> opt;
  apply_checkpoint(ck, fresh, &opt);
  save_checkpoint(dir / "resaved.ckpt", fresh, ck.meta, &opt);
  const bool bytes_equal = read_file_bytes(path) == read_file_bytes(dir / "resaved.ckpt");
  return {start_equal && bytes_equal, std::string("save-load-save ") + (bytes_equal ? "byte-identical" : "differs") +
                                          ", phase-2 start " + (start_equal ? "bit-equal" : "differs") +
                                          " to phase1.ckpt"};
}

struct Criterion {
  const char* name;
  double limit_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {"shape contract", 60, shape_contract},
      {"d-prime anchors", 1, dprime_anchors},
      {"gradient suite", 300, gradient_suite},
      {"metric oracles", 60, metric_oracles},
      {"mixing algebra", 60, mixing_algebra},
      {"overfit sanity", 900, overfit},
      {"toy learning", 1800, toy_learning},
      {"mix-training direction", 7200, mix_direction},
      {"determinism", 600, determinism},
      {"checkpoint round trip", 60, checkpoint_round_trip},
  };
  std::size_t only = 0;
  if (argc == 3 && std::string(argv[1]) == "--only") {
    only = std::stoul(argv[2]);
    if (only < 1 || only > criteria.size()) {
      std::cerr << "criterion must be 1-" << criteria.size() << '\n';
      return 2;
    }
  } else if (argc != 1) {
    std::cerr << "usage: acceptance [--only N]\n";
    return 2;
  }

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && only != i + 1) continue;
    const auto& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs >= c.limit_seconds) {
      o.pass = false;
      o.detail += ", over the " + fmt("%.0f s", c.limit_seconds) + " limit";
    }
    std::printf("criterion %zu (%s): %s - %s [%.1f s]\n", i + 1, c.name, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                secs);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  }
  return failures ? 1 : 0;
}

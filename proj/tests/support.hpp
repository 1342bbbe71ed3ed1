#pragma once

// Shared test helpers: temporary directories, random tensors, finite-difference
// gradient checks and brute-force metric oracles. The acceptance binary uses
// the same checks as the unit tests.

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "wavetag/dataset.hpp"
#include "wavetag/metrics.hpp"
#include "wavetag/model.hpp"
#include "wavetag/ops.hpp"
#include "wavetag/training.hpp"

namespace wt_test {

using namespace wavetag;
namespace fs = std::filesystem;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "wavetag") {
    std::string tmpl = (fs::temp_directory_path() / (tag + "_XXXXXX")).string();
    if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
    path_ = tmpl;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

template <typename T = double>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (auto& v : t.values()) v = static_cast<T>(d(rng));
  return t;
}

// Values bounded away from zero, for checks across the ReLU kink.
inline Tensor<double> random_away_from_zero(Shape s, std::mt19937_64& rng, double margin = 0.05) {
  Tensor<double> t(std::move(s));
  std::uniform_real_distribution<double> d(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.values()) v = sign(rng) ? d(rng) : -d(rng);
  return t;
}

// Distinct values spaced by at least `gap`, shuffled, for maxpool checks away from ties.
inline Tensor<double> random_distinct(Shape s, std::mt19937_64& rng, double gap = 0.01) {
  Tensor<double> t(std::move(s));
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = gap * static_cast<double>(i) - 0.5 * gap * v.size();
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), t.data());
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Central-difference comparison. Errors are accumulated over every tensor that
// feeds an op (inputs and parameters) and reported as
//   max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, 1e-8)
// over that whole gradient vector, so entries whose true gradient is exactly
// zero (a bias feeding a train-mode batchnorm) do not turn rounding noise into
// error. Perturbed values are restored.
struct FdStats {
  double max_diff = 0.0;
  double max_num = 0.0;

  void add(double* x, std::size_t n, const double* analytic, const std::function<double()>& loss, double h = 1e-5) {
    for (std::size_t i = 0; i < n; ++i) {
      const double keep = x[i];
      x[i] = keep + h;
      const double lp = loss();
      x[i] = keep - h;
      const double lm = loss();
      x[i] = keep;
      const double num = (lp - lm) / (2.0 * h);
      max_diff = std::max(max_diff, std::abs(num - analytic[i]));
      max_num = std::max(max_num, std::abs(num));
    }
  }
  void add(Tensor<double>& x, const Tensor<double>& analytic, const std::function<double()>& loss,
           double h = 1e-5) {
    if (x.shape() != analytic.shape()) throw ShapeError("fd check: gradient shape differs from input");
    add(x.data(), x.size(), analytic.data(), loss, h);
  }
  double error() const { return max_diff / std::max(max_num, 1e-8); }
};

inline double fd_error(Tensor<double>& x, const Tensor<double>& analytic, const std::function<double()>& loss,
                       double h = 1e-5) {
  FdStats s;
  s.add(x, analytic, loss, h);
  return s.error();
}

// Several (tensor, gradient) pairs under one loss.
inline double fd_error(std::initializer_list<std::pair<Tensor<double>*, const Tensor<double>*>> pairs,
                       const std::function<double()>& loss) {
  FdStats s;
  for (auto [x, g] : pairs) s.add(*x, *g, loss);
  return s.error();
}

struct GradResult {
  std::string name;
  double error = 0.0;
  double tol = 0.0;
  bool ok() const { return std::isfinite(error) && error < tol; }
};

inline constexpr double kSmoothTol = 1e-6;
inline constexpr double kKinkTol = 1e-4;

// Checks a layer: gradient w.r.t. its input and every trainable parameter of
// `ps`, for the scalar loss sum(r * fwd(input)).
inline double layer_fd_error(ParamStore<double>& ps, Tensor<double>& input,
                             const std::function<Tensor<double>(const Tensor<double>&, bool)>& fwd,
                             const std::function<Tensor<double>(const Tensor<double>&)>& bwd, std::mt19937_64& rng) {
  const auto y = fwd(input, true);
  const auto r = random_tensor(y.shape(), rng);
  ps.zero_grad();
  const auto dx = bwd(r);
  auto loss = [&] { return dot(r, fwd(input, false)); };
  FdStats s;
  s.add(input, dx, loss);
  for (auto& p : ps) {
    if (p.trainable) s.add(p.value, p.grad, loss);
  }
  return s.error();
}

inline std::vector<GradResult> op_gradient_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<GradResult> out;

  {  // conv1d: input, weight, bias
    auto x = random_tensor({2, 2, 9}, rng);
    auto w = random_tensor({3, 2, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto loss_r = random_tensor({2, 3, 5}, rng);
    auto loss = [&] { return dot(loss_r, conv1d(x, w, b, 2, 1)); };
    Tensor<double> dw(w.shape()), db(b.shape());
    auto dx = *conv1d_backward(x, w, 2, 1, loss_r, dw, db);
    const double e = fd_error({{&x, &dx}, {&w, &dw}, {&b, &db}}, loss);
    out.push_back({"conv1d", e, kSmoothTol});
  }
  {  // conv2d with asymmetric stride and padding
    const Conv2dGeometry g{2, 1, 1, 1};
    auto x = random_tensor({2, 2, 5, 4}, rng);
    auto w = random_tensor({2, 2, 3, 3}, rng);
    auto b = random_tensor({2}, rng);
    auto y = conv2d(x, w, b, g);
    auto r = random_tensor(y.shape(), rng);
    auto loss = [&] { return dot(r, conv2d(x, w, b, g)); };
    Tensor<double> dw(w.shape()), db(b.shape());
    auto dx = *conv2d_backward(x, w, g, r, dw, db);
    const double e = fd_error({{&x, &dx}, {&w, &dw}, {&b, &db}}, loss);
    out.push_back({"conv2d", e, kSmoothTol});
  }
  for (Mode mode : {Mode::train, Mode::eval}) {
    auto x = random_tensor({3, 2, 2, 3}, rng);
    auto gamma = random_tensor({2}, rng, 0.5, 1.5);
    auto beta = random_tensor({2}, rng);
    Tensor<double> rm({2}, 0.1), rv({2}, 0.7);
    auto r = random_tensor(x.shape(), rng);
    auto loss = [&] {
      Tensor<double> m = rm, v = rv;
      return dot(r, batchnorm(x, gamma, beta, m, v, mode));
    };
    BatchNormCache<double> cache;
    Tensor<double> m = rm, v = rv;
    batchnorm(x, gamma, beta, m, v, mode, {}, &cache);
    Tensor<double> dg({2}), dbt({2});
    auto dx = batchnorm_backward(cache, gamma, r, dg, dbt);
    const double e = fd_error({{&x, &dx}, {&gamma, &dg}, {&beta, &dbt}}, loss);
    out.push_back({mode == Mode::train ? "batchnorm_train" : "batchnorm_eval", e, kSmoothTol});
  }
  {
    auto x = random_away_from_zero({4, 8}, rng);
    auto r = random_tensor(x.shape(), rng);
    auto dx = relu_backward(relu(x), r);
    out.push_back({"relu", fd_error(x, dx, [&] { return dot(r, relu(x)); }), kKinkTol});
  }
  {
    auto x = random_tensor({4, 8}, rng, -4.0, 4.0);
    auto r = random_tensor(x.shape(), rng);
    auto dx = sigmoid_backward(sigmoid(x), r);
    out.push_back({"sigmoid", fd_error(x, dx, [&] { return dot(r, sigmoid(x)); }), kSmoothTol});
  }
  {
    auto x = random_tensor({2, 5, 3}, rng, -2.0, 2.0);
    auto r = random_tensor(x.shape(), rng);
    auto dx = softmax_over_axis_backward(softmax_over_axis(x, 1), r, 1);
    out.push_back({"softmax_over_time", fd_error(x, dx, [&] { return dot(r, softmax_over_axis(x, 1)); }),
                   kSmoothTol});
  }
  {
    const PoolGeometry g{3, 3, 2, 2, 1, 1};
    auto x = random_distinct({2, 2, 5, 4}, rng);
    std::vector<std::size_t> arg;
    auto y = maxpool2d(x, g, &arg);
    auto r = random_tensor(y.shape(), rng);
    auto dx = maxpool_backward(x.shape(), arg, r);
    out.push_back({"maxpool2d", fd_error(x, dx, [&] { return dot(r, maxpool2d(x, g)); }), kKinkTol});
  }
  {
    auto x = random_distinct({2, 3, 8}, rng);
    std::vector<std::size_t> arg;
    auto y = maxpool1d(x, 4, 4, &arg);
    auto r = random_tensor(y.shape(), rng);
    auto dx = maxpool_backward(x.shape(), arg, r).reshaped(x.shape());
    out.push_back({"maxpool1d", fd_error(x, dx, [&] { return dot(r, maxpool1d(x, 4, 4)); }), kKinkTol});
  }
  {
    auto x = random_tensor({3, 5}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({4}, rng);
    auto r = random_tensor({3, 4}, rng);
    auto loss = [&] { return dot(r, linear(x, w, b)); };
    Tensor<double> dw(w.shape()), db(b.shape());
    auto dx = linear_backward(x, w, r, dw, db);
    const double e = fd_error({{&x, &dx}, {&w, &dw}, {&b, &db}}, loss);
    out.push_back({"linear", e, kSmoothTol});
  }
  {
    auto x = random_tensor({2, 3, 4, 2}, rng);
    auto r = random_tensor({2, 3, 2}, rng);
    auto dx = mean_over_axis_backward(x.shape(), 2, r);
    out.push_back({"mean_over_axis", fd_error(x, dx, [&] { return dot(r, mean_over_axis(x, 2)); }), kSmoothTol});
  }
  {
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 3, 4}, rng);
    auto r = random_tensor(a.shape(), rng);
    auto loss = [&] { return dot(r, add(a, b)); };
    out.push_back({"add", fd_error({{&a, &r}, {&b, &r}}, loss), kSmoothTol});
  }
  {
    auto x = random_tensor({2, 3, 1, 4}, rng);
    auto r = random_tensor({2, 1, 3, 4}, rng);
    auto dx = transpose_1ct_to_c1t(r);
    out.push_back({"transpose_c1t_to_1ct", fd_error(x, dx, [&] { return dot(r, transpose_c1t_to_1ct(x)); }),
                   kSmoothTol});
  }
  {
    auto x = random_tensor({2, 3, 4}, rng);
    auto r = random_tensor({2, 4, 3}, rng);
    auto dx = swap_last_axes(r);
    out.push_back({"swap_last_axes", fd_error(x, dx, [&] { return dot(r, swap_last_axes(x)); }), kSmoothTol});
  }
  {
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({2, 2}, rng);
    auto r = random_tensor({2, 5}, rng);
    auto [da, db] = split_features(r, 3);
    auto loss = [&] { return dot(r, concat_features(a, b)); };
    out.push_back({"concat_features", fd_error({{&a, &da}, {&b, &db}}, loss), kSmoothTol});
  }
  {
    auto t = random_tensor({3, 4}, rng, 0.05, 0.95);
    Tensor<double> y({3, 4});
    std::bernoulli_distribution coin(0.5);
    for (auto& v : y.values()) v = coin(rng) ? 1.0 : 0.0;
    y[1] = 0.45;  // fractional (ratio-label) target
    auto dt = bce_from_probability_backward(t, y);
    out.push_back({"bce_from_probability", fd_error(t, dt, [&] { return bce_from_probability(t, y); }), kSmoothTol});
  }
  {
    ParamStore<double> ps;
    layers::Initializer<double> init{std::mt19937_64(seed + 1)};
    auto m = layers::AttentionModule<double>::make(ps, "att", 4, 3, init);
    for (auto& p : ps) p.value = random_tensor(p.value.shape(), rng);
    auto frames = random_tensor({2, 3, 4}, rng);
    const double e = layer_fd_error(
        ps, frames,
        [&](const Tensor<double>& in, bool rec) { return m.forward(ps, in, {Mode::eval, rec, &ps}); },
        [&](const Tensor<double>& dy) { return m.backward(ps, dy); }, rng);
    out.push_back({"attention_module", e, kSmoothTol});
  }
  {
    ParamStore<double> ps;
    layers::Initializer<double> init{std::mt19937_64(seed + 2)};
    auto h = layers::AttentionHead<double>::make(ps, "head", 3, AttentionHeadConfig{5, 3}, init);
    for (auto& p : ps) p.value = random_tensor(p.value.shape(), rng);
    auto map = random_tensor({2, 3, 2, 3}, rng);
    const double e = layer_fd_error(
        ps, map, [&](const Tensor<double>& in, bool rec) { return h.forward(ps, in, {Mode::eval, rec, &ps}); },
        [&](const Tensor<double>& dy) { return h.backward(ps, dy); }, rng);
    out.push_back({"attention_head", e, kKinkTol});
  }
  {
    ParamStore<double> ps;
    layers::Initializer<double> init{std::mt19937_64(seed + 3)};
    auto blk = layers::ResidualBlock<double>::basic1d(ps, "blk", 2, 3, 2, init);
    auto x = random_tensor({2, 2, 1, 8}, rng);
    const double e = layer_fd_error(
        ps, x, [&](const Tensor<double>& in, bool rec) { return blk.forward(ps, in, {Mode::train, rec, &ps}); },
        [&](const Tensor<double>& dy) { return blk.backward(ps, dy); }, rng);
    out.push_back({"residual_block_1d", e, kKinkTol});
  }
  {
    ParamStore<double> ps;
    layers::Initializer<double> init{std::mt19937_64(seed + 4)};
    auto blk = layers::ResidualBlock<double>::bottleneck(ps, "blk", 2, 2, 4, 2, init);
    auto x = random_tensor({2, 2, 4, 3}, rng);
    const double e = layer_fd_error(
        ps, x, [&](const Tensor<double>& in, bool rec) { return blk.forward(ps, in, {Mode::train, rec, &ps}); },
        [&](const Tensor<double>& dy) { return blk.backward(ps, dy); }, rng);
    out.push_back({"residual_bottleneck_2d", e, kKinkTol});
  }
  return out;
}

// Tiny model for end-to-end checks: clip_len 512, three classes.
inline ModelConfig tiny_model_config() {
  ModelConfig c;
  c.clip_len = 512;
  c.frontend.width_scale = 0.125;
  c.backend.width_scale = 1.0 / 32.0;
  c.backend.blocks = {1, 1, 1, 1};
  c.head.hidden = 8;
  c.head.n_classes = 3;
  return c;
}

// Loss gradient w.r.t. `n_params` randomly chosen scalar parameters of the tiny
// model versus central differences; returns the largest relative error.
inline GradResult end_to_end_gradient(std::uint64_t seed, std::size_t n_params = 20) {
  std::mt19937_64 rng(seed);
  Model<double> model(tiny_model_config(), seed);
  const std::size_t B = 2, N = model.config().head.n_classes;
  auto x = random_tensor({B, 1, model.config().clip_len}, rng);
  Tensor<double> y({B, N});
  y[0] = 1.0;
  y[N + 1] = 1.0;
  y[N + 2] = 1.0;

  auto& ps = model.params();
  ps.zero_grad();
  auto loss = multi_level_loss(model.forward(x, Mode::train), y);
  model.backward(loss.dp2, loss.dp3, loss.dp4);

  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].trainable) trainable.push_back(i);
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < n_params; ++k) {
    const std::size_t pi = trainable[std::uniform_int_distribution<std::size_t>(0, trainable.size() - 1)(rng)];
    const std::size_t ei = std::uniform_int_distribution<std::size_t>(0, ps[pi].value.size() - 1)(rng);
    const double analytic = ps[pi].grad[ei];
    double& v = ps[pi].value[ei];
    const double keep = v, h = 1e-6;
    v = keep + h;
    const double lp = multi_level_loss(model.forward(x, Mode::train), y).loss;
    v = keep - h;
    const double lm = multi_level_loss(model.forward(x, Mode::train), y).loss;
    v = keep;
    const double num = (lp - lm) / (2.0 * h);
    const double rel = std::abs(num - analytic) / std::max({std::abs(num), std::abs(analytic), 1e-6});
    worst = std::max(worst, rel);
  }
  return {"end_to_end_tiny_model", worst, 1e-3};
}

// ---------------------------------------------------------------------------
// Metric oracles.

// Rank enumeration: position of i is one plus the number of items ahead of it
// (higher score, or equal score and lower index).
inline std::optional<double> brute_average_precision(const std::vector<double>& s, const std::vector<std::uint8_t>& t) {
  const std::size_t n = s.size();
  double sum = 0.0;
  std::size_t P = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!t[i]) continue;
    ++P;
    std::size_t rank = 1, pos_at_or_above = 1;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const bool ahead = s[j] > s[i] || (s[j] == s[i] && j < i);
      if (ahead) {
        ++rank;
        if (t[j]) ++pos_at_or_above;
      }
    }
    sum += static_cast<double>(pos_at_or_above) / static_cast<double>(rank);
  }
  if (P == 0) return std::nullopt;
  return sum / static_cast<double>(P);
}

inline std::optional<double> brute_auc(const std::vector<double>& s, const std::vector<std::uint8_t>& t) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!t[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (t[j]) continue;
      ++pairs;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  if (pairs == 0) return std::nullopt;
  return wins / static_cast<double>(pairs);
}

// Random column for the AP/AUC oracles: up to 50 rows, some tied scores, and
// occasionally no positives or no negatives.
struct MetricInstance {
  std::vector<double> scores;
  std::vector<std::uint8_t> targets;
};

inline MetricInstance random_metric_instance(std::mt19937_64& rng, std::size_t rows = 0) {
  std::uniform_int_distribution<std::size_t> len(1, 50);
  std::uniform_int_distribution<int> levels(2, 12);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MetricInstance m;
  const std::size_t n = rows ? rows : len(rng);
  const bool quantize = u(rng) < 0.5;
  const double p_pos = u(rng);
  const int q = levels(rng);
  for (std::size_t i = 0; i < n; ++i) {
    double s = u(rng);
    if (quantize) s = std::floor(s * q) / q;
    m.scores.push_back(s);
    m.targets.push_back(u(rng) < p_pos ? 1 : 0);
  }
  return m;
}

// Largest |fast - oracle| over n random score matrices (B <= 50, N <= 8),
// compared column by column. An undefined value on one side only counts as
// infinite error.
struct OracleGap {
  double ap = 0.0;
  double auc = 0.0;
  std::size_t defined_ap = 0, defined_auc = 0, columns = 0;
};

inline OracleGap metric_oracle_gap(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> rows(1, 50), cols(1, 8);
  OracleGap g;
  auto gap = [](std::optional<double> a, std::optional<double> b) {
    if (a.has_value() != b.has_value()) return std::numeric_limits<double>::infinity();
    return a ? std::abs(*a - *b) : 0.0;
  };
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t B = rows(rng), N = cols(rng);
    for (std::size_t c = 0; c < N; ++c) {
      const auto m = random_metric_instance(rng, B);
      const auto ap = average_precision(m.scores, m.targets);
      const auto auc = roc_auc(m.scores, m.targets);
      g.ap = std::max(g.ap, gap(ap, brute_average_precision(m.scores, m.targets)));
      g.auc = std::max(g.auc, gap(auc, brute_auc(m.scores, m.targets)));
      g.defined_ap += ap.has_value();
      g.defined_auc += auc.has_value();
      ++g.columns;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Mixing algebra properties: counts of violating cases out of n each.

inline MultiHotLabel random_label(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution bit(0.3);
  MultiHotLabel y{std::vector<std::uint8_t>(n)};
  for (auto& b : y.bits) b = bit(rng) ? 1 : 0;
  return y;
}

struct MixingViolations {
  std::size_t commutative = 0, associative = 0, idempotent = 0, popcount = 0, convexity = 0, swap = 0;
  std::size_t total() const { return commutative + associative + idempotent + popcount + convexity + swap; }
};

inline MixingViolations mixing_properties(std::uint64_t seed, std::size_t n) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> classes(1, 40), len(1, 300);
  std::uniform_real_distribution<double> alpha(1e-6, 1.0 - 1e-6), amp(-1.0, 1.0);
  MixingViolations v;
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t N = classes(rng);
    const auto a = random_label(N, rng), b = random_label(N, rng), c = random_label(N, rng);
    const auto ab = mix_labels(a, b);
    if (ab != mix_labels(b, a)) ++v.commutative;
    if (mix_labels(ab, c) != mix_labels(a, mix_labels(b, c))) ++v.associative;
    if (mix_labels(a, a) != a) ++v.idempotent;
    const std::size_t lo = std::max(a.popcount(), b.popcount()), hi = a.popcount() + b.popcount();
    if (ab.popcount() < lo || ab.popcount() > hi) ++v.popcount;

    const std::size_t L = len(rng);
    Waveform x{std::vector<float>(L), 16000}, y{std::vector<float>(L), 16000};
    for (std::size_t t = 0; t < L; ++t) {
      x.samples[t] = static_cast<float>(amp(rng));
      y.samples[t] = static_cast<float>(amp(rng));
    }
    const double al = alpha(rng);
    const auto m = mix_waveforms(x, y, al);
    const auto s = mix_waveforms(y, x, 1.0 - al);
    bool convex_ok = true, swap_ok = true;
    for (std::size_t t = 0; t < L; ++t) {
      if (std::abs(m.samples[t]) > std::max(std::abs(x.samples[t]), std::abs(y.samples[t]))) convex_ok = false;
      if (std::abs(m.samples[t] - s.samples[t]) > 1e-6f) swap_ok = false;
    }
    if (!convex_ok) ++v.convexity;
    if (!swap_ok) ++v.swap;
  }
  return v;
}

}  // namespace wt_test

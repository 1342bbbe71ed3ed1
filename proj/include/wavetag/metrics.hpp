#pragma once

// Ranking metrics for multi-label tagging: per-class average precision and
// ROC AUC, their macro means, and d-prime.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wavetag/dataset.hpp"
#include "wavetag/json_util.hpp"
#include "wavetag/model.hpp"

namespace wavetag {

// Non-interpolated AP. Ties in score keep the original index order.
// Returns nullopt when there are no positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> truth) {
  if (scores.size() != truth.size()) throw ShapeError("average_precision: scores and truth differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (truth[order[r]]) {
      ++hits;
      sum += static_cast<double>(hits) / static_cast<double>(r + 1);
    }
  }
  if (hits == 0) return std::nullopt;
  return sum / static_cast<double>(hits);
}

// Probability that a random positive outscores a random negative, ties
// counting one half. Returns nullopt unless both outcomes are present.
inline std::optional<double> roc_auc(std::span<const double> scores, std::span<const std::uint8_t> truth) {
  if (scores.size() != truth.size()) throw ShapeError("roc_auc: scores and truth differ in length");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double wins = 0.0;
  std::size_t neg_below = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i, p = 0, q = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (truth[order[j]] ? p : q) += 1;
      ++j;
    }
    wins += static_cast<double>(p) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(q));
    neg_below += q;
    pos += p;
    neg += q;
    i = j;
  }
  if (pos == 0 || neg == 0) return std::nullopt;
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

// Standard normal quantile: Acklam's rational approximation followed by one
// Halley step against erfc, which brings it to near double precision.
inline double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) throw ConfigError("normal_quantile: p must lie in (0,1), got " + std::to_string(p));
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                 1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                 6.680131188771972e+01,  -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                 -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = 0.5 * std::erfc(-x / std::sqrt(2.0)) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
  return x - u / (1.0 + x * u / 2.0);
}

inline double d_prime(double auc) {
  if (!(auc > 0.0 && auc < 1.0)) throw ConfigError("d_prime: AUC must lie in (0,1), got " + std::to_string(auc));
  return std::sqrt(2.0) * normal_quantile(auc);
}

struct ClassMetrics {
  std::string name;
  std::optional<double> ap;
  std::optional<double> auc;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double mAP = 0.0;
  double AUC = 0.0;
  std::optional<double> d_prime;  // undefined when the macro AUC is exactly 0 or 1
  std::size_t evaluated_classes = 0;
  std::vector<std::string> skipped;
};

// Scores [B, N] against binary truth [B, N]; columns are named by `names`.
inline MetricsReport score_matrix(const Tensor<double>& scores, const std::vector<MultiHotLabel>& truth,
                                  const std::vector<std::string>& names) {
  require_rank(scores.shape(), 2, "score_matrix");
  const std::size_t B = scores.dim(0), N = scores.dim(1);
  if (B == 0) throw ConfigError("evaluation set is empty");
  if (truth.size() != B || names.size() != N) throw ShapeError("score_matrix: truth or names do not match scores");
  MetricsReport rep;
  double ap_sum = 0.0, auc_sum = 0.0;
  std::size_t ap_n = 0, auc_n = 0;
  std::vector<double> col(B);
  std::vector<std::uint8_t> t(B);
  for (std::size_t c = 0; c < N; ++c) {
    for (std::size_t b = 0; b < B; ++b) {
      if (truth[b].bits.size() != N) throw ShapeError("score_matrix: label width does not match scores");
      col[b] = scores[b * N + c];
      t[b] = truth[b].bits[c];
    }
    ClassMetrics m{names[c], average_precision(col, t), roc_auc(col, t)};
    if (m.ap) {
      ap_sum += *m.ap;
      ++ap_n;
    }
    if (m.auc) {
      auc_sum += *m.auc;
      ++auc_n;
    }
    if (!m.ap || !m.auc) rep.skipped.push_back(names[c]);
    rep.per_class.push_back(std::move(m));
  }
  if (ap_n == 0 || auc_n == 0) throw ConfigError("evaluation set has no class with both outcomes");
  rep.mAP = ap_sum / static_cast<double>(ap_n);
  rep.AUC = auc_sum / static_cast<double>(auc_n);
  rep.evaluated_classes = auc_n;
  if (rep.AUC > 0.0 && rep.AUC < 1.0) rep.d_prime = d_prime(rep.AUC);
  return rep;
}

inline Json to_json(const MetricsReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  Json j;
  j["mAP"] = r.mAP;
  j["AUC"] = r.AUC;
  j["d_prime"] = opt(r.d_prime);
  j["evaluated_classes"] = r.evaluated_classes;
  j["skipped"] = r.skipped;
  Json pc = Json::array();
  for (const auto& c : r.per_class) pc.push_back({{"name", c.name}, {"AP", opt(c.ap)}, {"AUC", opt(c.auc)}});
  j["per_class"] = std::move(pc);
  return j;
}

// Fused predictions of `model` for every clip, as a [B, N] matrix.
template <typename T>
Tensor<double> predict_scores(const Model<T>& model, const std::vector<Waveform>& clips, std::size_t batch_size = 16) {
  const auto& cfg = model.config();
  const std::size_t N = cfg.head.n_classes, L = cfg.clip_len;
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  Tensor<double> out({clips.size(), N});
  for (std::size_t start = 0; start < clips.size(); start += batch_size) {
    const std::size_t nb = std::min(batch_size, clips.size() - start);
    Tensor<T> x({nb, 1, L});
    for (std::size_t b = 0; b < nb; ++b) {
      const auto& s = clips[start + b].samples;
      if (s.size() != L) throw ShapeError("clip length does not match the model's clip_len");
      std::copy(s.begin(), s.end(), x.data() + b * L);
    }
    const auto p = model.predict(x);
    for (std::size_t i = 0; i < nb * N; ++i) out[start * N + i] = static_cast<double>(p.fused[i]);
  }
  return out;
}

template <typename T>
MetricsReport evaluate(const Model<T>& model, const ClipSet& set, const LabelVocabulary& vocab,
                       std::size_t batch_size = 16) {
  if (set.records.empty()) throw ConfigError("evaluation set is empty");
  if (vocab.size() != model.config().head.n_classes) {
    throw ConfigError("vocabulary has " + std::to_string(vocab.size()) + " classes, model expects " +
                      std::to_string(model.config().head.n_classes));
  }
  std::vector<MultiHotLabel> truth;
  for (const auto& r : set.records) truth.push_back(r.label);
  return score_matrix(predict_scores(model, set.waveforms, batch_size), truth, vocab.names());
}

}  // namespace wavetag

#pragma once

// Greedy matching of predictions to ground truth, and precision-recall curves.

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <span>
#include <utility>
#include <vector>

#include "raymap/domain.hpp"

namespace raymap {

struct Prediction {
  Vec2 position = Vec2::Zero();
  double existence = 0.0;
};

struct MatchResult {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pairing;  // (prediction, truth)
};

struct PrPoint {
  double threshold = 0.0;
  double precision = 1.0;
  double recall = 0.0;
};

struct PrCurve {
  std::vector<PrPoint> points;
  double auc = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;  // at the default threshold
  bool recall_undefined = false;       // empty truth
};

namespace detail {

inline bool lex_less(const Vec2& a, const Vec2& b) {
  return a[0] != b[0] ? a[0] < b[0] : a[1] < b[1];
}

}  // namespace detail

/// Predictions are taken by existence descending; each claims the nearest unmatched truth
/// within `radius`. Ties break by distance, then by lexicographic position.
inline MatchResult match(std::span<const Prediction> predictions, std::span<const Vec2> truth, double radius) {
  if (!(radius > 0.0)) throw InvariantError("match: radius must be positive");
  std::vector<std::size_t> order(predictions.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (predictions[a].existence != predictions[b].existence) {
      return predictions[a].existence > predictions[b].existence;
    }
    if (predictions[a].position != predictions[b].position) {
      return detail::lex_less(predictions[a].position, predictions[b].position);
    }
    return a < b;
  });
  MatchResult out;
  std::vector<char> taken(truth.size(), 0);
  for (std::size_t p : order) {
    std::size_t best = truth.size();
    double best_d = radius;
    for (std::size_t t = 0; t < truth.size(); ++t) {
      if (taken[t]) continue;
      const double d = (predictions[p].position - truth[t]).norm();
      if (d > radius) continue;
      if (best == truth.size() || d < best_d || (d == best_d && detail::lex_less(truth[t], truth[best]))) {
        best = t;
        best_d = d;
      }
    }
    if (best == truth.size()) {
      ++out.fp;
    } else {
      taken[best] = 1;
      ++out.tp;
      out.pairing.emplace_back(p, best);
    }
  }
  out.fn = truth.size() - out.tp;
  return out;
}

inline std::vector<Prediction> above(std::span<const Prediction> predictions, double threshold) {
  std::vector<Prediction> out;
  for (const auto& p : predictions) {
    if (p.existence >= threshold) out.push_back(p);
  }
  return out;
}

/// Sweeps strictly descending thresholds; auc = sum_k (R_k - R_{k-1}) P_k with R_0 = 0.
inline PrCurve pr_curve(std::span<const Prediction> predictions, std::span<const Vec2> truth, double radius,
                        std::span<const double> thresholds, double default_threshold = 0.5) {
  for (std::size_t k = 1; k < thresholds.size(); ++k) {
    if (!(thresholds[k] < thresholds[k - 1])) throw InvariantError("pr_curve: thresholds must strictly descend");
  }
  PrCurve curve;
  curve.recall_undefined = truth.empty();
  double prev_recall = 0.0;
  for (double th : thresholds) {
    const auto kept = above(predictions, th);
    const auto m = match(kept, truth, radius);
    PrPoint pt;
    pt.threshold = th;
    pt.precision = kept.empty() ? 1.0 : static_cast<double>(m.tp) / static_cast<double>(kept.size());
    pt.recall = truth.empty() ? 0.0 : static_cast<double>(m.tp) / static_cast<double>(truth.size());
    curve.auc += (pt.recall - prev_recall) * pt.precision;
    prev_recall = pt.recall;
    curve.points.push_back(pt);
  }
  const auto m = match(above(predictions, default_threshold), truth, radius);
  curve.tp = m.tp;
  curve.fp = m.fp;
  curve.fn = m.fn;
  return curve;
}

/// The distinct existence scores, descending: the sweep that traces the full curve.
inline std::vector<double> score_thresholds(std::span<const Prediction> predictions) {
  std::vector<double> out;
  for (const auto& p : predictions) out.push_back(p.existence);
  std::sort(out.begin(), out.end(), std::greater<>());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

inline PrCurve pr_curve(std::span<const Prediction> predictions, std::span<const Vec2> truth, double radius,
                        double default_threshold = 0.5) {
  const auto th = score_thresholds(predictions);
  return pr_curve(predictions, truth, radius, th, default_threshold);
}

inline double precision_of(const PrCurve& c) {
  return c.tp + c.fp == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}

inline double recall_of(const PrCurve& c) {
  return c.tp + c.fn == 0 ? 0.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline void write_metrics_header(std::ostream& os) { os << "class,threshold,precision,recall,auc\n"; }

inline void write_metrics_rows(std::ostream& os, int class_id, const PrCurve& curve) {
  const auto old = os.precision(17);
  for (const auto& p : curve.points) {
    os << class_id << ',' << p.threshold << ',' << p.precision << ',' << p.recall << ',' << curve.auc << '\n';
  }
  os.precision(old);
}

}  // namespace raymap

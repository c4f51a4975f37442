#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dualcba/errors.hpp"

namespace dcba {

/// a(i, j): accuracy on task i after training task j (j >= i), plus the
/// running average-accuracy trace sampled every `interval` steps.
class AccuracyMatrix {
 public:
  struct TracePoint {
    long step;
    double average;
  };

  explicit AccuracyMatrix(std::size_t tasks = 0, long interval = 5)
      : tasks_(tasks), interval_(interval), cells_(tasks * tasks) {}

  std::size_t tasks() const noexcept { return tasks_; }
  long interval() const noexcept { return interval_; }

  void set(std::size_t i, std::size_t j, double acc) {
    if (i >= tasks_ || j >= tasks_) throw IndexError("accuracy matrix: task index out of range");
    if (j < i) throw IndexError("accuracy matrix: a(i, j) is only defined for j >= i");
    if (!(acc >= 0.0 && acc <= 1.0)) throw NumericError("accuracy matrix: accuracy outside [0, 1]");
    cells_[i * tasks_ + j] = acc;
  }

  std::optional<double> get(std::size_t i, std::size_t j) const {
    if (i >= tasks_ || j >= tasks_) return std::nullopt;
    return cells_[i * tasks_ + j];
  }

  double at(std::size_t i, std::size_t j) const {
    auto v = get(i, j);
    if (!v) throw StateError("accuracy matrix: a(" + std::to_string(i) + ", " + std::to_string(j) + ") missing");
    return *v;
  }

  void push_trace(long step, double average) {
    if (!trace_.empty() && step != trace_.back().step + interval_) {
      throw StateError("accuracy trace: steps must advance by the evaluation interval");
    }
    trace_.push_back({step, average});
  }

  const std::vector<TracePoint>& trace() const noexcept { return trace_; }

 private:
  std::size_t tasks_;
  long interval_;
  std::vector<std::optional<double>> cells_;
  std::vector<TracePoint> trace_;
};

/// Final average accuracy (1/T) sum_t a(t, T).
inline double acc(const AccuracyMatrix& m) {
  if (m.tasks() == 0) throw StateError("acc: empty matrix");
  const std::size_t T = m.tasks();
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t) s += m.at(t, T - 1);
  return s / static_cast<double>(T);
}

/// Forgetting (1/T) sum_t (max_{j>=t} a(t, j) - a(t, T)); the max includes
/// the diagonal.
inline double fm(const AccuracyMatrix& m) {
  if (m.tasks() == 0) throw StateError("fm: empty matrix");
  const std::size_t T = m.tasks();
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    double best = m.at(t, t);
    for (std::size_t j = t; j < T; ++j) best = std::max(best, m.at(t, j));
    s += best - m.at(t, T - 1);
  }
  return s / static_cast<double>(T);
}

/// Rectangle-rule area under the average-accuracy trace: sum_i a_bar_i * dn.
inline double acc_auc(const AccuracyMatrix& m) {
  if (m.trace().empty()) throw StateError("acc_auc: empty trace");
  double s = 0.0;
  for (const auto& p : m.trace()) s += p.average * static_cast<double>(m.interval());
  return s;
}

}  // namespace dcba

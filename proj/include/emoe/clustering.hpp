// Copyright 2026 The EMoE Toolkit Authors
// SPDX-License-Identifier: Apache-2.0
//
// Balanced grouping of FFN neurons into equally sized experts.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "emoe/error.hpp"
#include "emoe/ffn.hpp"
#include "emoe/numerics.hpp"

namespace emoe {

/// Assignment of d neurons to N experts of exactly d/N neurons each.
class Partition {
 public:
  Partition() = default;

  Partition(std::vector<std::uint32_t> assignment, std::size_t n_experts)
      : assignment_(std::move(assignment)), n_experts_(n_experts) {
    validate();
  }

  std::size_t d() const noexcept { return assignment_.size(); }
  std::size_t n_experts() const noexcept { return n_experts_; }
  std::size_t expert_size() const noexcept { return n_experts_ == 0 ? 0 : d() / n_experts_; }
  std::span<const std::uint32_t> assignment() const noexcept { return assignment_; }
  std::uint32_t expert_of(std::size_t neuron) const { return assignment_.at(neuron); }

  /// Neuron indices of one expert, ascending.
  std::vector<std::size_t> members(std::size_t expert) const {
    std::vector<std::size_t> out;
    out.reserve(expert_size());
    for (std::size_t j = 0; j < assignment_.size(); ++j) {
      if (assignment_[j] == expert) out.push_back(j);
    }
    return out;
  }

  std::vector<std::vector<std::size_t>> groups() const {
    std::vector<std::vector<std::size_t>> out(n_experts_);
    for (std::size_t j = 0; j < assignment_.size(); ++j) out[assignment_[j]].push_back(j);
    return out;
  }

  friend bool operator==(const Partition&, const Partition&) = default;

 private:
  void validate() const {
    if (n_experts_ == 0) throw ArgumentError("partition: zero experts");
    if (n_experts_ > assignment_.size()) {
      throw ArgumentError("partition: " + std::to_string(n_experts_) + " experts for " +
                          std::to_string(assignment_.size()) + " neurons");
    }
    if (assignment_.size() % n_experts_ != 0) {
      throw ConstraintError("partition: d=" + std::to_string(assignment_.size()) +
                            " not divisible by N=" + std::to_string(n_experts_));
    }
    std::vector<std::size_t> counts(n_experts_, 0);
    for (auto id : assignment_) {
      if (id >= n_experts_) {
        throw ConstraintError("partition: expert id " + std::to_string(id) + " out of range");
      }
      ++counts[id];
    }
    const std::size_t want = assignment_.size() / n_experts_;
    for (std::size_t i = 0; i < counts.size(); ++i) {
      if (counts[i] != want) {
        throw ConstraintError("partition: expert " + std::to_string(i) + " has " +
                              std::to_string(counts[i]) + " neurons, expected " +
                              std::to_string(want));
      }
    }
  }

  std::vector<std::uint32_t> assignment_;
  std::size_t n_experts_ = 0;
};

struct ClusteringReport {
  std::size_t iterations = 0;
  std::vector<double> objective_per_iteration;
  bool converged = false;
  std::size_t restart = 0;  // which restart produced the returned partition
};

struct ClusteringOptions {
  std::size_t max_iter = 100;
  std::size_t restarts = 3;
};

struct ClusteringResult {
  Partition partition;
  ClusteringReport report;
};

/// Key vectors of a layer as the rows of a d x h matrix.
template <Real T>
Matrix<double> key_points(const FfnLayer<T>& layer) {
  return layer.keys().template cast<double>().transposed();
}

namespace detail {

inline void check_sizes(std::size_t d, std::size_t n_experts) {
  if (n_experts == 0) throw ArgumentError("clustering: zero experts");
  if (n_experts > d) {
    throw ArgumentError("clustering: N=" + std::to_string(n_experts) + " exceeds d=" +
                        std::to_string(d));
  }
  if (d % n_experts != 0) {
    throw ConstraintError("clustering: d=" + std::to_string(d) + " not divisible by N=" +
                          std::to_string(n_experts));
  }
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

inline Matrix<double> cluster_means(const Matrix<double>& points,
                                    std::span<const std::uint32_t> assignment,
                                    std::size_t n_experts) {
  Matrix<double> means(n_experts, points.cols());
  std::vector<std::size_t> counts(n_experts, 0);
  for (std::size_t p = 0; p < points.rows(); ++p) {
    auto m = means.row(assignment[p]);
    const auto x = points.row(p);
    for (std::size_t c = 0; c < x.size(); ++c) m[c] += x[c];
    ++counts[assignment[p]];
  }
  for (std::size_t i = 0; i < n_experts; ++i) {
    if (counts[i] == 0) continue;
    for (auto& v : means.row(i)) v /= static_cast<double>(counts[i]);
  }
  return means;
}

inline double assignment_cost(const Matrix<double>& points,
                              std::span<const std::uint32_t> assignment,
                              const Matrix<double>& centroids) {
  double cost = 0.0;
  for (std::size_t p = 0; p < points.rows(); ++p) {
    cost += squared_distance(points.row(p), centroids.row(assignment[p]));
  }
  return cost;
}

/// k-means++ seeding: first centroid uniform, each next one drawn with
/// probability proportional to the squared distance to the nearest chosen
/// centroid.
inline Matrix<double> seed_centroids(const Matrix<double>& points, std::size_t n_experts,
                                     Rng& rng) {
  const std::size_t d = points.rows();
  Matrix<double> centroids(n_experts, points.cols());
  std::vector<bool> chosen(d, false);
  std::vector<double> nearest(d, std::numeric_limits<double>::infinity());

  std::size_t pick = rng.uniform_index(d);
  for (std::size_t c = 0; c < n_experts; ++c) {
    chosen[pick] = true;
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
    if (c + 1 == n_experts) break;

    double total = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      nearest[p] = std::min(nearest[p], squared_distance(points.row(p), centroids.row(c)));
      if (!chosen[p]) total += nearest[p];
    }
    if (total <= 0.0) {
      // Every remaining point coincides with a centroid.
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) -
                                      chosen.begin());
      continue;
    }
    double target = rng.uniform() * total;
    pick = d;
    std::size_t last_candidate = d;
    for (std::size_t p = 0; p < d; ++p) {
      if (chosen[p] || nearest[p] <= 0.0) continue;
      last_candidate = p;
      target -= nearest[p];
      if (target < 0.0) {
        pick = p;
        break;
      }
    }
    if (pick == d) pick = last_candidate;
  }
  return centroids;
}

/// Capacity-constrained nearest-centroid assignment: all (point, centroid)
/// pairs are visited by ascending distance (ties: lower point, then lower
/// centroid) and a point is taken by the first centroid that still has room.
inline std::vector<std::uint32_t> greedy_balanced_assign(const Matrix<double>& points,
                                                         const Matrix<double>& centroids) {
  const std::size_t d = points.rows();
  const std::size_t n = centroids.rows();
  const std::size_t capacity = d / n;

  std::vector<std::tuple<double, std::uint32_t, std::uint32_t>> pairs;
  pairs.reserve(d * n);
  for (std::size_t p = 0; p < d; ++p) {
    for (std::size_t c = 0; c < n; ++c) {
      pairs.emplace_back(squared_distance(points.row(p), centroids.row(c)),
                         static_cast<std::uint32_t>(p), static_cast<std::uint32_t>(c));
    }
  }
  std::sort(pairs.begin(), pairs.end());

  constexpr auto kUnassigned = std::numeric_limits<std::uint32_t>::max();
  std::vector<std::uint32_t> assignment(d, kUnassigned);
  std::vector<std::size_t> load(n, 0);
  std::size_t remaining = d;
  for (const auto& [dist, p, c] : pairs) {
    if (assignment[p] != kUnassigned || load[c] == capacity) continue;
    assignment[p] = c;
    ++load[c];
    if (--remaining == 0) break;
  }
  return assignment;
}

/// Pairwise exchange refinement of a balanced assignment under fixed
/// centroids: swap two points between clusters whenever that lowers the
/// total distance. Sizes are preserved; scan order is ascending (p, q).
inline void refine_by_swaps(const Matrix<double>& points, const Matrix<double>& centroids,
                            std::vector<std::uint32_t>& assignment, std::size_t max_passes = 50) {
  const std::size_t d = points.rows();
  const std::size_t n = centroids.rows();
  if (n < 2) return;
  Matrix<double> dist(d, n);
  for (std::size_t p = 0; p < d; ++p)
    for (std::size_t c = 0; c < n; ++c) dist(p, c) = squared_distance(points.row(p), centroids.row(c));

  constexpr double kMinGain = 1e-12;
  for (std::size_t pass = 0; pass < max_passes; ++pass) {
    bool improved = false;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const auto cp = assignment[p];
        const auto cq = assignment[q];
        if (cp == cq) continue;
        const double gain = dist(p, cp) + dist(q, cq) - dist(p, cq) - dist(q, cp);
        if (gain > kMinGain) {
          std::swap(assignment[p], assignment[q]);
          improved = true;
        }
      }
    }
    if (!improved) break;
  }
}

inline ClusteringResult kmeans_single_run(const Matrix<double>& points, std::size_t n_experts,
                                          std::uint64_t seed, std::size_t max_iter) {
  Rng rng(seed);
  Matrix<double> centroids = seed_centroids(points, n_experts, rng);
  ClusteringReport report;
  std::vector<std::uint32_t> assignment;

  for (std::size_t iter = 0; iter < max_iter; ++iter) {
    auto next = greedy_balanced_assign(points, centroids);
    refine_by_swaps(points, centroids, next);
    report.iterations = iter + 1;
    if (!assignment.empty()) {
      bool unchanged = next == assignment;
      // Greedy assignment is not optimal, so it can be worse than keeping the
      // previous one under the new centroids. Keeping the old assignment
      // makes the objective sequence non-increasing.
      if (!unchanged && assignment_cost(points, next, centroids) >=
                            assignment_cost(points, assignment, centroids)) {
        unchanged = true;
      }
      if (unchanged) {
        report.converged = true;
        report.objective_per_iteration.push_back(report.objective_per_iteration.back());
        break;
      }
    }
    assignment = std::move(next);
    centroids = cluster_means(points, assignment, n_experts);
    report.objective_per_iteration.push_back(assignment_cost(points, assignment, centroids));
  }
  return {Partition(std::move(assignment), n_experts), std::move(report)};
}

}  // namespace detail

/// Sum over experts of squared distances from each member point to its
/// expert mean. `points` holds one point per row.
inline double partition_objective(const Matrix<double>& points, const Partition& partition) {
  if (partition.d() != points.rows()) {
    throw ConstraintError("partition covers " + std::to_string(partition.d()) +
                          " points, have " + std::to_string(points.rows()));
  }
  const auto means = detail::cluster_means(points, partition.assignment(), partition.n_experts());
  return detail::assignment_cost(points, partition.assignment(), means);
}

/// Balanced k-means over the rows of `points`. Each restart uses its own
/// derived seed; the lowest final objective wins (earliest restart on ties).
inline ClusteringResult balanced_kmeans(const Matrix<double>& points, std::size_t n_experts,
                                        std::uint64_t seed, ClusteringOptions options = {}) {
  detail::check_sizes(points.rows(), n_experts);
  if (options.max_iter < 1) throw ArgumentError("clustering: max_iter must be >= 1");
  if (options.restarts < 1) throw ArgumentError("clustering: restarts must be >= 1");
  if (!points.all_finite()) throw ArgumentError("clustering: non-finite key vector");

  std::optional<ClusteringResult> best;
  for (std::size_t r = 0; r < options.restarts; ++r) {
    auto run = detail::kmeans_single_run(points, n_experts, derive_seed(seed, r),
                                         options.max_iter);
    run.report.restart = r;
    if (!best || run.report.objective_per_iteration.back() <
                     best->report.objective_per_iteration.back()) {
      best = std::move(run);
    }
  }
  return std::move(*best);
}

template <Real T>
ClusteringResult cluster_keys(const FfnLayer<T>& layer, std::size_t n_experts,
                              std::uint64_t seed, ClusteringOptions options = {}) {
  return balanced_kmeans(key_points(layer), n_experts, seed, options);
}

/// Uniformly random balanced partition (Fisher-Yates over neuron indices).
inline Partition random_partition(std::size_t d, std::size_t n_experts, std::uint64_t seed) {
  detail::check_sizes(d, n_experts);
  std::vector<std::uint32_t> order(d);
  std::iota(order.begin(), order.end(), 0u);
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  const std::size_t size = d / n_experts;
  std::vector<std::uint32_t> assignment(d);
  for (std::size_t i = 0; i < d; ++i) {
    assignment[order[i]] = static_cast<std::uint32_t>(i / size);
  }
  return Partition(std::move(assignment), n_experts);
}

}  // namespace emoe

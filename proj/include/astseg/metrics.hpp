#pragma once

// Segmentation evaluation: mIoU under optimal one-to-one segment matching,
// adjusted Rand index restricted to ground-truth foreground, pixel-weighted
// mean segmentation covering over foreground regions, and reconstruction MSE
// reported on the 0-255 scale.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "astseg/common.hpp"

namespace astseg {

namespace detail {

// Exact min-cost assignment (Hungarian with potentials) on a square matrix.
// Returns row -> column.
inline std::vector<int> hungarian_min(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n + 1), 0.0), v(static_cast<size_t>(n + 1), 0.0);
  std::vector<int> p(static_cast<size_t>(n + 1), 0), way(static_cast<size_t>(n + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(n + 1), inf);
    std::vector<char> used(static_cast<size_t>(n + 1), 0);
    do {
      used[static_cast<size_t>(j0)] = 1;
      const int i0 = p[static_cast<size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        const double cur = cost[static_cast<size_t>(i0 - 1)][static_cast<size_t>(j - 1)] -
                           u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<size_t>(j)] > 0)
      row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

struct LabelStats {
  std::vector<int> labels;              // distinct labels present
  std::vector<int64_t> counts;          // pixel count per label
  std::map<std::pair<int, int>, int64_t> joint;  // (index_a, index_b) -> count
};

inline std::vector<int> present_labels(const std::vector<uint8_t>& m) {
  std::vector<int64_t> cnt(256, 0);
  for (uint8_t v : m) ++cnt[v];
  std::vector<int> out;
  for (int l = 0; l < 256; ++l)
    if (cnt[static_cast<size_t>(l)] > 0) out.push_back(l);
  return out;
}

}  // namespace detail

// Maximum-total-score one-to-one assignment; returns for each row the
// matched column or -1. Rectangular inputs are padded internally.
inline std::vector<int> max_assignment(const std::vector<std::vector<double>>& score) {
  const int n = static_cast<int>(score.size());
  if (n == 0) return {};
  const int m = static_cast<int>(score[0].size());
  const int t = std::max(n, m);
  std::vector<std::vector<double>> cost(static_cast<size_t>(t),
                                        std::vector<double>(static_cast<size_t>(t), 0.0));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) cost[static_cast<size_t>(i)][static_cast<size_t>(j)] = -score[static_cast<size_t>(i)][static_cast<size_t>(j)];
  auto assign = detail::hungarian_min(cost);
  std::vector<int> out(static_cast<size_t>(n), -1);
  for (int i = 0; i < n; ++i)
    if (assign[static_cast<size_t>(i)] < m) out[static_cast<size_t>(i)] = assign[static_cast<size_t>(i)];
  return out;
}

// mIoU: optimal one-to-one matching between predicted segments and
// ground-truth segments (both including their background segment when
// present), maximizing summed IoU; the mean is taken over ground-truth
// segments, unmatched ones contributing zero.
inline double miou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check(pred.size() == gt.size() && !gt.empty(), "miou: shape mismatch");
  const auto gl = detail::present_labels(gt);
  const auto pl = detail::present_labels(pred);
  std::vector<int64_t> gcount(gl.size(), 0), pcount(pl.size(), 0);
  std::vector<std::vector<int64_t>> joint(gl.size(), std::vector<int64_t>(pl.size(), 0));
  auto gindex = [&](int l) {
    return static_cast<size_t>(std::lower_bound(gl.begin(), gl.end(), l) - gl.begin());
  };
  auto pindex = [&](int l) {
    return static_cast<size_t>(std::lower_bound(pl.begin(), pl.end(), l) - pl.begin());
  };
  for (size_t i = 0; i < gt.size(); ++i) {
    const size_t gi = gindex(gt[i]);
    const size_t pi = pindex(pred[i]);
    ++gcount[gi];
    ++pcount[pi];
    ++joint[gi][pi];
  }
  std::vector<std::vector<double>> iou(gl.size(), std::vector<double>(pl.size(), 0.0));
  for (size_t g = 0; g < gl.size(); ++g)
    for (size_t p = 0; p < pl.size(); ++p) {
      const int64_t inter = joint[g][p];
      const int64_t uni = gcount[g] + pcount[p] - inter;
      iou[g][p] = uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    }
  const auto match = max_assignment(iou);
  double total = 0.0;
  for (size_t g = 0; g < gl.size(); ++g)
    if (match[g] >= 0) total += iou[g][static_cast<size_t>(match[g])];
  return total / static_cast<double>(gl.size());
}

// Adjusted Rand index over ground-truth foreground pixels only; the
// predicted background acts as an ordinary cluster there. Degenerate
// contingency (both partitions trivial) evaluates to 1.
inline double ari_fg(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check(pred.size() == gt.size() && !gt.empty(), "ari_fg: shape mismatch");
  std::map<std::pair<int, int>, int64_t> joint;
  std::map<int, int64_t> a, b;
  int64_t n = 0;
  for (size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == 0) continue;
    ++joint[{gt[i], pred[i]}];
    ++a[gt[i]];
    ++b[pred[i]];
    ++n;
  }
  check(n > 0, "ari_fg: ground truth has no foreground pixels");
  auto comb2 = [](int64_t c) { return static_cast<double>(c) * static_cast<double>(c - 1) / 2.0; };
  double sum_ij = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& [k, c] : joint) sum_ij += comb2(c);
  for (const auto& [k, c] : a) sum_a += comb2(c);
  for (const auto& [k, c] : b) sum_b += comb2(c);
  const double total = comb2(n);
  const double expected = total > 0.0 ? sum_a * sum_b / total : 0.0;
  const double max_index = (sum_a + sum_b) / 2.0;
  const double denom = max_index - expected;
  if (std::abs(denom) < 1e-12) return 1.0;
  return (sum_ij - expected) / denom;
}

// Mean segmentation covering restricted to foreground: every ground-truth
// foreground region contributes its best-IoU predicted region, weighted by
// its pixel count.
inline double msc_fg(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt) {
  check(pred.size() == gt.size() && !gt.empty(), "msc_fg: shape mismatch");
  const auto gl = detail::present_labels(gt);
  const auto pl = detail::present_labels(pred);
  std::vector<int64_t> gcount(gl.size(), 0), pcount(pl.size(), 0);
  std::vector<std::vector<int64_t>> joint(gl.size(), std::vector<int64_t>(pl.size(), 0));
  auto gindex = [&](int l) {
    return static_cast<size_t>(std::lower_bound(gl.begin(), gl.end(), l) - gl.begin());
  };
  auto pindex = [&](int l) {
    return static_cast<size_t>(std::lower_bound(pl.begin(), pl.end(), l) - pl.begin());
  };
  for (size_t i = 0; i < gt.size(); ++i) {
    const size_t gi = gindex(gt[i]);
    const size_t pi = pindex(pred[i]);
    ++gcount[gi];
    ++pcount[pi];
    ++joint[gi][pi];
  }
  int64_t fg_total = 0;
  for (size_t g = 0; g < gl.size(); ++g)
    if (gl[g] != 0) fg_total += gcount[g];
  check(fg_total > 0, "msc_fg: ground truth has no foreground pixels");
  double covering = 0.0;
  for (size_t g = 0; g < gl.size(); ++g) {
    if (gl[g] == 0) continue;
    double best = 0.0;
    for (size_t p = 0; p < pl.size(); ++p) {
      const int64_t inter = joint[g][p];
      const int64_t uni = gcount[g] + pcount[p] - inter;
      if (uni > 0) best = std::max(best, static_cast<double>(inter) / static_cast<double>(uni));
    }
    covering += static_cast<double>(gcount[g]) / static_cast<double>(fg_total) * best;
  }
  return covering;
}

// Mean squared error between two [0,1] images, reported on the 0-255 scale.
inline double mse_metric(const std::vector<float>& xhat, const std::vector<float>& x) {
  check(xhat.size() == x.size() && !x.empty(), "mse_metric: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double d = (static_cast<double>(xhat[i]) - static_cast<double>(x[i])) * 255.0;
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

}  // namespace astseg

// GIoU, the DETR matching cost, and Hungarian assignment of predictions to
// GT-padded slots. Lambda weights follow the object-detection convention:
// class 2, box 1, IoU 2, L1 5; the perfect-match cost is therefore -4.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <tuple>
#include <vector>

#include "egtr/scene.hpp"
#include "egtr/tensor.hpp"

namespace egtr {

struct MatchWeights {
    double lambda_class = 2.0;
    double lambda_box = 1.0;
    double lambda_iou = 2.0;
    double lambda_l1 = 5.0;
    double cost_min() const { return -lambda_class - lambda_box * lambda_iou; }
};

inline double giou(const Box& a, const Box& b) {
    if (a.w <= 0 || a.h <= 0 || b.w <= 0 || b.h <= 0) fatal("giou: degenerate box");
    const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = ix * iy;
    const double uni = a.w * a.h + b.w * b.h - inter;
    const double hull = (std::max(a.x1(), b.x1()) - std::min(a.x0(), b.x0())) *
                        (std::max(a.y1(), b.y1()) - std::min(a.y0(), b.y0()));
    return inter / uni - (hull - uni) / hull;
}

// pred: class probabilities (softmax, phi included) and a box; gt is real
inline double matching_cost(const std::vector<double>& class_probs, const Box& pred_box,
                            int gt_class, const Box& gt_box,
                            const MatchWeights& w = MatchWeights()) {
    const double l1 = std::fabs(pred_box.cx - gt_box.cx) + std::fabs(pred_box.cy - gt_box.cy) +
                      std::fabs(pred_box.w - gt_box.w) + std::fabs(pred_box.h - gt_box.h);
    return w.lambda_class * (-class_probs[static_cast<size_t>(gt_class)]) +
           w.lambda_box * (w.lambda_iou * (-giou(pred_box, gt_box)) + w.lambda_l1 * l1);
}

namespace detail {

// Jonker-Volgenant shortest augmenting path, square n x n, minimizing.
inline double solve_square_assignment(const std::vector<std::vector<double>>& cost,
                                      std::vector<int>& row_to_col) {
    const int n = static_cast<int>(cost.size());
    std::vector<double> u(static_cast<size_t>(n) + 1), v(static_cast<size_t>(n) + 1);
    std::vector<int> p(static_cast<size_t>(n) + 1), way(static_cast<size_t>(n) + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, std::numeric_limits<double>::infinity());
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            const int i0 = p[static_cast<size_t>(j0)];
            int j1 = 0;
            double delta = std::numeric_limits<double>::infinity();
            for (int j = 1; j <= n; ++j)
                if (!used[static_cast<size_t>(j)]) {
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
    row_to_col.assign(static_cast<size_t>(n), -1);
    double total = 0.0;
    for (int j = 1; j <= n; ++j)
        if (p[static_cast<size_t>(j)]) {
            row_to_col[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)] = j - 1;
            total += cost[static_cast<size_t>(p[static_cast<size_t>(j)] - 1)][static_cast<size_t>(j - 1)];
        }
    return total;
}

// minimum assignment cost of GT rows (subset) onto prediction columns (subset)
inline double min_assignment_cost(const std::vector<std::vector<double>>& cost,
                                  const std::vector<int>& rows, const std::vector<int>& cols) {
    if (rows.empty()) return 0.0;
    const int n = static_cast<int>(cols.size());
    std::vector<std::vector<double>> sq(static_cast<size_t>(n),
                                        std::vector<double>(static_cast<size_t>(n), 0.0));
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < cols.size(); ++c)
            sq[r][c] = cost[static_cast<size_t>(rows[r])][static_cast<size_t>(cols[c])];
    std::vector<int> assign;
    return solve_square_assignment(sq, assign);
}

}  // namespace detail

// sigma[i] = prediction index assigned to GT-padded slot i; slots [0, M) are
// real GT, slots [M, N) are phi. Among all minimum-cost assignments the
// lexicographically smallest sigma is returned; leftover predictions fill the
// phi slots in ascending index order.
inline std::vector<int> hungarian(const std::vector<std::vector<double>>& cost, int n_preds) {
    const int m = static_cast<int>(cost.size());
    if (m > n_preds) fatal("hungarian: more GT objects than predictions");
    std::vector<int> all_rows(static_cast<size_t>(m)), all_cols(static_cast<size_t>(n_preds));
    std::iota(all_rows.begin(), all_rows.end(), 0);
    std::iota(all_cols.begin(), all_cols.end(), 0);
    const double best_total = detail::min_assignment_cost(cost, all_rows, all_cols);
    constexpr double kTol = 1e-9;

    std::vector<int> sigma(static_cast<size_t>(n_preds), -1);
    std::vector<char> used(static_cast<size_t>(n_preds), 0);
    double fixed = 0.0;
    std::vector<int> remaining_rows = all_rows;
    for (int i = 0; i < m; ++i) {
        remaining_rows.erase(remaining_rows.begin());
        bool placed = false;
        for (int j = 0; j < n_preds && !placed; ++j) {
            if (used[static_cast<size_t>(j)]) continue;
            std::vector<int> rem_cols;
            for (int c = 0; c < n_preds; ++c)
                if (!used[static_cast<size_t>(c)] && c != j) rem_cols.push_back(c);
            const double rest = detail::min_assignment_cost(cost, remaining_rows, rem_cols);
            if (fixed + cost[static_cast<size_t>(i)][static_cast<size_t>(j)] + rest <=
                best_total + kTol) {
                sigma[static_cast<size_t>(i)] = j;
                used[static_cast<size_t>(j)] = 1;
                fixed += cost[static_cast<size_t>(i)][static_cast<size_t>(j)];
                placed = true;
            }
        }
        if (!placed) fatal("hungarian: internal error, no consistent assignment");
    }
    int slot = m;
    for (int j = 0; j < n_preds; ++j)
        if (!used[static_cast<size_t>(j)]) sigma[static_cast<size_t>(slot++)] = j;
    return sigma;
}

struct MatchResult {
    std::vector<int> sigma;        // slot -> prediction index, bijection on N
    std::vector<double> costs;     // per real GT slot
    double cost_min = 0.0;         // analytic perfect-match cost
};

inline MatchResult match_scene(const std::vector<double>& class_probs_flat, int n_classes_incl_phi,
                               const std::vector<Box>& pred_boxes, const Scene& gt,
                               const MatchWeights& w = MatchWeights()) {
    const int n = static_cast<int>(pred_boxes.size());
    const int m = static_cast<int>(gt.objects.size());
    std::vector<std::vector<double>> cost(static_cast<size_t>(m),
                                          std::vector<double>(static_cast<size_t>(n), 0.0));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            std::vector<double> probs(
                class_probs_flat.begin() + static_cast<int64_t>(j) * n_classes_incl_phi,
                class_probs_flat.begin() + static_cast<int64_t>(j + 1) * n_classes_incl_phi);
            cost[static_cast<size_t>(i)][static_cast<size_t>(j)] =
                matching_cost(probs, pred_boxes[static_cast<size_t>(j)],
                              gt.objects[static_cast<size_t>(i)].category,
                              gt.objects[static_cast<size_t>(i)].box, w);
        }
    MatchResult r;
    r.sigma = hungarian(cost, n);
    r.cost_min = w.cost_min();
    for (int i = 0; i < m; ++i)
        r.costs.push_back(cost[static_cast<size_t>(i)][static_cast<size_t>(r.sigma[static_cast<size_t>(i)])]);
    return r;
}

}  // namespace egtr

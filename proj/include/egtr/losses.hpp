// Loss terms: object detection loss over the matched permutation, adaptive
// label smoothing from matching costs, the GT / negative / non-matching
// region partition with hard sampling, and the weighted total.
#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>
#include <vector>

#include "egtr/detector.hpp"
#include "egtr/matching.hpp"
#include "egtr/relation.hpp"
#include "egtr/scene.hpp"
#include "egtr/tensor.hpp"

namespace egtr {

// ---- differentiable GIoU over cxcywh rows ------------------------------

// giou(pred_k, gt_k) per row; gt is constant
inline Ten giou_rows(const Ten& pred, const std::vector<Box>& gt) {
    const int k = pred->dim(0);
    auto col = [&](int c) { return slice_cols(pred, c, c + 1); };
    Ten cx = col(0), cy = col(1), w = col(2), h = col(3);
    Ten x0 = sub(cx, scale(w, 0.5)), x1 = add(cx, scale(w, 0.5));
    Ten y0 = sub(cy, scale(h, 0.5)), y1 = add(cy, scale(h, 0.5));
    std::vector<double> gx0(static_cast<size_t>(k)), gx1(static_cast<size_t>(k)),
        gy0(static_cast<size_t>(k)), gy1(static_cast<size_t>(k)), garea(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        const Box& b = gt[static_cast<size_t>(i)];
        gx0[static_cast<size_t>(i)] = b.x0();
        gx1[static_cast<size_t>(i)] = b.x1();
        gy0[static_cast<size_t>(i)] = b.y0();
        gy1[static_cast<size_t>(i)] = b.y1();
        garea[static_cast<size_t>(i)] = b.w * b.h;
    }
    Ten bx0 = tensor_from({k, 1}, gx0), bx1 = tensor_from({k, 1}, gx1);
    Ten by0 = tensor_from({k, 1}, gy0), by1 = tensor_from({k, 1}, gy1);
    Ten barea = tensor_from({k, 1}, garea);
    Ten iw = relu(sub(min_elem(x1, bx1), max_elem(x0, bx0)));
    Ten ih = relu(sub(min_elem(y1, by1), max_elem(y0, by0)));
    Ten inter = mul(iw, ih);
    Ten uni = sub(add(mul(w, h), barea), inter);
    Ten hull = mul(sub(max_elem(x1, bx1), min_elem(x0, bx0)),
                   sub(max_elem(y1, by1), min_elem(y0, by0)));
    // iou - (hull - union)/hull = inter/union + union/hull - 1
    return add_const(add(div_elem(inter, uni), div_elem(uni, hull)), -1.0);
}

// ---- object detection loss ---------------------------------------------

struct DetectionLossCfg {
    MatchWeights weights;
    double phi_weight = 0.1;  // down-weight of the no-object class CE
};

inline Ten detection_loss(const DetectorOutput& det, const Scene& gt, const MatchResult& match,
                          const DecoderConfig& cfg, const DetectionLossCfg& lcfg = {}) {
    const int n = cfg.n_queries;
    const int m = static_cast<int>(gt.objects.size());
    const int phi = cfg.phi_class();
    // class targets in prediction order
    std::vector<int> cls(static_cast<size_t>(n), phi);
    std::vector<double> wts(static_cast<size_t>(n), lcfg.phi_weight * lcfg.weights.lambda_class);
    for (int i = 0; i < m; ++i) {
        const int j = match.sigma[static_cast<size_t>(i)];
        cls[static_cast<size_t>(j)] = gt.objects[static_cast<size_t>(i)].category;
        wts[static_cast<size_t>(j)] = lcfg.weights.lambda_class;
    }
    Ten loss = softmax_cross_entropy_sum(det.class_logits, cls, wts);
    if (m > 0) {
        std::vector<int64_t> box_idx;
        std::vector<Box> gt_boxes;
        std::vector<double> gt_flat;
        for (int i = 0; i < m; ++i) {
            const int j = match.sigma[static_cast<size_t>(i)];
            for (int c = 0; c < 4; ++c) box_idx.push_back(static_cast<int64_t>(j) * 4 + c);
            const Box& b = gt.objects[static_cast<size_t>(i)].box;
            gt_boxes.push_back(b);
            gt_flat.insert(gt_flat.end(), {b.cx, b.cy, b.w, b.h});
        }
        Ten pred = reshape(gather(det.boxes, box_idx), {m, 4});
        Ten l1 = sum_all(abs_op(sub(pred, tensor_from({m, 4}, gt_flat))));
        Ten giou_term = sum_all(add_const(scale(giou_rows(pred, gt_boxes), -1.0), 1.0));
        loss = add(loss, scale(add(scale(giou_term, lcfg.weights.lambda_iou),
                                   scale(l1, lcfg.weights.lambda_l1)),
                               lcfg.weights.lambda_box));
    }
    return loss;
}

// ---- adaptive smoothing -------------------------------------------------

inline double logit(double p) { return std::log(p / (1.0 - p)); }

// u = sigmoid(cost - cost_min + logit(alpha)); u(cost_min) = alpha
inline double uncertainty(double cost, double cost_min, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0)) fatal("uncertainty: alpha must be in (0,1)");
    const double x = cost - cost_min + logit(alpha);
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

// ---- region partition + targets ----------------------------------------

struct RegionPartition {
    std::vector<int64_t> gt_cells;        // flat (i*N + j)*|C_p| + k, prediction indices
    std::vector<int64_t> negative_cells;  // matched pairs, no relation, i != j
    // non-matching region is everything else (held implicitly; see is_non_matching)
    std::vector<char> cell_region;  // 0 = non-matching, 1 = GT, 2 = negative
};

struct SmoothedTargets {
    std::vector<double> rel;  // N*N*|C_p|: (1-u_i)(1-u_j) on GT cells, else 0
    std::vector<double> con;  // N*N binary: 1 iff any GT predicate for the pair
};

// Targets and regions live in prediction-index space (the permutation is
// already applied via match.sigma).
inline std::pair<SmoothedTargets, RegionPartition> build_targets(const MatchResult& match,
                                                                 const Scene& gt, int n,
                                                                 int n_pred, double alpha) {
    const int m = static_cast<int>(gt.objects.size());
    SmoothedTargets t;
    t.rel.assign(static_cast<size_t>(n) * n * n_pred, 0.0);
    t.con.assign(static_cast<size_t>(n) * n, 0.0);
    RegionPartition part;
    part.cell_region.assign(t.rel.size(), 0);

    std::vector<double> u(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i)
        u[static_cast<size_t>(i)] = uncertainty(match.costs[static_cast<size_t>(i)],
                                                match.cost_min, alpha);
    // negative region: ordered distinct matched pairs, all predicates
    for (int a = 0; a < m; ++a)
        for (int b = 0; b < m; ++b) {
            if (a == b) continue;
            const int pi = match.sigma[static_cast<size_t>(a)];
            const int pj = match.sigma[static_cast<size_t>(b)];
            for (int k = 0; k < n_pred; ++k)
                part.cell_region[(static_cast<size_t>(pi) * n + pj) * n_pred + k] = 2;
        }
    for (const auto& tr : gt.triplets) {
        const int pi = match.sigma[static_cast<size_t>(tr.subj)];
        const int pj = match.sigma[static_cast<size_t>(tr.obj)];
        const size_t cell = (static_cast<size_t>(pi) * n + pj) * n_pred + tr.pred;
        part.cell_region[cell] = 1;
        t.rel[cell] = (1.0 - u[static_cast<size_t>(tr.subj)]) * (1.0 - u[static_cast<size_t>(tr.obj)]);
        t.con[static_cast<size_t>(pi) * n + pj] = 1.0;
    }
    for (size_t c = 0; c < part.cell_region.size(); ++c) {
        if (part.cell_region[c] == 1) part.gt_cells.push_back(static_cast<int64_t>(c));
        else if (part.cell_region[c] == 2) part.negative_cells.push_back(static_cast<int64_t>(c));
    }
    return {t, part};
}

// ---- hard sampling ------------------------------------------------------

// top min(k*|E|, region size) cells by descending predicted score, ties by
// ascending flat index; selection is detached (no gradient through the sort)
inline std::vector<int64_t> top_cells(const std::vector<double>& scores,
                                      std::vector<int64_t> candidates, int64_t limit) {
    if (limit >= static_cast<int64_t>(candidates.size())) {
        std::sort(candidates.begin(), candidates.end());
        return candidates;
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](int64_t a, int64_t b) {
        const double sa = scores[static_cast<size_t>(a)], sb = scores[static_cast<size_t>(b)];
        if (sa != sb) return sa > sb;
        return a < b;
    });
    candidates.resize(static_cast<size_t>(limit));
    std::sort(candidates.begin(), candidates.end());
    return candidates;
}

struct HardSamples {
    std::vector<int64_t> negative;
    std::vector<int64_t> non_matching;
};

inline HardSamples hard_sample(const std::vector<double>& rel_scores, const RegionPartition& part,
                               int64_t n_gt_triplets, int k_neg, int k_non) {
    HardSamples s;
    if (n_gt_triplets == 0) return s;  // loss falls back to the GT region only
    std::vector<int64_t> non_cells;
    for (size_t c = 0; c < part.cell_region.size(); ++c)
        if (part.cell_region[c] == 0) non_cells.push_back(static_cast<int64_t>(c));
    s.negative = top_cells(rel_scores, part.negative_cells, k_neg * n_gt_triplets);
    s.non_matching = top_cells(rel_scores, non_cells, k_non * n_gt_triplets);
    return s;
}

// ---- relation + connectivity losses ------------------------------------

struct RelationLosses {
    Ten rel;  // scalar
    Ten con;  // scalar
};

// L_rel: mean BCE over GT + sampled negative + sampled non-matching cells.
// L_con: mean BCE over the pair projection of the same regions.
inline RelationLosses relation_losses(const RelationOutput& rel_out,
                                      const SmoothedTargets& targets,
                                      const RegionPartition& part, const HardSamples& samples,
                                      int n, int n_pred) {
    std::vector<int64_t> cells;
    cells.insert(cells.end(), part.gt_cells.begin(), part.gt_cells.end());
    cells.insert(cells.end(), samples.negative.begin(), samples.negative.end());
    cells.insert(cells.end(), samples.non_matching.begin(), samples.non_matching.end());
    RelationLosses out;
    if (cells.empty()) {
        out.rel = scalar(0.0);
        out.con = scalar(0.0);
        return out;
    }
    std::vector<double> rel_t;
    rel_t.reserve(cells.size());
    std::set<int64_t> pair_set;
    for (int64_t c : cells) {
        rel_t.push_back(targets.rel[static_cast<size_t>(c)]);
        pair_set.insert(c / n_pred);
    }
    out.rel = bce_with_logits_mean(gather(rel_out.rel_logits, cells), rel_t);
    std::vector<int64_t> pairs(pair_set.begin(), pair_set.end());
    std::vector<double> con_t;
    con_t.reserve(pairs.size());
    for (int64_t p : pairs) con_t.push_back(targets.con[static_cast<size_t>(p)]);
    out.con = bce_with_logits_mean(gather(rel_out.con_logits, pairs), con_t);
    return out;
}

struct LossWeights {
    double lambda_rel = 15.0;
    double lambda_con = 30.0;
    double alpha = 1e-14;
    int k_neg = 80;
    int k_non = 80;
};

struct SceneLoss {
    Ten total;
    double od = 0, rel = 0, con = 0;
};

// L = L_od + lambda_rel * L_rel + lambda_con * L_con. When frozen targets
// are supplied (gradient audits) matching, smoothing, and sampling are not
// recomputed; they are non-differentiable selections.
struct FrozenSceneTargets {
    MatchResult match;
    SmoothedTargets targets;
    RegionPartition partition;
    HardSamples samples;
};

inline FrozenSceneTargets prepare_targets(const DetectorOutput& det, const RelationOutput& rel,
                                          const Scene& gt, const DecoderConfig& cfg,
                                          const LossWeights& lw) {
    FrozenSceneTargets f;
    std::vector<double> probs = softmax_lastdim(det.class_logits)->data;
    std::vector<Box> boxes;
    for (int i = 0; i < cfg.n_queries; ++i)
        boxes.push_back({det.boxes->data[static_cast<size_t>(i) * 4],
                         det.boxes->data[static_cast<size_t>(i) * 4 + 1],
                         det.boxes->data[static_cast<size_t>(i) * 4 + 2],
                         det.boxes->data[static_cast<size_t>(i) * 4 + 3]});
    f.match = match_scene(probs, cfg.n_categories + 1, boxes, gt);
    auto [targets, part] = build_targets(f.match, gt, cfg.n_queries, cfg.n_predicates, lw.alpha);
    f.targets = std::move(targets);
    f.partition = std::move(part);
    f.samples = hard_sample(rel.rel_graph->data, f.partition,
                            static_cast<int64_t>(gt.triplets.size()), lw.k_neg, lw.k_non);
    return f;
}

inline SceneLoss total_loss(const DetectorOutput& det, const RelationOutput& rel,
                            const Scene& gt, const DecoderConfig& cfg, const LossWeights& lw,
                            const FrozenSceneTargets& f) {
    SceneLoss out;
    Ten od = detection_loss(det, gt, f.match, cfg);
    RelationLosses rl =
        relation_losses(rel, f.targets, f.partition, f.samples, cfg.n_queries, cfg.n_predicates);
    out.od = od->data[0];
    out.rel = rl.rel->data[0];
    out.con = rl.con->data[0];
    out.total = add(od, add(scale(rl.rel, lw.lambda_rel), scale(rl.con, lw.lambda_con)));
    return out;
}

}  // namespace egtr

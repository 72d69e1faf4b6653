// SGDet / SGCls / PredCls evaluation: graph-constraint filtering, triplet
// matching at IoU > 0.5, R@k / mR@k, and AP50 with the rel / no-rel split.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "egtr/detector.hpp"
#include "egtr/matching.hpp"
#include "egtr/relation.hpp"
#include "egtr/scene.hpp"

namespace egtr {

struct DetectionPred {
    int cls = 0;
    double score = 0.0;
    Box box;
};

struct TripletPred {
    int subj_idx = 0, obj_idx = 0;
    int subj_cls = 0, pred = 0, obj_cls = 0;
    Box subj_box, obj_box;
    double score = 0.0;
};

struct ScenePrediction {
    std::vector<TripletPred> triplets;  // sorted by descending score
    std::vector<DetectionPred> detections;
};

enum class EvalMode { kSgdet, kSgcls, kPredcls };

inline EvalMode eval_mode_from_string(const std::string& s) {
    if (s == "sgdet") return EvalMode::kSgdet;
    if (s == "sgcls") return EvalMode::kSgcls;
    if (s == "predcls") return EvalMode::kPredcls;
    fatal("unknown eval mode: " + s);
}

// keep only the top-scored predicate per ordered (subject, object) pair
inline std::vector<TripletPred> graph_constraint_filter(const std::vector<TripletPred>& sorted) {
    std::set<std::pair<int, int>> seen;
    std::vector<TripletPred> out;
    for (const auto& t : sorted)
        if (seen.insert({t.subj_idx, t.obj_idx}).second) out.push_back(t);
    return out;
}

// all three classes must match and both boxes must clear IoU > 0.5 (strict)
inline bool triplet_hit(const TripletPred& pred, const Triplet& gt_triplet, const Scene& gt,
                        double iou_thresh = 0.5) {
    const auto& subj = gt.objects[static_cast<size_t>(gt_triplet.subj)];
    const auto& obj = gt.objects[static_cast<size_t>(gt_triplet.obj)];
    return pred.pred == gt_triplet.pred && pred.subj_cls == subj.category &&
           pred.obj_cls == obj.category && box_iou(pred.subj_box, subj.box) > iou_thresh &&
           box_iou(pred.obj_box, obj.box) > iou_thresh;
}

struct RecallResult {
    double recall = 0.0;                  // image-level mean over scenes with GT
    std::vector<double> per_predicate;    // pooled; -1 when a predicate has no GT
};

// Greedy crediting in prediction-score order; each GT triplet is creditable
// at most once per scene. Scenes without GT triplets are skipped for R@k.
inline RecallResult recall_at_k(const std::vector<ScenePrediction>& preds,
                                const std::vector<Scene>& gts, int k, int n_predicates) {
    double sum = 0.0;
    int counted = 0;
    std::vector<int64_t> pred_hits(static_cast<size_t>(n_predicates), 0);
    std::vector<int64_t> pred_total(static_cast<size_t>(n_predicates), 0);
    for (size_t s = 0; s < gts.size(); ++s) {
        const Scene& gt = gts[s];
        for (const auto& t : gt.triplets) ++pred_total[static_cast<size_t>(t.pred)];
        if (gt.triplets.empty()) continue;
        std::vector<char> credited(gt.triplets.size(), 0);
        int hits = 0;
        const auto& ts = preds[s].triplets;
        for (size_t p = 0; p < ts.size() && p < static_cast<size_t>(k); ++p) {
            for (size_t g = 0; g < gt.triplets.size(); ++g) {
                if (credited[g]) continue;
                if (triplet_hit(ts[p], gt.triplets[g], gt)) {
                    credited[g] = 1;
                    ++hits;
                    ++pred_hits[static_cast<size_t>(gt.triplets[g].pred)];
                    break;
                }
            }
        }
        sum += static_cast<double>(hits) / static_cast<double>(gt.triplets.size());
        ++counted;
    }
    RecallResult r;
    r.recall = counted ? sum / counted : 0.0;
    for (int p = 0; p < n_predicates; ++p)
        r.per_predicate.push_back(pred_total[static_cast<size_t>(p)] > 0
                                      ? static_cast<double>(pred_hits[static_cast<size_t>(p)]) /
                                            static_cast<double>(pred_total[static_cast<size_t>(p)])
                                      : -1.0);
    return r;
}

inline double mean_recall(const RecallResult& r) {
    double sum = 0.0;
    int n = 0;
    for (double v : r.per_predicate)
        if (v >= 0.0) {
            sum += v;
            ++n;
        }
    return n ? sum / n : 0.0;
}

// ---- AP50 ---------------------------------------------------------------

enum class ApSubset { kAll, kRel, kNoRel };

// All-point interpolated AP at IoU > 0.5, mean over classes present in the
// (subset-restricted) GT pool. Detections that overlap an out-of-subset GT
// object of the same class are ignored rather than counted as false positives.
inline double ap50(const std::vector<ScenePrediction>& preds, const std::vector<Scene>& gts,
                   int n_categories, ApSubset subset = ApSubset::kAll) {
    // eligible[scene][obj]
    std::vector<std::vector<char>> eligible(gts.size());
    for (size_t s = 0; s < gts.size(); ++s) {
        const Scene& gt = gts[s];
        std::vector<char> has_edge(gt.objects.size(), 0);
        for (const auto& t : gt.triplets) {
            has_edge[static_cast<size_t>(t.subj)] = 1;
            has_edge[static_cast<size_t>(t.obj)] = 1;
        }
        eligible[s].resize(gt.objects.size());
        for (size_t o = 0; o < gt.objects.size(); ++o)
            eligible[s][o] = subset == ApSubset::kAll ? 1
                           : subset == ApSubset::kRel ? has_edge[o]
                                                      : static_cast<char>(!has_edge[o]);
    }
    double ap_sum = 0.0;
    int n_classes_present = 0;
    for (int c = 0; c < n_categories; ++c) {
        int64_t n_gt = 0;
        for (size_t s = 0; s < gts.size(); ++s)
            for (size_t o = 0; o < gts[s].objects.size(); ++o)
                if (eligible[s][o] && gts[s].objects[o].category == c) ++n_gt;
        if (n_gt == 0) continue;
        ++n_classes_present;
        struct Det {
            double score;
            size_t scene;
            Box box;
            size_t order;
        };
        std::vector<Det> dets;
        for (size_t s = 0; s < preds.size(); ++s)
            for (const auto& d : preds[s].detections)
                if (d.cls == c) dets.push_back({d.score, s, d.box, dets.size()});
        std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
            if (a.score != b.score) return a.score > b.score;
            return a.order < b.order;
        });
        std::vector<std::set<size_t>> claimed(gts.size());
        std::vector<double> tp, fp;
        for (const auto& d : dets) {
            const Scene& gt = gts[d.scene];
            double best_iou = 0.5;
            int best_o = -1;
            bool ignored = false;
            for (size_t o = 0; o < gt.objects.size(); ++o) {
                if (gt.objects[o].category != c || claimed[d.scene].count(o)) continue;
                const double iou = box_iou(d.box, gt.objects[o].box);
                if (iou > best_iou) {
                    if (eligible[d.scene][o]) {
                        best_iou = iou;
                        best_o = static_cast<int>(o);
                    } else {
                        ignored = true;
                    }
                }
            }
            if (best_o >= 0) {
                claimed[d.scene].insert(static_cast<size_t>(best_o));
                tp.push_back(1);
                fp.push_back(0);
            } else if (!ignored) {
                tp.push_back(0);
                fp.push_back(1);
            }
        }
        // precision envelope over the ranked list
        double ap = 0.0, cum_tp = 0.0, cum_fp = 0.0;
        std::vector<double> prec, rec;
        for (size_t i = 0; i < tp.size(); ++i) {
            cum_tp += tp[i];
            cum_fp += fp[i];
            prec.push_back(cum_tp / (cum_tp + cum_fp));
            rec.push_back(cum_tp / static_cast<double>(n_gt));
        }
        for (int i = static_cast<int>(prec.size()) - 2; i >= 0; --i)
            prec[static_cast<size_t>(i)] = std::max(prec[static_cast<size_t>(i)],
                                                    prec[static_cast<size_t>(i + 1)]);
        double prev_rec = 0.0;
        for (size_t i = 0; i < prec.size(); ++i) {
            ap += (rec[i] - prev_rec) * prec[i];
            prev_rec = rec[i];
        }
        ap_sum += ap;
    }
    return n_classes_present ? ap_sum / n_classes_present : 0.0;
}

// ---- per-scene prediction assembly -------------------------------------

// Builds the ranked triplet list and detection set for one scene. For sgcls
// and predcls, matched queries have their class (and for predcls, box)
// predictions replaced by GT values; query representations behind the
// relation graph stay untouched.
inline ScenePrediction assemble_prediction(const DetectorOutput& det, const RelationOutput& rel,
                                           const Scene& gt, const DecoderConfig& cfg,
                                           EvalMode mode, bool use_connectivity = true,
                                           int max_triplets = 100) {
    const int n = cfg.n_queries;
    const int nc = cfg.n_categories;
    std::vector<double> probs = softmax_lastdim(det.class_logits)->data;
    std::vector<Box> boxes(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        boxes[static_cast<size_t>(i)] = {det.boxes->data[static_cast<size_t>(i) * 4],
                                         det.boxes->data[static_cast<size_t>(i) * 4 + 1],
                                         det.boxes->data[static_cast<size_t>(i) * 4 + 2],
                                         det.boxes->data[static_cast<size_t>(i) * 4 + 3]};
    if (mode != EvalMode::kSgdet && !gt.objects.empty()) {
        MatchResult match = match_scene(probs, nc + 1, boxes, gt);
        for (size_t i = 0; i < gt.objects.size(); ++i) {
            const int j = match.sigma[i];
            for (int c = 0; c <= nc; ++c)
                probs[static_cast<size_t>(j) * (nc + 1) + c] =
                    (c == gt.objects[i].category) ? 1.0 : 0.0;
            if (mode == EvalMode::kPredcls) boxes[static_cast<size_t>(j)] = gt.objects[i].box;
        }
    }
    ScenePrediction out;
    auto scored = inference_score(rel.rel_graph->data, rel.con_graph->data, probs, n,
                                  cfg.n_predicates, nc, use_connectivity);
    if (static_cast<int>(scored.size()) > max_triplets) scored.resize(static_cast<size_t>(max_triplets));
    for (const auto& s : scored) {
        TripletPred t;
        t.subj_idx = s.subj;
        t.obj_idx = s.obj;
        t.pred = s.pred;
        t.score = s.score;
        auto best_cls = [&](int q) {
            int bc = 0;
            for (int c = 1; c < nc; ++c)
                if (probs[static_cast<size_t>(q) * (nc + 1) + c] >
                    probs[static_cast<size_t>(q) * (nc + 1) + bc])
                    bc = c;
            return bc;
        };
        t.subj_cls = best_cls(s.subj);
        t.obj_cls = best_cls(s.obj);
        t.subj_box = boxes[static_cast<size_t>(s.subj)];
        t.obj_box = boxes[static_cast<size_t>(s.obj)];
        out.triplets.push_back(t);
    }
    for (int i = 0; i < n; ++i) {
        DetectionPred d;
        d.cls = 0;
        for (int c = 1; c < nc; ++c)
            if (probs[static_cast<size_t>(i) * (nc + 1) + c] >
                probs[static_cast<size_t>(i) * (nc + 1) + d.cls])
                d.cls = c;
        d.score = probs[static_cast<size_t>(i) * (nc + 1) + d.cls];
        d.box = boxes[static_cast<size_t>(i)];
        out.detections.push_back(d);
    }
    return out;
}

// ---- report -------------------------------------------------------------

struct MetricsReport {
    std::string mode;
    std::map<int, double> recall;       // k -> R@k
    std::map<int, double> mean_recall_k;  // k -> mR@k
    std::map<int, std::vector<double>> per_predicate;  // k -> recalls
    double ap50_all = 0, ap50_rel = 0, ap50_norel = 0;
};

inline MetricsReport compute_metrics(const std::vector<ScenePrediction>& raw_preds,
                                     const std::vector<Scene>& gts, const SceneConfig& scfg,
                                     const std::string& mode_name) {
    std::vector<ScenePrediction> preds = raw_preds;
    for (auto& p : preds) p.triplets = graph_constraint_filter(p.triplets);
    MetricsReport rep;
    rep.mode = mode_name;
    for (int k : {20, 50, 100}) {
        RecallResult r = recall_at_k(preds, gts, k, scfg.n_predicates);
        rep.recall[k] = r.recall;
        rep.mean_recall_k[k] = mean_recall(r);
        rep.per_predicate[k] = r.per_predicate;
    }
    rep.ap50_all = ap50(preds, gts, scfg.n_categories, ApSubset::kAll);
    rep.ap50_rel = ap50(preds, gts, scfg.n_categories, ApSubset::kRel);
    rep.ap50_norel = ap50(preds, gts, scfg.n_categories, ApSubset::kNoRel);
    return rep;
}

inline nlohmann::json metrics_to_json(const MetricsReport& rep) {
    nlohmann::json j;
    j["mode"] = rep.mode;
    for (const auto& [k, v] : rep.recall) j["recall"]["R@" + std::to_string(k)] = v;
    for (const auto& [k, v] : rep.mean_recall_k) j["mean_recall"]["mR@" + std::to_string(k)] = v;
    for (const auto& [k, v] : rep.per_predicate)
        j["per_predicate"]["k" + std::to_string(k)] = v;
    j["ap50"]["all"] = rep.ap50_all;
    j["ap50"]["rel"] = rep.ap50_rel;
    j["ap50"]["no_rel"] = rep.ap50_norel;
    return j;
}

}  // namespace egtr

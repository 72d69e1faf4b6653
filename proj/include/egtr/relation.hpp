// Relation head: pairwise relation sources from every self-attention layer
// plus the final hidden states, gated fusion, and the relation/connectivity
// graphs. Pair tensors are stored flattened as (N*N) x width, row-major in
// (subject, object).
#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <tuple>
#include <vector>

#include "egtr/detector.hpp"
#include "egtr/optim.hpp"
#include "egtr/tensor.hpp"

namespace egtr {

enum class RelationMode { kConcat, kSum, kHadamard, kDot, kDotAttn };

inline RelationMode relation_mode_from_string(const std::string& s) {
    if (s == "concat") return RelationMode::kConcat;
    if (s == "sum") return RelationMode::kSum;
    if (s == "hadamard") return RelationMode::kHadamard;
    if (s == "dot") return RelationMode::kDot;
    if (s == "dot-attn") return RelationMode::kDotAttn;
    fatal("unknown relation mode: " + s);
}

inline std::string relation_mode_name(RelationMode m) {
    switch (m) {
        case RelationMode::kConcat: return "concat";
        case RelationMode::kSum: return "sum";
        case RelationMode::kHadamard: return "hadamard";
        case RelationMode::kDot: return "dot";
        case RelationMode::kDotAttn: return "dot-attn";
    }
    return "?";
}

// out[(i*N+j)] = concat(a[i], b[j]); row = subject, column = object
inline Ten pairwise_concat(const Ten& a, const Ten& b) {
    if (a->ndim() != 2 || a->shape != b->shape) fatal("pairwise_concat: shape mismatch");
    const int n = a->dim(0), d = a->dim(1);
    auto out = make_node({n * n, 2 * d}, {a, b}, [n, d](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const size_t base = (static_cast<size_t>(i) * n + j) * 2 * d;
                for (int t = 0; t < d; ++t) {
                    A.grad[static_cast<size_t>(i) * d + t] += o.grad[base + t];
                    B.grad[static_cast<size_t>(j) * d + t] += o.grad[base + d + t];
                }
            }
    });
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const size_t base = (static_cast<size_t>(i) * n + j) * 2 * d;
            for (int t = 0; t < d; ++t) {
                out->data[base + t] = a->data[static_cast<size_t>(i) * d + t];
                out->data[base + d + t] = b->data[static_cast<size_t>(j) * d + t];
            }
        }
    return out;
}

// out[(i*N+j)] = a[i] (op) b[j], elementwise sum or product
inline Ten pairwise_combine(const Ten& a, const Ten& b, bool product) {
    if (a->ndim() != 2 || a->shape != b->shape) fatal("pairwise_combine: shape mismatch");
    const int n = a->dim(0), d = a->dim(1);
    auto out = make_node({n * n, d}, {a, b}, [n, d, product](Tensor& o) {
        Tensor& A = *o.parents[0];
        Tensor& B = *o.parents[1];
        A.ensure_grad();
        B.ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                const size_t base = (static_cast<size_t>(i) * n + j) * d;
                for (int t = 0; t < d; ++t) {
                    const double g = o.grad[base + t];
                    if (product) {
                        A.grad[static_cast<size_t>(i) * d + t] += g * B.data[static_cast<size_t>(j) * d + t];
                        B.grad[static_cast<size_t>(j) * d + t] += g * A.data[static_cast<size_t>(i) * d + t];
                    } else {
                        A.grad[static_cast<size_t>(i) * d + t] += g;
                        B.grad[static_cast<size_t>(j) * d + t] += g;
                    }
                }
            }
    });
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const size_t base = (static_cast<size_t>(i) * n + j) * d;
            for (int t = 0; t < d; ++t)
                out->data[base + t] =
                    product ? a->data[static_cast<size_t>(i) * d + t] * b->data[static_cast<size_t>(j) * d + t]
                            : a->data[static_cast<size_t>(i) * d + t] + b->data[static_cast<size_t>(j) * d + t];
        }
    return out;
}

struct RelationParams {
    RelationMode mode = RelationMode::kConcat;
    std::vector<Ten> w_subj, w_obj;  // per layer; entry L is the Z^L pair
    Ten w_gate;                      // width x 1, shared across sources
    Linear mlp_rel1, mlp_rel2, mlp_rel3;
    Linear mlp_con1, mlp_con2, mlp_con3;
    int source_width = 0;
};

inline int relation_source_width(RelationMode mode, const DecoderConfig& cfg) {
    switch (mode) {
        case RelationMode::kConcat: return 2 * cfg.d_model;
        case RelationMode::kSum:
        case RelationMode::kHadamard: return cfg.d_model;
        case RelationMode::kDot:
        case RelationMode::kDotAttn: return cfg.n_heads;
    }
    return 0;
}

inline Ten make_weight(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    Ten w = ps.add(name, tensor({in, out}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : w->data) v = rng.uniform(-bound, bound);
    return w;
}

inline RelationParams make_relation_head(ParamStore& ps, const DecoderConfig& cfg,
                                         RelationMode mode, Rng& rng) {
    RelationParams p;
    p.mode = mode;
    p.source_width = relation_source_width(mode, cfg);
    const bool projected =
        mode == RelationMode::kConcat || mode == RelationMode::kSum || mode == RelationMode::kHadamard;
    if (projected) {
        for (int l = 0; l < cfg.n_layers; ++l) {
            p.w_subj.push_back(make_weight(ps, "relation.src" + std::to_string(l) + ".ws",
                                           cfg.d_model, cfg.d_model, rng));
            p.w_obj.push_back(make_weight(ps, "relation.src" + std::to_string(l) + ".wo",
                                          cfg.d_model, cfg.d_model, rng));
        }
        p.w_subj.push_back(make_weight(ps, "relation.srcz.ws", cfg.d_model, cfg.d_model, rng));
        p.w_obj.push_back(make_weight(ps, "relation.srcz.wo", cfg.d_model, cfg.d_model, rng));
    }
    const int w = p.source_width;
    p.w_gate = make_weight(ps, "relation.gate.w", w, 1, rng);
    p.mlp_rel1 = make_linear(ps, "relation.mlp_rel1", w, w, rng);
    p.mlp_rel2 = make_linear(ps, "relation.mlp_rel2", w, w, rng);
    p.mlp_rel3 = make_linear(ps, "relation.mlp_rel3", w, cfg.n_predicates, rng);
    p.mlp_con1 = make_linear(ps, "relation.mlp_con1", w, w, rng);
    p.mlp_con2 = make_linear(ps, "relation.mlp_con2", w, w, rng);
    p.mlp_con3 = make_linear(ps, "relation.mlp_con3", w, 1, rng);
    return p;
}

// per-head dot sources from the recorded traces; pre- or post-softmax
inline Ten dot_sources(const Ten& q, const Ten& k, const DecoderConfig& cfg, bool post_softmax) {
    const int n = q->dim(0), dh = cfg.d_head();
    Ten cols;
    for (int h = 0; h < cfg.n_heads; ++h) {
        Ten qh = slice_cols(q, h * dh, (h + 1) * dh);
        Ten kh = slice_cols(k, h * dh, (h + 1) * dh);
        Ten scores = scale(matmul(qh, transpose2d(kh)), 1.0 / std::sqrt(dh));
        if (post_softmax) scores = softmax_lastdim(scores);
        Ten col = reshape(scores, {n * n, 1});
        cols = cols ? concat_cols(cols, col) : col;
    }
    return cols;
}

// one source per decoder layer (from recorded Q/K), plus one from Z^L
inline std::vector<Ten> relation_sources(const DetectorOutput& det, const RelationParams& p,
                                         const DecoderConfig& cfg) {
    std::vector<Ten> sources;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const Ten& q = det.trace_q[static_cast<size_t>(l)];
        const Ten& k = det.trace_k[static_cast<size_t>(l)];
        switch (p.mode) {
            case RelationMode::kConcat:
                sources.push_back(pairwise_concat(matmul(q, p.w_subj[static_cast<size_t>(l)]),
                                                  matmul(k, p.w_obj[static_cast<size_t>(l)])));
                break;
            case RelationMode::kSum:
                sources.push_back(pairwise_combine(matmul(q, p.w_subj[static_cast<size_t>(l)]),
                                                   matmul(k, p.w_obj[static_cast<size_t>(l)]), false));
                break;
            case RelationMode::kHadamard:
                sources.push_back(pairwise_combine(matmul(q, p.w_subj[static_cast<size_t>(l)]),
                                                   matmul(k, p.w_obj[static_cast<size_t>(l)]), true));
                break;
            case RelationMode::kDot:
                sources.push_back(dot_sources(q, k, cfg, false));
                break;
            case RelationMode::kDotAttn:
                sources.push_back(dot_sources(q, k, cfg, true));
                break;
        }
    }
    const size_t zi = static_cast<size_t>(cfg.n_layers);
    switch (p.mode) {
        case RelationMode::kConcat:
            sources.push_back(pairwise_concat(matmul(det.z_final, p.w_subj[zi]),
                                              matmul(det.z_final, p.w_obj[zi])));
            break;
        case RelationMode::kSum:
            sources.push_back(pairwise_combine(matmul(det.z_final, p.w_subj[zi]),
                                               matmul(det.z_final, p.w_obj[zi]), false));
            break;
        case RelationMode::kHadamard:
            sources.push_back(pairwise_combine(matmul(det.z_final, p.w_subj[zi]),
                                               matmul(det.z_final, p.w_obj[zi]), true));
            break;
        case RelationMode::kDot:
            sources.push_back(dot_sources(det.z_final, det.z_final, cfg, false));
            break;
        case RelationMode::kDotAttn:
            sources.push_back(dot_sources(det.z_final, det.z_final, cfg, true));
            break;
    }
    return sources;
}

// out = sum_l sigma(R_l W_G) * R_l; gate broadcast over the source width
inline Ten gated_fuse(const std::vector<Ten>& sources, const Ten& w_gate,
                      std::vector<Ten>* gates_out = nullptr) {
    if (sources.empty()) fatal("gated_fuse: no sources");
    Ten acc;
    for (const auto& src : sources) {
        Ten gate = sigmoid(matmul(src, w_gate));
        if (gates_out) gates_out->push_back(gate);
        Ten term = mul_lastdim_broadcast(src, gate);
        acc = acc ? add(acc, term) : term;
    }
    return acc;
}

struct RelationOutput {
    Ten rel_logits;  // (N*N) x |C_p|
    Ten con_logits;  // (N*N) x 1
    Ten rel_graph;   // sigmoid(rel_logits)
    Ten con_graph;   // sigmoid(con_logits)
    std::vector<Ten> gates;  // L+1 entries, (N*N) x 1 each
};

inline Ten mlp3(const Linear& l1, const Linear& l2, const Linear& l3, const Ten& x) {
    return linear(l3, relu(linear(l2, relu(linear(l1, x)))));
}

inline RelationOutput relation_forward(const DetectorOutput& det, const RelationParams& p,
                                       const DecoderConfig& cfg) {
    RelationOutput out;
    auto sources = relation_sources(det, p, cfg);
    Ten fused = gated_fuse(sources, p.w_gate, &out.gates);
    out.rel_logits = mlp3(p.mlp_rel1, p.mlp_rel2, p.mlp_rel3, fused);
    out.con_logits = mlp3(p.mlp_con1, p.mlp_con2, p.mlp_con3, fused);
    out.rel_graph = sigmoid(out.rel_logits);
    out.con_graph = sigmoid(out.con_logits);
    return out;
}

// ---- inference scoring --------------------------------------------------

struct ScoredTriplet {
    int subj = 0, pred = 0, obj = 0;
    double score = 0.0;
};

// score(i,j,k) = G_ijk * E_ij * p_i(c_i*) * p_j(c_j*); diagonal forced to 0.
// c* is the argmax over non-phi classes. Sorted descending, ties by (i,j,k).
inline std::vector<ScoredTriplet> inference_score(const std::vector<double>& rel_graph,
                                                  const std::vector<double>& con_graph,
                                                  const std::vector<double>& class_probs,
                                                  int n, int n_pred, int n_cls,
                                                  bool use_connectivity = true) {
    std::vector<int> best_cls(static_cast<size_t>(n), 0);
    std::vector<double> best_p(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i) {
        const double* row = class_probs.data() + static_cast<size_t>(i) * (n_cls + 1);
        int bc = 0;
        for (int c = 1; c < n_cls; ++c)
            if (row[c] > row[bc]) bc = c;
        best_cls[static_cast<size_t>(i)] = bc;
        best_p[static_cast<size_t>(i)] = row[bc];
    }
    std::vector<ScoredTriplet> out;
    out.reserve(static_cast<size_t>(n) * n * n_pred);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            if (i == j) continue;
            const double e = use_connectivity ? con_graph[static_cast<size_t>(i) * n + j] : 1.0;
            const double pij = best_p[static_cast<size_t>(i)] * best_p[static_cast<size_t>(j)];
            for (int k = 0; k < n_pred; ++k)
                out.push_back({i, k, j,
                               rel_graph[(static_cast<size_t>(i) * n + j) * n_pred + k] * e * pij});
        }
    std::stable_sort(out.begin(), out.end(), [](const ScoredTriplet& a, const ScoredTriplet& b) {
        if (a.score != b.score) return a.score > b.score;
        return std::tie(a.subj, a.obj, a.pred) < std::tie(b.subj, b.obj, b.pred);
    });
    return out;
}

}  // namespace egtr

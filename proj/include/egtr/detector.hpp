// DETR-style decoder over learned object queries. Records the full-width
// self-attention queries/keys of every layer for the relation head.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "egtr/optim.hpp"
#include "egtr/scene.hpp"
#include "egtr/tensor.hpp"

namespace egtr {

struct DecoderConfig {
    int n_queries = 16;
    int n_layers = 3;
    int d_model = 64;
    int n_heads = 4;
    int d_ffn = 128;
    int n_categories = 6;
    int n_predicates = 5;

    int d_head() const { return d_model / n_heads; }
    int phi_class() const { return n_categories; }  // "no object" softmax slot
    void validate() const {
        if (d_model % n_heads != 0) fatal("DecoderConfig: d_model not divisible by n_heads");
        if (n_queries < 1 || n_layers < 1) fatal("DecoderConfig: invalid sizes");
    }
};

struct Linear {
    Ten w, b;
};

inline Linear make_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.w = ps.add(name + ".w", tensor({in, out}));
    l.b = ps.add(name + ".b", tensor({1, out}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (auto& v : l.w->data) v = rng.uniform(-bound, bound);
    return l;
}

inline Ten linear(const Linear& l, const Ten& x) { return add(matmul(x, l.w), l.b); }

struct AttentionBlock {
    Linear wq, wk, wv, wo;
    Ten ln_g, ln_b;
};

struct DecoderLayerParams {
    AttentionBlock self_attn;
    AttentionBlock cross_attn;
    Linear ffn1, ffn2;
    Ten ffn_ln_g, ffn_ln_b;
};

struct DetectorParams {
    Ten query_embed;  // N x d_model, the decoder input
    Linear mem_proj;  // d_enc -> d_model
    std::vector<DecoderLayerParams> layers;
    Linear class_head;
    Linear box_head1, box_head2, box_head3;
};

inline Ten add_ln(ParamStore& ps, const std::string& name, int d, bool ones) {
    Ten t = ps.add(name, tensor({1, d}));
    if (ones) std::fill(t->data.begin(), t->data.end(), 1.0);
    return t;
}

inline AttentionBlock make_attention(ParamStore& ps, const std::string& prefix, int d, Rng& rng) {
    AttentionBlock a;
    a.wq = make_linear(ps, prefix + ".wq", d, d, rng);
    a.wk = make_linear(ps, prefix + ".wk", d, d, rng);
    a.wv = make_linear(ps, prefix + ".wv", d, d, rng);
    a.wo = make_linear(ps, prefix + ".wo", d, d, rng);
    a.ln_g = add_ln(ps, prefix + ".ln.g", d, true);
    a.ln_b = add_ln(ps, prefix + ".ln.b", d, false);
    return a;
}

inline DetectorParams make_detector(ParamStore& ps, const DecoderConfig& cfg, int d_enc,
                                    Rng& rng) {
    cfg.validate();
    DetectorParams p;
    p.query_embed = ps.add("detector.query_embed", tensor({cfg.n_queries, cfg.d_model}));
    for (auto& v : p.query_embed->data) v = rng.gaussian();
    p.mem_proj = make_linear(ps, "detector.mem_proj", d_enc, cfg.d_model, rng);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "detector.layer" + std::to_string(l);
        DecoderLayerParams lp;
        lp.self_attn = make_attention(ps, pre + ".self", cfg.d_model, rng);
        lp.cross_attn = make_attention(ps, pre + ".cross", cfg.d_model, rng);
        lp.ffn1 = make_linear(ps, pre + ".ffn1", cfg.d_model, cfg.d_ffn, rng);
        lp.ffn2 = make_linear(ps, pre + ".ffn2", cfg.d_ffn, cfg.d_model, rng);
        lp.ffn_ln_g = add_ln(ps, pre + ".ffn.ln.g", cfg.d_model, true);
        lp.ffn_ln_b = add_ln(ps, pre + ".ffn.ln.b", cfg.d_model, false);
        p.layers.push_back(lp);
    }
    p.class_head = make_linear(ps, "detector.class_head", cfg.d_model, cfg.n_categories + 1, rng);
    p.box_head1 = make_linear(ps, "detector.box_head1", cfg.d_model, cfg.d_model, rng);
    p.box_head2 = make_linear(ps, "detector.box_head2", cfg.d_model, cfg.d_model, rng);
    p.box_head3 = make_linear(ps, "detector.box_head3", cfg.d_model, 4, rng);
    return p;
}

// fixed 2-D sinusoidal encodings for the memory grid, d_model channels
inline Ten positional_encoding(int h, int w, int d_model) {
    auto pe = tensor({h * w, d_model});
    const int half = d_model / 2;
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            double* row = pe->data.data() + (static_cast<size_t>(r) * w + c) * d_model;
            const double y = (r + 0.5) / h, x = (c + 0.5) / w;
            for (int k = 0; k < half / 2; ++k) {
                const double freq = std::pow(10000.0, -2.0 * k / half);
                row[2 * k] = std::sin(x * 2.0 * M_PI * freq * 4.0);
                row[2 * k + 1] = std::cos(x * 2.0 * M_PI * freq * 4.0);
                row[half + 2 * k] = std::sin(y * 2.0 * M_PI * freq * 4.0);
                row[half + 2 * k + 1] = std::cos(y * 2.0 * M_PI * freq * 4.0);
            }
        }
    return pe;
}

struct DetectorOutput {
    std::vector<Ten> trace_q, trace_k;       // per layer, N x d_model, pre head-split
    std::vector<std::vector<Ten>> self_attn;  // [layer][head], N x N post-softmax
    Ten z_final;       // N x d_model
    Ten class_logits;  // N x (|C_v|+1)
    Ten boxes;         // N x 4 in (0,1)
};

// multi-head attention; records full-width q/k projections of the query side
inline Ten multi_head_attention(const AttentionBlock& blk, const Ten& x_q, const Ten& x_kv,
                                int n_heads, Ten* rec_q, Ten* rec_k,
                                std::vector<Ten>* rec_attn) {
    const int d = x_q->dim(1);
    const int dh = d / n_heads;
    Ten q = linear(blk.wq, x_q);
    Ten k = linear(blk.wk, x_kv);
    Ten v = linear(blk.wv, x_kv);
    if (rec_q) *rec_q = q;
    if (rec_k) *rec_k = k;
    Ten heads;
    for (int h = 0; h < n_heads; ++h) {
        Ten qh = slice_cols(q, h * dh, (h + 1) * dh);
        Ten kh = slice_cols(k, h * dh, (h + 1) * dh);
        Ten vh = slice_cols(v, h * dh, (h + 1) * dh);
        Ten attn = softmax_lastdim(scale(matmul(qh, transpose2d(kh)), 1.0 / std::sqrt(dh)));
        if (rec_attn) rec_attn->push_back(attn);
        Ten oh = matmul(attn, vh);
        heads = heads ? concat_cols(heads, oh) : oh;
    }
    return linear(blk.wo, heads);
}

// post-norm residual blocks: x = LN(x + sublayer(x))
inline DetectorOutput decode(const EncoderMemory& memory, const DetectorParams& p,
                             const DecoderConfig& cfg) {
    auto mem_feat = tensor_from({memory.h * memory.w, memory.d_enc}, memory.features);
    Ten mem = linear(p.mem_proj, mem_feat);
    Ten pe = positional_encoding(memory.h, memory.w, cfg.d_model);
    Ten mem_pos = add(mem, pe);  // keys carry positions, values stay plain

    DetectorOutput out;
    Ten z = p.query_embed;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = p.layers[static_cast<size_t>(l)];
        Ten q_rec, k_rec;
        std::vector<Ten> attn_rec;
        Ten sa = multi_head_attention(lp.self_attn, z, z, cfg.n_heads, &q_rec, &k_rec, &attn_rec);
        out.trace_q.push_back(q_rec);
        out.trace_k.push_back(k_rec);
        out.self_attn.push_back(attn_rec);
        z = layer_norm_rows(add(z, sa), lp.self_attn.ln_g, lp.self_attn.ln_b);

        // cross-attention keys see memory + positional encodings
        Ten q2 = linear(lp.cross_attn.wq, z);
        Ten k2 = linear(lp.cross_attn.wk, mem_pos);
        Ten v2 = linear(lp.cross_attn.wv, mem);
        const int dh = cfg.d_head();
        Ten heads;
        for (int h = 0; h < cfg.n_heads; ++h) {
            Ten qh = slice_cols(q2, h * dh, (h + 1) * dh);
            Ten kh = slice_cols(k2, h * dh, (h + 1) * dh);
            Ten vh = slice_cols(v2, h * dh, (h + 1) * dh);
            Ten attn = softmax_lastdim(scale(matmul(qh, transpose2d(kh)), 1.0 / std::sqrt(dh)));
            Ten oh = matmul(attn, vh);
            heads = heads ? concat_cols(heads, oh) : oh;
        }
        Ten ca = linear(lp.cross_attn.wo, heads);
        z = layer_norm_rows(add(z, ca), lp.cross_attn.ln_g, lp.cross_attn.ln_b);

        Ten ff = linear(lp.ffn2, relu(linear(lp.ffn1, z)));
        z = layer_norm_rows(add(z, ff), lp.ffn_ln_g, lp.ffn_ln_b);
    }
    out.z_final = z;
    out.class_logits = linear(p.class_head, z);
    out.boxes = sigmoid(
        linear(p.box_head3, relu(linear(p.box_head2, relu(linear(p.box_head1, z))))));
    return out;
}

}  // namespace egtr

// AdamW with decoupled weight decay, a named parameter registry, and the
// checkpoint format (JSON manifest + one little-endian float64 blob).
#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "egtr/tensor.hpp"

namespace egtr {

struct ParamStore {
    std::vector<std::string> names;  // insertion order, drives blob layout
    std::map<std::string, Ten> by_name;

    Ten add(const std::string& name, Ten t) {
        if (by_name.count(name)) fatal("ParamStore: duplicate parameter " + name);
        t->requires_grad = true;
        names.push_back(name);
        by_name[name] = t;
        return t;
    }
    Ten get(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) fatal("ParamStore: unknown parameter " + name);
        return it->second;
    }
    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& nm : names) n += by_name.at(nm)->numel();
        return n;
    }
    void zero_grad() {
        for (const auto& nm : names) {
            Ten t = by_name.at(nm);
            t->grad.assign(t->data.size(), 0.0);
        }
    }
};

// rescale all gradients so their global L2 norm is at most max_norm;
// returns the pre-clip norm
inline double clip_grad_norm(ParamStore& params, double max_norm) {
    double sq = 0.0;
    for (const auto& name : params.names) {
        Ten p = params.by_name.at(name);
        p->ensure_grad();
        for (double g : p->grad) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& name : params.names)
            for (double& g : params.by_name.at(name)->grad) g *= s;
    }
    return norm;
}

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamW {
    AdamWConfig cfg;
    int64_t step_count = 0;
    std::map<std::string, std::vector<double>> m, v;

    explicit AdamW(const AdamWConfig& c) : cfg(c) {}

    void step(ParamStore& params) {
        ++step_count;
        const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
        const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
        for (const auto& name : params.names) {
            Ten p = params.by_name.at(name);
            p->ensure_grad();
            auto& mi = m[name];
            auto& vi = v[name];
            if (mi.size() != p->data.size()) mi.assign(p->data.size(), 0.0);
            if (vi.size() != p->data.size()) vi.assign(p->data.size(), 0.0);
            for (size_t i = 0; i < p->data.size(); ++i) {
                const double g = p->grad[i];
                mi[i] = cfg.beta1 * mi[i] + (1.0 - cfg.beta1) * g;
                vi[i] = cfg.beta2 * vi[i] + (1.0 - cfg.beta2) * g * g;
                const double mhat = mi[i] / bc1;
                const double vhat = vi[i] / bc2;
                // decoupled decay applies to the weight, not the gradient
                p->data[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) +
                                        cfg.weight_decay * p->data[i]);
            }
        }
    }
};

// ---- checkpoint ---------------------------------------------------------
// <stem>.json holds {"params": {name: {"shape": [...], "offset": bytes}}},
// <stem>.bin is the concatenated little-endian float64 data.

inline void save_checkpoint(const ParamStore& params, const std::string& stem) {
    nlohmann::json manifest;
    manifest["format"] = "egtr-checkpoint-v1";
    std::ofstream blob(stem + ".bin", std::ios::binary);
    if (!blob) fatal("save_checkpoint: cannot write " + stem + ".bin");
    int64_t offset = 0;
    for (const auto& name : params.names) {
        const Ten t = params.by_name.at(name);
        manifest["params"][name] = {{"shape", t->shape}, {"offset", offset}};
        static_assert(sizeof(double) == 8);
        blob.write(reinterpret_cast<const char*>(t->data.data()),
                   static_cast<std::streamsize>(t->data.size() * 8));
        offset += t->numel() * 8;
    }
    blob.close();
    std::ofstream mf(stem + ".json");
    if (!mf) fatal("save_checkpoint: cannot write " + stem + ".json");
    mf << manifest.dump(2) << "\n";
}

inline void load_checkpoint(ParamStore& params, const std::string& stem) {
    std::ifstream mf(stem + ".json");
    if (!mf) fatal("load_checkpoint: cannot open " + stem + ".json");
    nlohmann::json manifest;
    mf >> manifest;
    std::ifstream blob(stem + ".bin", std::ios::binary);
    if (!blob) fatal("load_checkpoint: cannot open " + stem + ".bin");
    for (const auto& name : params.names) {
        if (!manifest["params"].contains(name))
            fatal("load_checkpoint: parameter missing from manifest: " + name);
        const auto& entry = manifest["params"][name];
        Ten t = params.by_name.at(name);
        const auto shape = entry["shape"].get<std::vector<int>>();
        if (shape != t->shape)
            fatal("load_checkpoint: shape mismatch for " + name + ": file " + shape_str(shape) +
                  " vs model " + shape_str(t->shape));
        blob.seekg(entry["offset"].get<int64_t>());
        blob.read(reinterpret_cast<char*>(t->data.data()),
                  static_cast<std::streamsize>(t->data.size() * 8));
        if (!blob) fatal("load_checkpoint: truncated blob reading " + name);
    }
}

}  // namespace egtr

// Procedural labeled scenes with geometric predicates, the rasterized
// encoder memory that stands in for an image backbone, and JSONL I/O.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "egtr/tensor.hpp"

namespace egtr {

struct Box {  // (cx, cy, w, h), all in [0,1]
    double cx = 0, cy = 0, w = 0, h = 0;
    double x0() const { return cx - w / 2; }
    double x1() const { return cx + w / 2; }
    double y0() const { return cy - h / 2; }
    double y1() const { return cy + h / 2; }
};

inline double box_iou(const Box& a, const Box& b) {
    const double ix = std::max(0.0, std::min(a.x1(), b.x1()) - std::max(a.x0(), b.x0()));
    const double iy = std::max(0.0, std::min(a.y1(), b.y1()) - std::max(a.y0(), b.y0()));
    const double inter = ix * iy;
    const double uni = a.w * a.h + b.w * b.h - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

struct SceneObject {
    int category = 0;
    Box box;
};

struct Triplet {
    int subj = 0, pred = 0, obj = 0;
    bool operator==(const Triplet& o) const {
        return subj == o.subj && pred == o.pred && obj == o.obj;
    }
    bool operator<(const Triplet& o) const {
        return std::tie(subj, pred, obj) < std::tie(o.subj, o.pred, o.obj);
    }
};

struct Scene {
    std::vector<SceneObject> objects;
    std::vector<Triplet> triplets;
};

// Predicate ids, fixed order. "above" means smaller y (image convention: y
// grows downward, so s is drawn above o). overlaps is symmetric and emitted
// both directions; near's geometric test is symmetric as well.
enum Predicate : int { kLeftOf = 0, kAbove = 1, kContains = 2, kOverlaps = 3, kNear = 4 };

struct SceneConfig {
    int n_categories = 6;
    int n_predicates = 5;
    int n_max = 8;
    double w_min = 0.05;
    double w_max = 0.35;
    double tau_overlap = 0.10;  // IoU threshold for "overlaps"
    double tau_near = 0.25;     // center-distance threshold for "near"
    int grid_h = 8;
    int grid_w = 8;
};

// Platform-stable uniforms: mt19937_64 bits mapped to [0,1) directly, no
// libstdc++ distribution objects.
struct Rng {
    std::mt19937_64 eng;
    explicit Rng(uint64_t seed) : eng(seed) {}
    double uniform() { return static_cast<double>(eng() >> 11) * (1.0 / 9007199254740992.0); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    int uniform_int(int n) { return static_cast<int>(eng() % static_cast<uint64_t>(n)); }
    double gaussian() {
        // Box-Muller, deterministic pairing
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
};

inline std::vector<Triplet> derive_triplets(const std::vector<SceneObject>& objects,
                                            const SceneConfig& cfg) {
    std::vector<Triplet> out;
    const int n = static_cast<int>(objects.size());
    for (int s = 0; s < n; ++s)
        for (int o = 0; o < n; ++o) {
            if (s == o) continue;
            const Box& a = objects[static_cast<size_t>(s)].box;
            const Box& b = objects[static_cast<size_t>(o)].box;
            if (a.x1() < b.x0()) out.push_back({s, kLeftOf, o});
            if (a.y1() < b.y0()) out.push_back({s, kAbove, o});
            if (a.x0() > b.x0() && a.x1() < b.x1() && a.y0() > b.y0() && a.y1() < b.y1())
                out.push_back({s, kContains, o});
            const double iou = box_iou(a, b);
            if (iou > cfg.tau_overlap) out.push_back({s, kOverlaps, o});
            const double dx = a.cx - b.cx, dy = a.cy - b.cy;
            if (std::sqrt(dx * dx + dy * dy) < cfg.tau_near && iou <= cfg.tau_overlap)
                out.push_back({s, kNear, o});
        }
    // n_predicates < 5 keeps a prefix of the rule table (shrunk label spaces
    // for small test configs)
    if (cfg.n_predicates < 5) {
        std::erase_if(out, [&](const Triplet& t) { return t.pred >= cfg.n_predicates; });
    }
    return out;
}

inline Scene generate_scene(uint64_t seed, const SceneConfig& cfg) {
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + 1);
    Scene scene;
    const int n_obj = 1 + rng.uniform_int(cfg.n_max);
    for (int i = 0; i < n_obj; ++i) {
        SceneObject obj;
        obj.category = rng.uniform_int(cfg.n_categories);
        bool placed = false;
        for (int attempt = 0; attempt < 64 && !placed; ++attempt) {
            Box b;
            b.w = rng.uniform(cfg.w_min, cfg.w_max);
            b.h = rng.uniform(cfg.w_min, cfg.w_max);
            b.cx = rng.uniform(b.w / 2, 1.0 - b.w / 2);
            b.cy = rng.uniform(b.h / 2, 1.0 - b.h / 2);
            if (b.w < cfg.w_min || b.h < cfg.w_min) continue;
            obj.box = b;
            placed = true;
        }
        if (placed) scene.objects.push_back(obj);
    }
    scene.triplets = derive_triplets(scene.objects, cfg);
    return scene;
}

// ---- rasterizer ---------------------------------------------------------

struct EncoderMemory {
    int h = 0, w = 0, d_enc = 0;
    std::vector<double> features;  // (h*w) x d_enc row-major
};

inline int memory_feature_dim(const SceneConfig& cfg) {
    return cfg.n_categories + 3;  // per-category coverage + total + cell (cx, cy)
}

inline EncoderMemory rasterize(const Scene& scene, const SceneConfig& cfg) {
    EncoderMemory mem;
    mem.h = cfg.grid_h;
    mem.w = cfg.grid_w;
    mem.d_enc = memory_feature_dim(cfg);
    mem.features.assign(static_cast<size_t>(mem.h) * mem.w * mem.d_enc, 0.0);
    const double cell_w = 1.0 / mem.w, cell_h = 1.0 / mem.h;
    for (int r = 0; r < mem.h; ++r)
        for (int c = 0; c < mem.w; ++c) {
            double* feat = mem.features.data() + (static_cast<size_t>(r) * mem.w + c) * mem.d_enc;
            const double cx0 = c * cell_w, cx1 = (c + 1) * cell_w;
            const double cy0 = r * cell_h, cy1 = (r + 1) * cell_h;
            for (const auto& obj : scene.objects) {
                const Box& b = obj.box;
                const double ix = std::max(0.0, std::min(cx1, b.x1()) - std::max(cx0, b.x0()));
                const double iy = std::max(0.0, std::min(cy1, b.y1()) - std::max(cy0, b.y0()));
                feat[obj.category] += (ix * iy) / (cell_w * cell_h);
            }
            double total = 0.0;
            for (int k = 0; k < cfg.n_categories; ++k) {
                feat[k] = std::min(1.0, feat[k]);
                total += feat[k];
            }
            feat[cfg.n_categories] = std::min(1.0, total);
            feat[cfg.n_categories + 1] = (c + 0.5) * cell_w;
            feat[cfg.n_categories + 2] = (r + 0.5) * cell_h;
        }
    return mem;
}

// ---- JSONL dataset ------------------------------------------------------

inline nlohmann::json scene_to_json(const Scene& scene) {
    nlohmann::json j;
    j["objects"] = nlohmann::json::array();
    for (const auto& o : scene.objects)
        j["objects"].push_back(
            {{"category", o.category}, {"box", {o.box.cx, o.box.cy, o.box.w, o.box.h}}});
    j["triplets"] = nlohmann::json::array();
    for (const auto& t : scene.triplets) j["triplets"].push_back({t.subj, t.pred, t.obj});
    return j;
}

inline Scene scene_from_json(const nlohmann::json& j, const SceneConfig& cfg) {
    Scene scene;
    for (const auto& jo : j.at("objects")) {
        SceneObject o;
        o.category = jo.at("category").get<int>();
        if (o.category < 0 || o.category >= cfg.n_categories)
            fatal("scene: category out of range: " + std::to_string(o.category));
        const auto& b = jo.at("box");
        if (b.size() != 4) fatal("scene: box must have 4 coordinates");
        o.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        scene.objects.push_back(o);
    }
    std::set<Triplet> seen;
    for (const auto& jt : j.at("triplets")) {
        Triplet t{jt[0].get<int>(), jt[1].get<int>(), jt[2].get<int>()};
        const int n = static_cast<int>(scene.objects.size());
        if (t.subj < 0 || t.subj >= n || t.obj < 0 || t.obj >= n)
            fatal("scene: triplet object index out of range");
        if (t.pred < 0 || t.pred >= cfg.n_predicates)
            fatal("scene: predicate out of range: " + std::to_string(t.pred));
        if (t.subj == t.obj) fatal("scene: self-loop triplet");
        if (!seen.insert(t).second) fatal("scene: duplicate triplet");
        scene.triplets.push_back(t);
    }
    return scene;
}

inline void save_dataset(const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream f(path);
    if (!f) fatal("save_dataset: cannot write " + path);
    for (const auto& s : scenes) f << scene_to_json(s).dump() << "\n";
}

inline std::vector<Scene> load_dataset(const std::string& path, const SceneConfig& cfg) {
    std::ifstream f(path);
    if (!f) fatal("load_dataset: cannot open " + path);
    std::vector<Scene> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            out.push_back(scene_from_json(nlohmann::json::parse(line), cfg));
        } catch (const std::exception& e) {
            fatal("load_dataset: " + path + " line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace egtr

// Run configuration: one flat key set covering scene generation, the model,
// the losses, and the training loop. Unknown keys are rejected and every key
// has a default.
#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "egtr/detector.hpp"
#include "egtr/losses.hpp"
#include "egtr/relation.hpp"
#include "egtr/scene.hpp"

namespace egtr {

struct RunConfig {
    // scenes
    int n_categories = 6;
    int n_predicates = 5;
    int n_max = 8;
    double w_min = 0.05;
    double w_max = 0.35;
    double tau_overlap = 0.10;
    double tau_near = 0.25;
    int grid = 8;
    // model
    int n_queries = 16;
    int layers = 3;
    int d_model = 64;
    int heads = 4;
    int d_ffn = 128;
    std::string relation_mode = "concat";
    // loss
    double lambda_rel = 15.0;
    double lambda_con = 30.0;
    double alpha = 1e-14;
    int k_neg = 80;
    int k_non = 80;
    // training
    double lr = 1e-3;
    double grad_clip = 1.0;  // global L2 norm; <= 0 disables
    double weight_decay = 1e-4;
    uint64_t seed = 0;
    int max_steps = 20000;
    int batch_size = 4;
    int val_interval = 500;
    int plateau_patience = 4;
    int max_lr_drops = 2;

    SceneConfig scene_config() const {
        SceneConfig s;
        s.n_categories = n_categories;
        s.n_predicates = n_predicates;
        s.n_max = n_max;
        s.w_min = w_min;
        s.w_max = w_max;
        s.tau_overlap = tau_overlap;
        s.tau_near = tau_near;
        s.grid_h = grid;
        s.grid_w = grid;
        return s;
    }
    DecoderConfig decoder_config() const {
        DecoderConfig d;
        d.n_queries = n_queries;
        d.n_layers = layers;
        d.d_model = d_model;
        d.n_heads = heads;
        d.d_ffn = d_ffn;
        d.n_categories = n_categories;
        d.n_predicates = n_predicates;
        return d;
    }
    LossWeights loss_weights() const {
        LossWeights w;
        w.lambda_rel = lambda_rel;
        w.lambda_con = lambda_con;
        w.alpha = alpha;
        w.k_neg = k_neg;
        w.k_non = k_non;
        return w;
    }

    // All problems are reported at once.
    std::vector<std::string> validate() const {
        std::vector<std::string> errs;
        if (n_categories < 1) errs.push_back("n_categories must be >= 1");
        if (n_predicates < 1) errs.push_back("n_predicates must be >= 1");
        if (n_max < 1) errs.push_back("n_max must be >= 1");
        if (n_queries < n_max) errs.push_back("n_queries must be >= n_max");
        if (d_model % heads != 0) errs.push_back("d_model must be divisible by heads");
        if (!(alpha > 0.0 && alpha < 1.0)) errs.push_back("alpha must be in (0,1)");
        if (lr <= 0.0) errs.push_back("lr must be positive");
        if (max_steps < 1) errs.push_back("max_steps must be >= 1");
        if (batch_size < 1) errs.push_back("batch_size must be >= 1");
        if (k_neg < 0 || k_non < 0) errs.push_back("k_neg/k_non must be >= 0");
        if (w_min <= 0.0 || w_min >= w_max || w_max > 1.0)
            errs.push_back("need 0 < w_min < w_max <= 1");
        try {
            relation_mode_from_string(relation_mode);
        } catch (const std::exception&) {
            errs.push_back("relation_mode must be one of concat|sum|hadamard|dot|dot-attn");
        }
        return errs;
    }

    nlohmann::json to_json() const {
        return {{"n_categories", n_categories}, {"n_predicates", n_predicates},
                {"n_max", n_max},               {"w_min", w_min},
                {"w_max", w_max},               {"tau_overlap", tau_overlap},
                {"tau_near", tau_near},         {"grid", grid},
                {"n_queries", n_queries},       {"layers", layers},
                {"d_model", d_model},           {"heads", heads},
                {"d_ffn", d_ffn},               {"relation_mode", relation_mode},
                {"lambda_rel", lambda_rel},     {"lambda_con", lambda_con},
                {"alpha", alpha},               {"k_neg", k_neg},
                {"k_non", k_non},               {"lr", lr},
                {"grad_clip", grad_clip},       {"weight_decay", weight_decay},
                {"seed", seed},
                {"max_steps", max_steps},       {"batch_size", batch_size},
                {"val_interval", val_interval}, {"plateau_patience", plateau_patience},
                {"max_lr_drops", max_lr_drops}};
    }
};

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    const std::set<std::string> known = {
        "n_categories", "n_predicates", "n_max", "w_min", "w_max", "tau_overlap", "tau_near",
        "grid", "n_queries", "layers", "d_model", "heads", "d_ffn", "relation_mode",
        "lambda_rel", "lambda_con", "alpha", "k_neg", "k_non", "lr", "grad_clip",
        "weight_decay", "seed",
        "max_steps", "batch_size", "val_interval", "plateau_patience", "max_lr_drops"};
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) fatal("config: unknown key: " + key);
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k)) field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("n_categories", c.n_categories);
    get("n_predicates", c.n_predicates);
    get("n_max", c.n_max);
    get("w_min", c.w_min);
    get("w_max", c.w_max);
    get("tau_overlap", c.tau_overlap);
    get("tau_near", c.tau_near);
    get("grid", c.grid);
    get("n_queries", c.n_queries);
    get("layers", c.layers);
    get("d_model", c.d_model);
    get("heads", c.heads);
    get("d_ffn", c.d_ffn);
    get("relation_mode", c.relation_mode);
    get("lambda_rel", c.lambda_rel);
    get("lambda_con", c.lambda_con);
    get("alpha", c.alpha);
    get("k_neg", c.k_neg);
    get("k_non", c.k_non);
    get("lr", c.lr);
    get("grad_clip", c.grad_clip);
    get("weight_decay", c.weight_decay);
    get("seed", c.seed);
    get("max_steps", c.max_steps);
    get("batch_size", c.batch_size);
    get("val_interval", c.val_interval);
    get("plateau_patience", c.plateau_patience);
    get("max_lr_drops", c.max_lr_drops);
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) fatal("config: cannot open " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        fatal("config: " + path + ": " + e.what());
    }
    return config_from_json(j);
}

}  // namespace egtr

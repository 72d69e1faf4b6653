// egtr command-line front end: data generation, training, evaluation,
// gradient auditing, ablation grids, and gate analysis. Machine output
// (JSON/CSV) goes to stdout and files; progress logs go to stderr.
// Exit codes: 0 ok, 1 validation error, 2 runtime failure.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include <CLI11.hpp>

#include "egtr/config.hpp"
#include "egtr/eval.hpp"
#include "egtr/model.hpp"
#include "egtr/train.hpp"

namespace fs = std::filesystem;
using namespace egtr;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

[[noreturn]] void die_validation(const std::string& msg) {
    std::cerr << "error: " << msg << "\n";
    std::exit(kExitValidation);
}

RunConfig load_run_config(const std::string& path) {
    RunConfig cfg = path.empty() ? RunConfig{} : load_config(path);
    auto errs = cfg.validate();
    if (!errs.empty()) {
        for (const auto& e : errs) std::cerr << "config error: " << e << "\n";
        std::exit(kExitValidation);
    }
    return cfg;
}

std::vector<Scene> generate_split(uint64_t base_seed, int n, const SceneConfig& scfg) {
    std::vector<Scene> out;
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        out.push_back(generate_scene(base_seed + static_cast<uint64_t>(i), scfg));
    return out;
}

// data dir layout written by gen-data; a bare .jsonl path is also accepted
std::string split_path(const std::string& data, const char* split) {
    if (fs::is_directory(data)) return (fs::path(data) / (std::string(split) + ".jsonl")).string();
    return data;
}

int cmd_gen_data(uint64_t seed, int n_train, int n_val, int n_test, const std::string& out,
                 const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    const SceneConfig scfg = cfg.scene_config();
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) {
        std::cerr << "error: cannot create " << out << ": " << ec.message() << "\n";
        return kExitRuntime;
    }
    uint64_t next = seed;
    const char* names[] = {"train", "val", "test"};
    const int counts[] = {n_train, n_val, n_test};
    for (int s = 0; s < 3; ++s) {
        auto scenes = generate_split(next, counts[s], scfg);
        next += static_cast<uint64_t>(counts[s]);
        try {
            save_dataset(scenes, (fs::path(out) / (std::string(names[s]) + ".jsonl")).string());
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kExitRuntime;
        }
        std::cerr << names[s] << ": " << counts[s] << " scenes\n";
    }
    nlohmann::json manifest = {{"seed", seed},
                               {"n_train", n_train},
                               {"n_val", n_val},
                               {"n_test", n_test},
                               {"config", cfg.to_json()}};
    std::ofstream mf(fs::path(out) / "manifest.json");
    if (!mf) {
        std::cerr << "error: cannot write manifest\n";
        return kExitRuntime;
    }
    mf << manifest.dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& data, const std::string& out) {
    RunConfig cfg = load_run_config(config_path);
    const SceneConfig scfg = cfg.scene_config();
    auto train_set = load_dataset(split_path(data, "train"), scfg);
    auto val_set = load_dataset(split_path(data, "val"), scfg);
    Model model = build_model(cfg.decoder_config(), scfg,
                              relation_mode_from_string(cfg.relation_mode), cfg.seed);
    fs::create_directories(out);
    std::ofstream val_log(fs::path(out) / "val_metrics.jsonl");
    TrainCallbacks cb;
    cb.on_step = [&](int step, double loss, double lr) {
        if (step % 100 == 0)
            std::cerr << "step " << step << " loss " << loss << " lr " << lr << "\n";
    };
    cb.on_validate = [&](int step, const MetricsReport& rep) {
        nlohmann::json j = metrics_to_json(rep);
        j["step"] = step;
        val_log << j.dump() << "\n";
        val_log.flush();
        std::cerr << "validate step " << step << " R@20 " << rep.recall.at(20) << "\n";
    };
    TrainResult res = train(model, cfg, train_set, val_set, out, cb);
    nlohmann::json summary = {{"best_val_r20", res.best_val_r20},
                              {"best_step", res.best_step},
                              {"checkpoint", res.checkpoint_stem}};
    std::ofstream sf(fs::path(out) / "summary.json");
    sf << summary.dump(2) << "\n";
    std::cout << summary.dump() << "\n";
    return 0;
}

Model load_model_for_checkpoint(const std::string& checkpoint, const std::string& config_path) {
    std::string cpath = config_path;
    if (cpath.empty()) {
        const fs::path sibling = fs::path(checkpoint).parent_path() / "config.json";
        if (!fs::exists(sibling))
            die_validation("no --config given and " + sibling.string() + " not found");
        cpath = sibling.string();
    }
    RunConfig cfg = load_run_config(cpath);
    Model model = build_model(cfg.decoder_config(), cfg.scene_config(),
                              relation_mode_from_string(cfg.relation_mode), cfg.seed);
    load_checkpoint(model.params, checkpoint);
    return model;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::string& data, const std::string& mode, const std::string& out,
             bool no_connectivity) {
    Model model = load_model_for_checkpoint(checkpoint, config_path);
    auto scenes = load_dataset(split_path(data, "test"), model.scfg);
    MetricsReport rep =
        evaluate_model(model, scenes, eval_mode_from_string(mode), !no_connectivity);
    rep.mode = mode;
    nlohmann::json j = metrics_to_json(rep);
    std::cout << j.dump(2) << "\n";
    if (!out.empty()) {
        std::ofstream f(out);
        if (!f) {
            std::cerr << "error: cannot write " << out << "\n";
            return kExitRuntime;
        }
        f << j.dump(2) << "\n";
    }
    return 0;
}

int cmd_gradcheck(const std::string& config_path, double tolerance, int batch, uint64_t seed) {
    // default audit config is deliberately tiny: full finite differences over
    // every parameter are quadratic in model size
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    else {
        cfg.n_queries = 8;
        cfg.layers = 2;
        cfg.d_model = 16;
        cfg.heads = 2;
        cfg.d_ffn = 32;
        cfg.n_categories = 4;
        cfg.n_predicates = 3;
        cfg.n_max = 4;
    }
    const SceneConfig scfg = cfg.scene_config();
    Model model = build_model(cfg.decoder_config(), scfg,
                              relation_mode_from_string(cfg.relation_mode), seed);
    std::vector<Scene> scenes = generate_split(seed + 1000, batch, scfg);
    GradCheckResult res = gradcheck(model, scenes, cfg.loss_weights());
    nlohmann::json j = {{"max_rel_err", res.max_rel_err},
                        {"worst_param", res.worst_param},
                        {"worst_index", res.worst_index},
                        {"tolerance", tolerance}};
    std::cout << j.dump(2) << "\n";
    std::cerr << "worst: " << res.worst_param << "[" << res.worst_index << "] rel err "
              << res.max_rel_err << "\n";
    return res.max_rel_err < tolerance ? 0 : kExitRuntime;
}

// one ablation grid point: train a small model, return held-out R@20
double run_ablation_point(RunConfig cfg, bool use_connectivity_score,
                          const std::vector<Scene>& train_set, const std::vector<Scene>& val_set,
                          const std::vector<Scene>& test_set, const std::string& out_dir) {
    Model model = build_model(cfg.decoder_config(), cfg.scene_config(),
                              relation_mode_from_string(cfg.relation_mode), cfg.seed);
    train(model, cfg, train_set, val_set, out_dir);
    load_checkpoint(model.params, out_dir + "/checkpoint_best");
    MetricsReport rep =
        evaluate_model(model, test_set, EvalMode::kSgdet, use_connectivity_score);
    return rep.recall.at(20);
}

struct AblationRow {
    std::string name;
    RunConfig cfg;
    bool use_connectivity_score = true;
};

int cmd_ablate(const std::string& suite, const std::string& config_path, const std::string& out,
               int n_train, int n_val, int n_test) {
    RunConfig base = load_run_config(config_path);
    if (config_path.empty()) {
        // small-but-trainable default grid config so the suite finishes on CPU
        base.n_queries = 12;
        base.layers = 2;
        base.d_model = 32;
        base.heads = 2;
        base.d_ffn = 64;
        base.max_steps = 1500;
        base.val_interval = 500;
        base.batch_size = 4;
    }
    std::vector<AblationRow> rows;
    if (suite == "relation-fn") {
        for (const char* m : {"concat", "sum", "hadamard", "dot", "dot-attn"}) {
            AblationRow r;
            r.name = m;
            r.cfg = base;
            r.cfg.relation_mode = m;
            rows.push_back(r);
        }
    } else if (suite == "techniques") {
        // smoothing off: alpha -> 0 makes every GT target 1 (hard labels);
        // sampling off: budgets large enough to cover the whole regions;
        // connectivity off: loss weight 0 and score ignored at inference
        auto no_smooth = [](RunConfig& c) { c.alpha = 1e-300; };
        auto no_sample = [](RunConfig& c) { c.k_neg = c.k_non = 1000000; };
        auto no_con = [](RunConfig& c) { c.lambda_con = 0.0; };
        AblationRow none{"none", base, false};
        no_smooth(none.cfg);
        no_sample(none.cfg);
        no_con(none.cfg);
        AblationRow smooth{"smoothing", base, false};
        no_sample(smooth.cfg);
        no_con(smooth.cfg);
        AblationRow sample{"smoothing+sampling", base, false};
        no_con(sample.cfg);
        AblationRow con{"smoothing+connectivity", base, true};
        no_sample(con.cfg);
        AblationRow full{"full", base, true};
        rows = {none, smooth, sample, con, full};
    } else if (suite == "sampling") {
        for (int k : {5, 20, 80, 320}) {
            AblationRow r;
            r.name = "k=" + std::to_string(k);
            r.cfg = base;
            r.cfg.k_neg = r.cfg.k_non = k;
            rows.push_back(r);
        }
    } else {
        die_validation("unknown suite: " + suite + " (relation-fn|techniques|sampling)");
    }

    fs::create_directories(out);
    const SceneConfig scfg = base.scene_config();
    const uint64_t data_seed = base.seed * 1000 + 1;
    auto train_set = generate_split(data_seed, n_train, scfg);
    auto val_set = generate_split(data_seed + static_cast<uint64_t>(n_train), n_val, scfg);
    auto test_set =
        generate_split(data_seed + static_cast<uint64_t>(n_train + n_val), n_test, scfg);

    struct Result {
        std::string name;
        double mean;
        std::vector<double> per_seed;
    };
    std::vector<Result> results;
    for (const auto& row : rows) {
        Result res{row.name, 0.0, {}};
        for (uint64_t s = 0; s < 3; ++s) {
            RunConfig cfg = row.cfg;
            cfg.seed = base.seed + s;
            const std::string dir =
                (fs::path(out) / (row.name + "_seed" + std::to_string(s))).string();
            std::cerr << "[" << suite << "] " << row.name << " seed " << s << "\n";
            const double r20 = run_ablation_point(cfg, row.use_connectivity_score, train_set,
                                                  val_set, test_set, dir);
            res.per_seed.push_back(r20);
            std::cerr << "  R@20 " << r20 << "\n";
        }
        res.mean = std::accumulate(res.per_seed.begin(), res.per_seed.end(), 0.0) / 3.0;
        results.push_back(res);
    }
    std::stable_sort(results.begin(), results.end(),
                     [](const Result& a, const Result& b) { return a.mean > b.mean; });
    std::ostringstream csv;
    csv << "rank,name,r20_mean,r20_seed0,r20_seed1,r20_seed2\n";
    csv << std::setprecision(17);
    for (size_t i = 0; i < results.size(); ++i)
        csv << i + 1 << "," << results[i].name << "," << results[i].mean << ","
            << results[i].per_seed[0] << "," << results[i].per_seed[1] << ","
            << results[i].per_seed[2] << "\n";
    std::cout << csv.str();
    std::ofstream cf(fs::path(out) / "results.csv");
    cf << csv.str();
    return 0;
}

int cmd_gates(const std::string& checkpoint, const std::string& config_path,
              const std::string& data) {
    Model model = load_model_for_checkpoint(checkpoint, config_path);
    auto scenes = load_dataset(split_path(data, "test"), model.scfg);
    if (scenes.empty()) die_validation("gates: empty dataset");
    const size_t n_sources = static_cast<size_t>(model.dcfg.n_layers) + 1;
    std::vector<double> sums(n_sources, 0.0);
    int64_t count = 0;
    for (const auto& scene : scenes) {
        auto fwd = forward_scene(model, rasterize(scene, model.scfg));
        for (size_t s = 0; s < n_sources; ++s)
            for (double g : fwd.rel.gates[s]->data) sums[s] += g;
        count += fwd.rel.gates[0]->numel();
    }
    std::cout << "source,mean_gate\n";
    for (size_t s = 0; s < n_sources; ++s) {
        const std::string name =
            s < n_sources - 1 ? "layer" + std::to_string(s) : std::string("final");
        const double mean = sums[s] / static_cast<double>(count);
        std::cout << name << "," << std::setprecision(17) << mean << "\n";
        std::cerr << name << ": mean gate " << std::setprecision(6) << mean << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"synthetic scene-graph model: data, training, evaluation"};
    app.require_subcommand(1);

    uint64_t seed = 0;
    int n_train = 2000, n_val = 200, n_test = 200;
    std::string out, config_path, data, checkpoint, mode = "sgdet", suite;
    double tolerance = 1e-4;
    int batch = 2;
    bool no_connectivity = false;

    auto* gen = app.add_subcommand("gen-data", "generate JSONL scene datasets");
    gen->add_option("--seed", seed);
    gen->add_option("--n-train", n_train);
    gen->add_option("--n-val", n_val);
    gen->add_option("--n-test", n_test);
    gen->add_option("--out", out)->required();
    gen->add_option("--config", config_path);

    auto* tr = app.add_subcommand("train", "train a model");
    tr->add_option("--config", config_path);
    tr->add_option("--data", data)->required();
    tr->add_option("--out", out)->required();

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--config", config_path);
    ev->add_option("--data", data)->required();
    ev->add_option("--mode", mode)->check(CLI::IsMember({"sgdet", "sgcls", "predcls"}));
    ev->add_option("--out", out);
    ev->add_flag("--no-connectivity", no_connectivity,
                 "ignore the connectivity score when ranking triplets");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    gc->add_option("--config", config_path);
    gc->add_option("--tolerance", tolerance);
    gc->add_option("--batch", batch);
    gc->add_option("--seed", seed);

    int ab_train = 300, ab_val = 60, ab_test = 60;
    auto* ab = app.add_subcommand("ablate", "run a named ablation grid (3 seeds each)");
    ab->add_option("--suite", suite)->required()
        ->check(CLI::IsMember({"relation-fn", "techniques", "sampling"}));
    ab->add_option("--config", config_path);
    ab->add_option("--out", out)->required();
    ab->add_option("--n-train", ab_train);
    ab->add_option("--n-val", ab_val);
    ab->add_option("--n-test", ab_test);

    auto* gt = app.add_subcommand("gates", "mean gate value per relation source");
    gt->add_option("--checkpoint", checkpoint)->required();
    gt->add_option("--config", config_path);
    gt->add_option("--data", data)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(seed, n_train, n_val, n_test, out, config_path);
        if (tr->parsed()) return cmd_train(config_path, data, out);
        if (ev->parsed())
            return cmd_eval(checkpoint, config_path, data, mode, out, no_connectivity);
        if (gc->parsed()) return cmd_gradcheck(config_path, tolerance, batch, seed);
        if (ab->parsed()) return cmd_ablate(suite, config_path, out, ab_train, ab_val, ab_test);
        if (gt->parsed()) return cmd_gates(checkpoint, config_path, data);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return 0;
}

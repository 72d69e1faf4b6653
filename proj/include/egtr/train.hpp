// Training loop: AdamW over summed scene losses, deterministic shuffling,
// plateau learning-rate drops, CSV loss curve, best-by-R@20 checkpointing.
#pragma once

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "egtr/config.hpp"
#include "egtr/model.hpp"
#include "egtr/optim.hpp"

namespace egtr {

struct TrainResult {
    double best_val_r20 = 0.0;
    int best_step = -1;
    std::string checkpoint_stem;  // best checkpoint, "<out>/checkpoint_best"
    std::vector<double> loss_curve;
};

struct TrainCallbacks {
    std::function<void(int, double, double)> on_step;  // step, loss, lr
    std::function<void(int, const MetricsReport&)> on_validate;
};

inline TrainResult train(Model& model, const RunConfig& cfg, const std::vector<Scene>& train_set,
                         const std::vector<Scene>& val_set, const std::string& out_dir,
                         const TrainCallbacks& cb = {}) {
    if (train_set.empty()) fatal("train: empty training set");
    std::filesystem::create_directories(out_dir);
    {
        std::ofstream cf(out_dir + "/config.json");
        cf << cfg.to_json().dump(2) << "\n";
    }
    std::ofstream curve(out_dir + "/loss_curve.csv");
    curve << "step,loss_od,loss_rel,loss_con,total,lr\n";
    curve << std::setprecision(17);

    std::vector<EncoderMemory> mems;
    mems.reserve(train_set.size());
    for (const auto& s : train_set) mems.push_back(rasterize(s, model.scfg));

    AdamWConfig acfg;
    acfg.lr = cfg.lr;
    acfg.weight_decay = cfg.weight_decay;
    AdamW opt(acfg);
    const LossWeights lw = cfg.loss_weights();

    Rng shuffle_rng(cfg.seed * 0xA24BAED4963EE407ULL + 7);
    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // triggers a shuffle on first use

    TrainResult result;
    result.checkpoint_stem = out_dir + "/checkpoint_best";
    int validations_since_best = 0;
    int lr_drops = 0;

    for (int step = 1; step <= cfg.max_steps; ++step) {
        Ten batch_loss;
        double od = 0, rl = 0, cn = 0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cursor >= order.size()) {
                // Fisher-Yates with the stable uniform source
                for (size_t i = order.size(); i > 1; --i)
                    std::swap(order[i - 1], order[static_cast<size_t>(shuffle_rng.uniform_int(
                                  static_cast<int>(i)))]);
                cursor = 0;
            }
            const size_t idx = order[cursor++];
            auto fwd = forward_scene(model, mems[idx]);
            auto frozen = prepare_targets(fwd.det, fwd.rel, train_set[idx], model.dcfg, lw);
            SceneLoss sl = total_loss(fwd.det, fwd.rel, train_set[idx], model.dcfg, lw, frozen);
            od += sl.od;
            rl += sl.rel;
            cn += sl.con;
            batch_loss = batch_loss ? add(batch_loss, sl.total) : sl.total;
        }
        batch_loss = scale(batch_loss, 1.0 / cfg.batch_size);
        const double loss_val = batch_loss->data[0];
        if (!std::isfinite(loss_val)) {
            std::ostringstream os;
            os << "train: non-finite loss at step " << step << " (od=" << od << " rel=" << rl
               << " con=" << cn << ")";
            fatal(os.str());
        }
        model.params.zero_grad();
        backward(batch_loss);
        if (cfg.grad_clip > 0.0) clip_grad_norm(model.params, cfg.grad_clip);
        opt.step(model.params);
        result.loss_curve.push_back(loss_val);
        curve << step << "," << od / cfg.batch_size << "," << rl / cfg.batch_size << ","
              << cn / cfg.batch_size << "," << loss_val << "," << opt.cfg.lr << "\n";
        if (cb.on_step) cb.on_step(step, loss_val, opt.cfg.lr);

        if (step % cfg.val_interval == 0 || step == cfg.max_steps) {
            MetricsReport rep = evaluate_model(model, val_set, EvalMode::kSgdet);
            if (cb.on_validate) cb.on_validate(step, rep);
            const double r20 = rep.recall.at(20);
            if (r20 > result.best_val_r20 || result.best_step < 0) {
                result.best_val_r20 = r20;
                result.best_step = step;
                validations_since_best = 0;
                save_checkpoint(model.params, result.checkpoint_stem);
            } else if (++validations_since_best >= cfg.plateau_patience &&
                       lr_drops < cfg.max_lr_drops) {
                opt.cfg.lr *= 0.1;
                ++lr_drops;
                validations_since_best = 0;
            }
        }
    }
    save_checkpoint(model.params, out_dir + "/checkpoint_last");
    return result;
}

}  // namespace egtr

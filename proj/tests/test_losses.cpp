#include <doctest.h>

#include <cmath>

#include "egtr/losses.hpp"
#include "egtr/model.hpp"

using namespace egtr;

namespace {

Scene make_scene(std::vector<SceneObject> objs, std::vector<Triplet> trips) {
    Scene s;
    s.objects = std::move(objs);
    s.triplets = std::move(trips);
    return s;
}

MatchResult identity_match(int m, double cost) {
    MatchResult r;
    for (int i = 0; i < m; ++i) {
        r.sigma.push_back(i);
        r.costs.push_back(cost);
    }
    r.cost_min = MatchWeights{}.cost_min();
    return r;
}

}  // namespace

TEST_CASE("giou_rows agrees with the scalar box oracle") {
    Rng rng(404);
    std::vector<double> flat;
    std::vector<Box> gt;
    std::vector<Box> pred;
    for (int i = 0; i < 12; ++i) {
        Box p{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
              rng.uniform(0.05, 0.3)};
        Box g{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.3),
              rng.uniform(0.05, 0.3)};
        pred.push_back(p);
        gt.push_back(g);
        flat.insert(flat.end(), {p.cx, p.cy, p.w, p.h});
    }
    auto pt = tensor_from({12, 4}, flat, true);
    auto out = giou_rows(pt, gt);
    for (int i = 0; i < 12; ++i) {
        CHECK(out->data[static_cast<size_t>(i)] ==
              doctest::Approx(giou(pred[static_cast<size_t>(i)], gt[static_cast<size_t>(i)]))
                  .epsilon(1e-12));
        CHECK(out->data[static_cast<size_t>(i)] >= -1.0);
        CHECK(out->data[static_cast<size_t>(i)] <= 1.0);
    }
    // gradient of the summed giou against central differences
    backward(sum_all(giou_rows(pt, gt)));
    const double h = 1e-6;
    for (size_t i = 0; i < flat.size(); i += 5) {
        auto bump = [&](double d) {
            auto x = flat;
            x[i] += d;
            double s = 0.0;
            auto v = giou_rows(tensor_from({12, 4}, x), gt);
            for (double e : v->data) s += e;
            return s;
        };
        const double num = (bump(h) - bump(-h)) / (2.0 * h);
        CHECK(std::fabs(num - pt->grad[i]) < 1e-5);
    }
}

TEST_CASE("detection loss: all-phi GT with uniform logits") {
    DecoderConfig cfg;
    cfg.n_queries = 4;
    cfg.n_categories = 3;
    DetectorOutput det;
    det.class_logits = tensor({cfg.n_queries, cfg.n_categories + 1});
    det.boxes = tensor({cfg.n_queries, 4});
    Scene empty;
    auto loss = detection_loss(det, empty, identity_match(0, 0.0), cfg);
    const double expect = 0.1 * cfg.n_queries * std::log(cfg.n_categories + 1.0) * 2.0;
    CHECK(loss->data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("detection loss: near-perfect predictions vanish") {
    DecoderConfig cfg;
    cfg.n_queries = 3;
    cfg.n_categories = 2;
    Scene gt = make_scene({{1, {0.3, 0.3, 0.2, 0.2}}, {0, {0.7, 0.6, 0.1, 0.3}}}, {});
    std::vector<double> logits(static_cast<size_t>(cfg.n_queries) * (cfg.n_categories + 1), 0.0);
    auto set = [&](int q, int c) { logits[static_cast<size_t>(q) * (cfg.n_categories + 1) + c] = 60.0; };
    set(0, 1);
    set(1, 0);
    set(2, cfg.phi_class());
    DetectorOutput det;
    det.class_logits = tensor_from({cfg.n_queries, cfg.n_categories + 1}, logits);
    det.boxes = tensor_from({cfg.n_queries, 4},
                            {0.3, 0.3, 0.2, 0.2, 0.7, 0.6, 0.1, 0.3, 0.5, 0.5, 0.1, 0.1});
    auto loss = detection_loss(det, gt, identity_match(2, -4.0), cfg);
    CHECK(loss->data[0] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(loss->data[0] >= 0.0);
}

TEST_CASE("detection loss gradient passes finite differences") {
    DecoderConfig cfg;
    cfg.n_queries = 3;
    cfg.n_categories = 2;
    Scene gt = make_scene({{1, {0.32, 0.4, 0.2, 0.25}}, {0, {0.7, 0.6, 0.15, 0.3}}}, {});
    Rng rng(11);
    std::vector<double> logits(9), boxes(12);
    for (auto& v : logits) v = rng.uniform(-1.0, 1.0);
    for (size_t i = 0; i < 12; ++i)
        boxes[i] = (i % 4 < 2) ? rng.uniform(0.2, 0.8) : rng.uniform(0.05, 0.3);
    auto match = identity_match(2, -2.0);
    auto eval = [&](const std::vector<double>& l, const std::vector<double>& b) {
        DetectorOutput det;
        det.class_logits = tensor_from({3, 3}, l);
        det.boxes = tensor_from({3, 4}, b);
        return detection_loss(det, gt, match, cfg);
    };
    DetectorOutput det;
    det.class_logits = tensor_from({3, 3}, logits, true);
    det.boxes = tensor_from({3, 4}, boxes, true);
    backward(detection_loss(det, gt, match, cfg));
    const double h = 1e-6;
    for (size_t i = 0; i < logits.size(); ++i) {
        auto lp = logits, lm = logits;
        lp[i] += h;
        lm[i] -= h;
        const double num = (eval(lp, boxes)->data[0] - eval(lm, boxes)->data[0]) / (2.0 * h);
        CHECK(std::fabs(num - det.class_logits->grad[i]) < 1e-5);
    }
    for (size_t i = 0; i < boxes.size(); ++i) {
        auto bp = boxes, bm = boxes;
        bp[i] += h;
        bm[i] -= h;
        const double num = (eval(logits, bp)->data[0] - eval(logits, bm)->data[0]) / (2.0 * h);
        CHECK(std::fabs(num - det.boxes->grad[i]) < 1e-4);
    }
}

TEST_CASE("uncertainty hits alpha at the minimum and is monotone") {
    for (double alpha : {0.5, 1e-14, 0.3, 1e-6}) {
        CHECK(uncertainty(-4.0, -4.0, alpha) == doctest::Approx(alpha).epsilon(1e-12));
        CHECK(uncertainty(12.0, 12.0, alpha) == doctest::Approx(alpha).epsilon(1e-12));
    }
    CHECK(uncertainty(-4.0, -4.0, 0.5) == doctest::Approx(0.5));
    // alpha = 1e-14: a cost gap of -logit(alpha) ~ 32.2362 lands at u ~ 0.5
    CHECK(uncertainty(-4.0 - logit(1e-14), -4.0, 1e-14) == doctest::Approx(0.5).epsilon(1e-9));
    Rng rng(5150);
    for (int t = 0; t < 1000; ++t) {
        const double a = rng.uniform(-4.0, 10.0);
        const double b = a + rng.uniform(1e-6, 5.0);
        CHECK(uncertainty(a, -4.0, 1e-14) < uncertainty(b, -4.0, 1e-14));
    }
    CHECK_THROWS_AS(uncertainty(0.0, -4.0, 0.0), std::runtime_error);
    CHECK_THROWS_AS(uncertainty(0.0, -4.0, 1.0), std::runtime_error);
}

TEST_CASE("build_targets: smoothed values on GT cells") {
    Scene gt = make_scene({{0, {0.3, 0.3, 0.2, 0.2}}, {1, {0.7, 0.7, 0.2, 0.2}}},
                          {{0, 0, 1}});
    SUBCASE("both endpoints perfect: (1-alpha)^2") {
        const double alpha = 1e-14;
        auto [t, part] = build_targets(identity_match(2, -4.0), gt, 4, 3, alpha);
        CHECK(t.rel[(0 * 4 + 1) * 3 + 0] ==
              doctest::Approx((1.0 - alpha) * (1.0 - alpha)).epsilon(1e-12));
        CHECK(part.gt_cells.size() == 1);
        CHECK(t.con[0 * 4 + 1] == 1.0);
        CHECK(t.con[1 * 4 + 0] == 0.0);
    }
    SUBCASE("u_i = u_j = 0.5 gives 0.25") {
        // alpha = 0.5 puts the sigmoid midpoint at cost_min
        auto [t, part] = build_targets(identity_match(2, -4.0), gt, 4, 3, 0.5);
        CHECK(t.rel[(0 * 4 + 1) * 3 + 0] == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("target respects the permutation") {
        MatchResult match;
        match.sigma = {3, 1};
        match.costs = {-4.0, -4.0};
        match.cost_min = -4.0;
        auto [t, part] = build_targets(match, gt, 4, 3, 1e-14);
        CHECK(t.rel[(3 * 4 + 1) * 3 + 0] > 0.99);
        CHECK(t.con[3 * 4 + 1] == 1.0);
        CHECK(t.rel[(0 * 4 + 1) * 3 + 0] == 0.0);
    }
}

TEST_CASE("region partition sizes on the counting example") {
    // 16 queries, 5 predicates, 3 matched objects, 2 triplets
    Scene gt = make_scene({{0, {0.2, 0.2, 0.1, 0.1}},
                           {1, {0.5, 0.5, 0.1, 0.1}},
                           {2, {0.8, 0.8, 0.1, 0.1}}},
                          {{0, 1, 1}, {2, 4, 0}});
    auto [t, part] = build_targets(identity_match(3, -3.0), gt, 16, 5, 1e-14);
    CHECK(part.gt_cells.size() == 2);
    CHECK(part.negative_cells.size() == 28);
    size_t non = 0;
    for (char r : part.cell_region)
        if (r == 0) ++non;
    CHECK(non == 1250);
    CHECK(part.cell_region.size() == 16 * 16 * 5);
    CHECK(part.gt_cells.size() + part.negative_cells.size() + non == part.cell_region.size());
}

TEST_CASE("regions are disjoint and exhaustive on generated scenes") {
    SceneConfig scfg;
    for (uint64_t seed = 0; seed < 30; ++seed) {
        Scene gt = generate_scene(seed, scfg);
        const int n = 16, np = scfg.n_predicates;
        const int m = static_cast<int>(gt.objects.size());
        MatchResult match;
        for (int i = 0; i < m; ++i) {
            match.sigma.push_back(n - 1 - i);  // arbitrary injective assignment
            match.costs.push_back(-3.5);
        }
        match.cost_min = -4.0;
        auto [t, part] = build_targets(match, gt, n, np, 1e-14);
        std::set<int64_t> gt_set(part.gt_cells.begin(), part.gt_cells.end());
        std::set<int64_t> neg_set(part.negative_cells.begin(), part.negative_cells.end());
        CHECK(gt_set.size() == part.gt_cells.size());
        CHECK(neg_set.size() == part.negative_cells.size());
        for (int64_t c : gt_set) CHECK(neg_set.count(c) == 0);
        CHECK(gt_set.size() == gt.triplets.size());
        // diagonal pairs always land in the non-matching region
        for (int i = 0; i < n; ++i)
            for (int k = 0; k < np; ++k)
                CHECK(part.cell_region[(static_cast<size_t>(i) * n + i) * np + k] == 0);
    }
}

TEST_CASE("curriculum: inflating costs shrinks every GT target") {
    Rng rng(31337);
    for (int t = 0; t < 1000; ++t) {
        const double ci = -4.0 + rng.uniform(0.0, 8.0);
        const double cj = -4.0 + rng.uniform(0.0, 8.0);
        const double d = rng.uniform(1e-3, 2.0);
        auto target = [&](double a, double b) {
            return (1.0 - uncertainty(a, -4.0, 1e-14)) * (1.0 - uncertainty(b, -4.0, 1e-14));
        };
        CHECK(target(ci + d, cj + d) < target(ci, cj));
        CHECK(target(ci + d, cj) < target(ci, cj));  // monotone in either endpoint
    }
}

TEST_CASE("hard sampling") {
    // partition: 24 cells (n=2... synthetic), regions assigned by hand
    RegionPartition part;
    part.cell_region.assign(24, 0);
    for (int64_t c : {3, 7}) part.cell_region[static_cast<size_t>(c)] = 1;
    for (int64_t c : {1, 5, 9, 11, 13}) {
        part.cell_region[static_cast<size_t>(c)] = 2;
        part.negative_cells.push_back(c);
    }
    part.gt_cells = {3, 7};
    SUBCASE("region smaller than the budget returns the whole region") {
        std::vector<double> scores(24, 0.0);
        auto s = hard_sample(scores, part, 2, 80, 80);
        CHECK(s.negative == std::vector<int64_t>{1, 5, 9, 11, 13});
        CHECK(s.non_matching.size() == 17);
    }
    SUBCASE("uniform scores pick the lowest indices") {
        std::vector<double> scores(24, 0.5);
        auto s = hard_sample(scores, part, 1, 2, 3);
        CHECK(s.negative == std::vector<int64_t>{1, 5});
        CHECK(s.non_matching == std::vector<int64_t>{0, 2, 4});
    }
    SUBCASE("random scores match a full-sort oracle") {
        Rng rng(999);
        std::vector<double> scores(24);
        for (auto& v : scores) v = rng.uniform();
        auto s = hard_sample(scores, part, 1, 3, 4);
        auto oracle = [&](std::vector<int64_t> cand, size_t k) {
            std::sort(cand.begin(), cand.end(), [&](int64_t a, int64_t b) {
                if (scores[static_cast<size_t>(a)] != scores[static_cast<size_t>(b)])
                    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
                return a < b;
            });
            cand.resize(std::min(k, cand.size()));
            std::sort(cand.begin(), cand.end());
            return cand;
        };
        std::vector<int64_t> non;
        for (int64_t c = 0; c < 24; ++c)
            if (part.cell_region[static_cast<size_t>(c)] == 0) non.push_back(c);
        CHECK(s.negative == oracle(part.negative_cells, 3));
        CHECK(s.non_matching == oracle(non, 4));
        for (int64_t c : s.negative) CHECK(part.cell_region[static_cast<size_t>(c)] == 2);
        for (int64_t c : s.non_matching) CHECK(part.cell_region[static_cast<size_t>(c)] == 0);
    }
    SUBCASE("no GT triplets: empty samples") {
        std::vector<double> scores(24, 0.9);
        auto s = hard_sample(scores, part, 0, 80, 80);
        CHECK(s.negative.empty());
        CHECK(s.non_matching.empty());
    }
}

TEST_CASE("relation losses against the direct BCE formula") {
    const int n = 3, np = 2;
    RelationOutput rel;
    SUBCASE("zero logits, zero targets: ln 2 per cell") {
        rel.rel_logits = tensor({n * n, np});
        rel.con_logits = tensor({n * n, 1});
        SmoothedTargets targets;
        targets.rel.assign(static_cast<size_t>(n) * n * np, 0.0);
        targets.con.assign(static_cast<size_t>(n) * n, 0.0);
        RegionPartition part;
        part.cell_region.assign(targets.rel.size(), 0);
        HardSamples samples;
        samples.non_matching = {0, 4, 9};
        auto out = relation_losses(rel, targets, part, samples, n, np);
        CHECK(out.rel->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
        CHECK(out.con->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    }
    SUBCASE("saturated logits with matching targets vanish") {
        std::vector<double> big(static_cast<size_t>(n) * n * np, 40.0);
        rel.rel_logits = tensor_from({n * n, np}, big);
        rel.con_logits = tensor_from({n * n, 1}, std::vector<double>(static_cast<size_t>(n) * n, 40.0));
        SmoothedTargets targets;
        targets.rel.assign(big.size(), 1.0);
        targets.con.assign(static_cast<size_t>(n) * n, 1.0);
        RegionPartition part;
        part.cell_region.assign(big.size(), 1);
        for (size_t c = 0; c < big.size(); ++c) part.gt_cells.push_back(static_cast<int64_t>(c));
        auto out = relation_losses(rel, targets, part, {}, n, np);
        CHECK(out.rel->data[0] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(out.con->data[0] == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("random instance vs naive oracle") {
        Rng rng(2024);
        std::vector<double> rl(static_cast<size_t>(n) * n * np), cl(static_cast<size_t>(n) * n);
        for (auto& v : rl) v = rng.uniform(-3.0, 3.0);
        for (auto& v : cl) v = rng.uniform(-3.0, 3.0);
        rel.rel_logits = tensor_from({n * n, np}, rl);
        rel.con_logits = tensor_from({n * n, 1}, cl);
        SmoothedTargets targets;
        targets.rel.resize(rl.size());
        targets.con.resize(cl.size());
        for (auto& v : targets.rel) v = rng.uniform();
        for (auto& v : targets.con) v = rng.uniform();
        RegionPartition part;
        part.cell_region.assign(rl.size(), 0);
        part.gt_cells = {2, 11};
        part.cell_region[2] = part.cell_region[11] = 1;
        HardSamples samples;
        samples.negative = {5, 7};
        samples.non_matching = {0, 8, 15};
        auto out = relation_losses(rel, targets, part, samples, n, np);
        auto bce = [](double x, double t) {
            return std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::fabs(x)));
        };
        std::vector<int64_t> cells = {2, 11, 5, 7, 0, 8, 15};
        double sum = 0.0;
        std::set<int64_t> pairs;
        for (int64_t c : cells) {
            sum += bce(rl[static_cast<size_t>(c)], targets.rel[static_cast<size_t>(c)]);
            pairs.insert(c / np);
        }
        CHECK(std::fabs(out.rel->data[0] - sum / cells.size()) < 1e-12);
        double csum = 0.0;
        for (int64_t p : pairs) csum += bce(cl[static_cast<size_t>(p)], targets.con[static_cast<size_t>(p)]);
        CHECK(std::fabs(out.con->data[0] - csum / pairs.size()) < 1e-12);
    }
}

TEST_CASE("total loss combines the pieces with the pinned weights") {
    SceneConfig scfg;
    scfg.n_categories = 3;
    scfg.n_predicates = 3;
    scfg.n_max = 3;
    DecoderConfig dcfg;
    dcfg.n_queries = 4;
    dcfg.n_layers = 2;
    dcfg.d_model = 8;
    dcfg.n_heads = 2;
    dcfg.d_ffn = 16;
    auto m = build_model(dcfg, scfg, RelationMode::kConcat, 7);
    Scene gt = generate_scene(3, scfg);
    auto fwd = forward_scene(m, rasterize(gt, scfg));
    LossWeights lw;
    auto frozen = prepare_targets(fwd.det, fwd.rel, gt, m.dcfg, lw);
    auto loss = total_loss(fwd.det, fwd.rel, gt, m.dcfg, lw, frozen);
    CHECK(loss.total->data[0] ==
          doctest::Approx(loss.od + 15.0 * loss.rel + 30.0 * loss.con).epsilon(1e-12));
    LossWeights off = lw;
    off.lambda_rel = 0.0;
    off.lambda_con = 0.0;
    auto pure = total_loss(fwd.det, fwd.rel, gt, m.dcfg, off, frozen);
    CHECK(pure.total->data[0] == doctest::Approx(pure.od).epsilon(1e-12));
    // unit sub-losses add up to 46 under the default weights
    CHECK(1.0 + lw.lambda_rel * 1.0 + lw.lambda_con * 1.0 == 46.0);
}

TEST_CASE("full-graph gradient on the tiny model passes finite differences") {
    SceneConfig scfg;
    scfg.n_categories = 3;
    scfg.n_predicates = 3;
    scfg.n_max = 3;
    DecoderConfig dcfg;
    dcfg.n_queries = 4;
    dcfg.n_layers = 2;
    dcfg.d_model = 8;
    dcfg.n_heads = 2;
    dcfg.d_ffn = 16;
    auto m = build_model(dcfg, scfg, RelationMode::kConcat, 21);
    std::vector<Scene> batch = {generate_scene(100, scfg), generate_scene(101, scfg)};
    auto res = gradcheck(m, batch, LossWeights{});
    INFO("worst: ", res.worst_param, "[", res.worst_index, "]");
    CHECK(res.max_rel_err < 1e-4);
}

#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "egtr/matching.hpp"

using namespace egtr;

namespace {

// exhaustive minimum over all injections of GT rows into prediction columns
double enumerate_min_cost(const std::vector<std::vector<double>>& cost, int n_preds) {
    const int m = static_cast<int>(cost.size());
    std::vector<int> cols(static_cast<size_t>(n_preds));
    std::iota(cols.begin(), cols.end(), 0);
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> pick(static_cast<size_t>(m));
    std::function<void(int, uint32_t, double)> rec = [&](int row, uint32_t used, double acc) {
        if (row == m) {
            if (acc < best) best = acc;
            return;
        }
        for (int j = 0; j < n_preds; ++j)
            if (!(used & (1u << j)))
                rec(row + 1, used | (1u << j), acc + cost[static_cast<size_t>(row)][static_cast<size_t>(j)]);
    };
    rec(0, 0, 0.0);
    return best;
}

double sigma_cost(const std::vector<std::vector<double>>& cost, const std::vector<int>& sigma) {
    double total = 0.0;
    for (size_t i = 0; i < cost.size(); ++i)
        total += cost[i][static_cast<size_t>(sigma[i])];
    return total;
}

}  // namespace

TEST_CASE("giou hand cases") {
    // identical boxes
    CHECK(giou({0.5, 0.5, 0.2, 0.2}, {0.5, 0.5, 0.2, 0.2}) == doctest::Approx(1.0));
    // touching unit squares: IoU 0, hull == union -> GIoU 0
    CHECK(giou({0.5, 0.5, 1.0, 1.0}, {1.5, 0.5, 1.0, 1.0}) == doctest::Approx(0.0));
    // (0,0,2,2) and (1,1,3,3) corner boxes: 1/7 - 2/9
    CHECK(giou({1.0, 1.0, 2.0, 2.0}, {2.0, 2.0, 2.0, 2.0}) ==
          doctest::Approx(1.0 / 7.0 - 2.0 / 9.0));
    CHECK_THROWS_AS(giou({0.5, 0.5, 0.0, 0.1}, {0.5, 0.5, 0.1, 0.1}), std::runtime_error);
}

TEST_CASE("giou stays in [-1, 1] on random boxes") {
    Rng rng(5);
    for (int i = 0; i < 500; ++i) {
        Box a{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4),
              rng.uniform(0.05, 0.4)};
        Box b{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.05, 0.4),
              rng.uniform(0.05, 0.4)};
        const double g = giou(a, b);
        CHECK(g <= 1.0);
        CHECK(g >= -1.0);
    }
}

TEST_CASE("matching cost plug-in values") {
    MatchWeights w;
    CHECK(w.cost_min() == -4.0);
    Box box{0.5, 0.5, 0.2, 0.2};
    // perfect prediction: prob 1, same box
    CHECK(matching_cost({1.0, 0.0}, box, 0, box, w) == doctest::Approx(-4.0));
    // half prob, same box
    CHECK(matching_cost({0.5, 0.5}, box, 0, box, w) == doctest::Approx(-3.0));
    // prob 1, shifted box with L1 distance 0.4
    Box shifted{0.9, 0.5, 0.2, 0.2};
    const double g = giou(shifted, box);
    CHECK(matching_cost({1.0, 0.0}, shifted, 0, box, w) ==
          doctest::Approx(-2.0 - 2.0 * g + 5.0 * 0.4));
}

TEST_CASE("hungarian trivial and 2x2") {
    CHECK(hungarian({{3.0}}, 1) == std::vector<int>{0});
    // [[1,2],[2,4]]: cross assignment totals 4, diagonal totals 5
    auto sigma = hungarian({{1, 2}, {2, 4}}, 2);
    CHECK(sigma == std::vector<int>{1, 0});
}

TEST_CASE("hungarian equals enumeration on 200 random instances up to 7x7") {
    Rng rng(42);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + rng.uniform_int(6);       // predictions, up to 7
        const int m = 1 + rng.uniform_int(n);       // GT rows, m <= n
        std::vector<std::vector<double>> cost(static_cast<size_t>(m),
                                              std::vector<double>(static_cast<size_t>(n)));
        for (auto& row : cost)
            for (auto& c : row) c = rng.uniform(-4.0, 4.0);
        auto sigma = hungarian(cost, n);
        // bijection on all N slots
        std::vector<int> sorted = sigma;
        std::sort(sorted.begin(), sorted.end());
        for (int i = 0; i < n; ++i) CHECK(sorted[static_cast<size_t>(i)] == i);
        CHECK(sigma_cost(cost, sigma) == doctest::Approx(enumerate_min_cost(cost, n)).epsilon(1e-12));
    }
}

TEST_CASE("hungarian tie-break is the lexicographically smallest minimizer") {
    // all-equal costs: identity is the smallest optimal sigma
    std::vector<std::vector<double>> flat(3, std::vector<double>(5, 1.0));
    CHECK(hungarian(flat, 5) == std::vector<int>{0, 1, 2, 3, 4});
    // two optimal assignments; {0->0, 1->1} wins over {0->1, 1->0}
    CHECK(hungarian({{1, 2}, {1, 2}}, 2) == std::vector<int>{0, 1});
}

TEST_CASE("match_scene produces costs bounded below by cost_min") {
    Rng rng(7);
    SceneConfig scfg;
    for (int trial = 0; trial < 20; ++trial) {
        Scene gt = generate_scene(static_cast<uint64_t>(trial), scfg);
        const int n = 8, ncls = scfg.n_categories + 1;
        std::vector<double> probs(static_cast<size_t>(n) * ncls);
        for (int i = 0; i < n; ++i) {
            double sum = 0.0;
            for (int c = 0; c < ncls; ++c) {
                probs[static_cast<size_t>(i) * ncls + c] = rng.uniform(0.01, 1.0);
                sum += probs[static_cast<size_t>(i) * ncls + c];
            }
            for (int c = 0; c < ncls; ++c) probs[static_cast<size_t>(i) * ncls + c] /= sum;
        }
        std::vector<Box> boxes;
        for (int i = 0; i < n; ++i)
            boxes.push_back({rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), rng.uniform(0.1, 0.3),
                             rng.uniform(0.1, 0.3)});
        auto match = match_scene(probs, ncls, boxes, gt);
        for (double c : match.costs) CHECK(c >= match.cost_min);
    }
}

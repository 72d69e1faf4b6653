#include <doctest.h>

#include "egtr/config.hpp"

using namespace egtr;

TEST_CASE("defaults are valid and round-trip through json") {
    RunConfig c;
    CHECK(c.validate().empty());
    CHECK(c.n_queries == 16);
    CHECK(c.layers == 3);
    CHECK(c.d_model == 64);
    CHECK(c.lambda_rel == 15.0);
    CHECK(c.lambda_con == 30.0);
    CHECK(c.alpha == 1e-14);
    CHECK(c.k_neg == 80);
    CHECK(c.k_non == 80);
    auto j = c.to_json();
    RunConfig back = config_from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.relation_mode == "concat");
}

TEST_CASE("partial json only overrides the named keys") {
    auto c = config_from_json({{"d_model", 32}, {"heads", 2}, {"seed", 9}});
    CHECK(c.d_model == 32);
    CHECK(c.heads == 2);
    CHECK(c.seed == 9);
    CHECK(c.n_queries == 16);  // untouched default
    CHECK(c.validate().empty());
}

TEST_CASE("unknown keys are rejected by name") {
    CHECK_THROWS_WITH_AS(config_from_json({{"d_modle", 32}}), doctest::Contains("d_modle"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(config_from_json({{"lr", 1e-3}, {"extra", 1}}),
                         doctest::Contains("unknown key"), std::runtime_error);
}

TEST_CASE("validate reports every problem at once") {
    RunConfig c;
    c.n_categories = 0;
    c.d_model = 10;  // not divisible by heads=4
    c.alpha = 1.5;
    c.lr = -1.0;
    c.w_min = 0.5;
    c.w_max = 0.3;
    c.relation_mode = "nope";
    auto errs = c.validate();
    CHECK(errs.size() == 6);
    auto has = [&](const char* needle) {
        for (const auto& e : errs)
            if (e.find(needle) != std::string::npos) return true;
        return false;
    };
    CHECK(has("n_categories"));
    CHECK(has("divisible"));
    CHECK(has("alpha"));
    CHECK(has("lr"));
    CHECK(has("w_min"));
    CHECK(has("relation_mode"));
}

TEST_CASE("load_config errors mention the path") {
    CHECK_THROWS_WITH_AS(load_config("/no/such/file.json"), doctest::Contains("/no/such/file"),
                         std::runtime_error);
}

TEST_CASE("converters carry the values through") {
    RunConfig c;
    c.n_categories = 4;
    c.n_predicates = 3;
    c.grid = 6;
    c.n_queries = 10;
    c.layers = 2;
    auto s = c.scene_config();
    CHECK(s.n_categories == 4);
    CHECK(s.grid_h == 6);
    CHECK(s.grid_w == 6);
    auto d = c.decoder_config();
    CHECK(d.n_queries == 10);
    CHECK(d.n_layers == 2);
    CHECK(d.n_categories == 4);
    CHECK(d.n_predicates == 3);
    auto w = c.loss_weights();
    CHECK(w.lambda_rel == 15.0);
    CHECK(w.k_neg == 80);
}

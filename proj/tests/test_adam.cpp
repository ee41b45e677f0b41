#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "maskts/adam.hpp"
#include "oracles.hpp"

using namespace maskts;

TEST_CASE("zero gradient leaves parameters unchanged") {
    Tensor p({2, 2}, 1.25f);
    AdamState adam;
    Tensor g({2, 2}, 0.0f);
    adam.step({{"p", &p}}, {&g});
    for (float v : p) CHECK(v == 1.25f);
    CHECK(adam.step_count() == 1);
}

TEST_CASE("first bias-corrected step is approximately lr") {
    AdamConfig cfg;
    cfg.lr = 0.1;
    AdamState adam(cfg);
    Tensor p({1}, 2.0f);
    Tensor g({1}, 1.0f);
    adam.step({{"p", &p}}, {&g});
    CHECK(double(p[0]) == doctest::Approx(2.0 - 0.1).epsilon(1e-6));
}

TEST_CASE("two consecutive steps reproduce the scalar reference") {
    AdamConfig cfg;
    cfg.lr = 0.05;
    AdamState adam(cfg);
    Tensor p({1}, 0.7f);

    oracle::ScalarAdam ref;
    ref.lr = cfg.lr;
    double ref_p = 0.7f;

    const double grads[2] = {0.3, -1.1};
    for (double gv : grads) {
        Tensor g({1}, float(gv));
        adam.step({{"p", &p}}, {&g});
        ref_p = ref.step(ref_p, gv);
        CHECK(std::abs(double(p[0]) - ref_p) < 1e-7);
    }
    CHECK(adam.step_count() == 2);
}

TEST_CASE("non-finite gradients abort with the parameter name") {
    AdamState adam;
    Tensor p({2}, 0.0f);
    Tensor g({2}, std::vector<float>{0.0f, std::nanf("")});
    try {
        adam.step({{"fusion.weight", &p}}, {&g});
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        CHECK(std::string(e.what()).find("fusion.weight") != std::string::npos);
    }
}

TEST_CASE("moment buffers must match the parameter set") {
    AdamState adam;
    Tensor p({2}, 0.0f);
    Tensor g({2}, 0.1f);
    adam.step({{"p", &p}}, {&g});
    Tensor wrong({3}, 0.1f);
    CHECK_THROWS_AS(adam.step({{"p", &p}}, {&wrong}), ContractError);
}

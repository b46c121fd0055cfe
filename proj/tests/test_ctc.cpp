#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "architts/ctc.hpp"
#include "architts/grad_check.hpp"
#include "architts/rng.hpp"
#include "architts/tensor.hpp"

using namespace architts;

using DT = Tensor<double>;

namespace {

// Random normalized log-distribution rows.
DT random_log_probs(RngStream& rng, int64_t t, int64_t v) {
    DT logits = DT::randn({t, v}, rng, 1.5);
    NoGradGuard ng;
    return log_softmax_rows(logits);
}

std::vector<int64_t> random_target(RngStream& rng, int64_t v, int64_t max_len, int64_t t_budget) {
    for (;;) {
        int64_t len = 1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(max_len)));
        std::vector<int64_t> target(len);
        for (auto& l : target) l = 1 + static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(v - 1)));
        if (ctc_min_frames(target) <= t_budget) return target;
    }
}

}  // namespace

TEST_CASE("single-frame single-label loss is the label's negative log prob") {
    DT lp = DT::from_data({1, 2}, {std::log(0.3), std::log(0.7)});
    DT loss = ctc_loss(lp, {1});
    REQUIRE(loss.item() == Catch::Approx(-std::log(0.7)).epsilon(1e-12));
    REQUIRE(loss.item() == Catch::Approx(0.35667494393873245).margin(1e-12));
}

TEST_CASE("two uniform frames over blank and one label sum three paths") {
    const double q = std::log(0.5);
    DT lp = DT::from_data({2, 2}, {q, q, q, q});
    DT loss = ctc_loss(lp, {1});
    // Valid paths: blank-label, label-blank, label-label. Each 0.25.
    REQUIRE(loss.item() == Catch::Approx(-std::log(0.75)).margin(1e-12));
    REQUIRE(loss.item() == Catch::Approx(0.2876820724517809).margin(1e-12));
}

TEST_CASE("one-hot rows spelling the extended target give zero loss") {
    // Target [1, 2] over T=2: the only path is label, label with prob 1.
    const double z = -1e9;
    DT lp = DT::from_data({2, 3}, {z, 0.0, z, z, z, 0.0});
    REQUIRE(ctc_loss(lp, {1, 2}).item() == Catch::Approx(0.0).margin(1e-9));
    // brute force agrees
    REQUIRE(ctc_brute_force(lp.data(), 2, 3, {1, 2}) == Catch::Approx(0.0).margin(1e-9));
}

TEST_CASE("forward recursion matches the brute-force oracle on random instances") {
    RootRng root(0xc7c);
    int cases = 0;
    for (int trial = 0; trial < 200; ++trial) {
        auto rng = root.stream("oracle", static_cast<uint64_t>(trial));
        const int64_t t = 2 + static_cast<int64_t>(rng.uniform_int(5));  // 2..6
        const int64_t v = 2 + static_cast<int64_t>(rng.uniform_int(2));  // 2..3
        auto target = random_target(rng, v, 3, t);
        DT lp = random_log_probs(rng, t, v);
        double dp = ctc_loss(lp, target).item();
        double brute = ctc_brute_force(lp.data(), t, v, target);
        REQUIRE(dp == Catch::Approx(brute).margin(1e-6));
        ++cases;
    }
    REQUIRE(cases == 200);
}

TEST_CASE("brute force refuses oversized enumerations and handles unreachable targets") {
    std::vector<double> lp(9 * 3, std::log(1.0 / 3.0));
    REQUIRE_THROWS_AS(ctc_brute_force(lp, 9, 3, {1}), ValidationError);
    std::vector<double> lp5(2 * 5, std::log(0.2));
    REQUIRE_THROWS_AS(ctc_brute_force(lp5, 2, 5, {1}), ValidationError);
    // |target| > T: no frame sequence collapses to it.
    std::vector<double> lp2(2 * 3, std::log(1.0 / 3.0));
    REQUIRE(std::isinf(ctc_brute_force(lp2, 2, 3, {1, 2, 1})));
}

TEST_CASE("infeasible targets raise a structured error in the forward recursion") {
    DT lp = DT::from_data({2, 3}, std::vector<double>(6, std::log(1.0 / 3.0)));
    REQUIRE_THROWS_AS(ctc_loss(lp, {1, 2, 1}), InfeasibleError);
    // Repeated adjacent labels need a separating blank frame.
    DT lp2 = DT::from_data({2, 3}, std::vector<double>(6, std::log(1.0 / 3.0)));
    REQUIRE_THROWS_AS(ctc_loss(lp2, {1, 1}), InfeasibleError);
    DT lp3 = DT::from_data({3, 3}, std::vector<double>(9, std::log(1.0 / 3.0)));
    REQUIRE_NOTHROW(ctc_loss(lp3, {1, 1}));
    REQUIRE(ctc_min_frames({1, 1, 2, 2}) == 6);
    REQUIRE(ctc_min_frames({1, 2, 3}) == 3);
}

TEST_CASE("ctc loss validates label ranges") {
    DT lp = DT::from_data({2, 3}, std::vector<double>(6, std::log(1.0 / 3.0)));
    REQUIRE_THROWS_AS(ctc_loss(lp, {0}), ValidationError);
    REQUIRE_THROWS_AS(ctc_loss(lp, {3}), ValidationError);
}

TEST_CASE("ctc gradient matches finite differences") {
    RootRng root(0x96ad);
    for (int trial = 0; trial < 20; ++trial) {
        auto rng = root.stream("ctcgrad", static_cast<uint64_t>(trial));
        const int64_t t = 3 + static_cast<int64_t>(rng.uniform_int(4));  // 3..6
        const int64_t v = 2 + static_cast<int64_t>(rng.uniform_int(2));  // 2..3
        auto target = random_target(rng, v, 3, t);
        DT base = random_log_probs(rng, t, v);

        DT lp = DT::from_data({t, v}, base.data()).set_requires_grad();
        backward(ctc_loss(lp, target));

        auto scalar_fn = [&](const std::vector<double>& x) {
            NoGradGuard ng;
            return ctc_loss(DT::from_data({t, v}, x), target).item();
        };
        auto numeric = finite_difference_grad<double>(scalar_fn, base.data());
        INFO("trial " << trial << " T=" << t << " V=" << v);
        REQUIRE(grad_rel_error(lp.grad(), numeric) < 1e-4);
    }
}

TEST_CASE("greedy decode collapses repeats then strips blanks") {
    auto one_hot = [](std::vector<int64_t> args, int64_t v) {
        std::vector<double> lp(args.size() * v, -10.0);
        for (size_t i = 0; i < args.size(); ++i) lp[i * v + args[i]] = 0.0;
        return lp;
    };
    REQUIRE(greedy_decode(one_hot({0, 0, 0}, 3), 3, 3).empty());
    REQUIRE(greedy_decode(one_hot({1, 1, 0, 2}, 3), 4, 3) == std::vector<int64_t>{1, 2});
    REQUIRE(greedy_decode(one_hot({1, 0, 1}, 3), 3, 3) == std::vector<int64_t>{1, 1});
}

TEST_CASE("raising a used frame-label probability never increases the loss") {
    RootRng root(0xbee);
    for (int trial = 0; trial < 50; ++trial) {
        auto rng = root.stream("mono", static_cast<uint64_t>(trial));
        const int64_t t = 3 + static_cast<int64_t>(rng.uniform_int(3));
        const int64_t v = 3;
        auto target = random_target(rng, v, 2, t);
        DT lp = random_log_probs(rng, t, v);
        const double base = ctc_loss(lp, target).item();
        // Bump the first label of the target at frame 0: it lies on a valid
        // path whenever the target is feasible, which random_target ensures.
        std::vector<double> bumped = lp.data();
        bumped[target[0]] += 0.5;
        DT lp2 = DT::from_data({t, v}, bumped);
        REQUIRE(ctc_loss(lp2, target).item() <= base + 1e-12);
    }
}

TEST_CASE("validated instances enforce normalization and blank-free targets") {
    RootRng root(0xABC);
    auto rng = root.stream("inst");
    CtcInstance<double> inst{random_log_probs(rng, 4, 3), {1, 2}};
    REQUIRE_NOTHROW(inst.validate());
    REQUIRE(inst.loss().item() > 0.0);

    CtcInstance<double> unnorm{DT::zeros({4, 3}), {1, 2}};
    REQUIRE_THROWS_AS(unnorm.validate(), ValidationError);
    CtcInstance<double> blanky{random_log_probs(rng, 4, 3), {0, 1}};
    REQUIRE_THROWS_AS(blanky.validate(), ValidationError);
    CtcInstance<double> empty{random_log_probs(rng, 4, 3), {}};
    REQUIRE_THROWS_AS(empty.validate(), ValidationError);
}

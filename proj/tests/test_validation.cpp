#include <doctest.h>

#include <cmath>

#include "dsmpc/casestudy.hpp"
#include "dsmpc/validation.hpp"

using namespace dsmpc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

/// Single-agent network x+ = C w with w uniform on [0, 1]: a one-step
/// analytic violation toy.
mpc::Network uniform_toy(double bound) {
    mpc::Network net;
    net.horizon = 1;
    mpc::AgentBlock blk;
    blk.A_ii = MatrixXd::Zero(1, 1);
    blk.B = MatrixXd::Zero(1, 1);
    blk.C = MatrixXd::Identity(1, 1);
    blk.state_polytope.A = MatrixXd::Identity(1, 1);
    blk.state_polytope.b = VectorXd::Constant(1, bound);
    blk.input_polytope.A.resize(0, 1);
    blk.input_polytope.b.resize(0);
    blk.K = MatrixXd::Zero(1, 1);
    blk.Q = MatrixXd::Identity(1, 1);
    blk.R = MatrixXd::Identity(1, 1);
    blk.P = MatrixXd::Identity(1, 1);
    blk.x0 = VectorXd::Zero(1);
    blk.process.w_nominal = MatrixXd::Constant(1, 1, 0.5);
    blk.process.w_band_fraction = 1.0;  // uniform on [0, 1]
    blk.process.delta_stddev = 0.0;
    blk.process.delta_cap = 0.0;
    net.blocks.push_back(std::move(blk));
    return net;
}

}  // namespace

TEST_CASE("Clopper-Pearson matches the closed forms at the edges") {
    // k = 0: upper = 1 - (alpha/2)^(1/n); k = n: lower = (alpha/2)^(1/n).
    const auto zero = validation::clopper_pearson(0, 10);
    CHECK(zero.lower == 0.0);
    CHECK(zero.upper == doctest::Approx(1.0 - std::pow(0.025, 0.1)).epsilon(1e-10));
    const auto full = validation::clopper_pearson(10, 10);
    CHECK(full.upper == 1.0);
    CHECK(full.lower == doctest::Approx(std::pow(0.025, 0.1)).epsilon(1e-10));

    const auto mid = validation::clopper_pearson(5, 100);
    CHECK(mid.lower < 0.05);
    CHECK(mid.upper > 0.05);
    CHECK(mid.lower > 0.0);
    CHECK(mid.upper < 0.12);
    CHECK_THROWS_AS(validation::clopper_pearson(5, 0), Error);
}

TEST_CASE("violation estimate converges to the analytic rate") {
    const auto net = uniform_toy(0.9);
    const auto report = validation::estimate_violation(net, {net.blocks[0].x0},
                                                       VectorXd::Zero(1), 10000, 5);
    // P[w > 0.9] = 0.1 for w uniform on [0, 1].
    CHECK(report.global_rate > report.global_interval.lower - 1e-12);
    CHECK(report.global_rate < report.global_interval.upper + 1e-12);
    CHECK(0.1 > report.global_interval.lower);
    CHECK(0.1 < report.global_interval.upper);
    CHECK(report.agent_rates[0] == report.global_rate);
}

TEST_CASE("violation estimator is unbiased on the analytic toy") {
    const auto net = uniform_toy(0.9);
    const int repetitions = 100, draws = 1000;
    double total = 0.0;
    for (int rep = 0; rep < repetitions; ++rep) {
        const auto report = validation::estimate_violation(
            net, {net.blocks[0].x0}, VectorXd::Zero(1), draws,
            static_cast<std::uint64_t>(rep + 1));
        total += report.global_rate;
    }
    const double mean = total / repetitions;
    // Standard error of the mean estimate over all draws.
    const double se = std::sqrt(0.1 * 0.9 / (repetitions * draws));
    CHECK(std::abs(mean - 0.1) <= 3.0 * se);
}

TEST_CASE("whole-space constraints never violate; union is bounded by the sum") {
    auto net = uniform_toy(1e9);
    const auto report =
        validation::estimate_violation(net, {net.blocks[0].x0}, VectorXd::Zero(1), 2000, 9);
    CHECK(report.global_rate == 0.0);

    // Two-agent toy: the union rate never exceeds the per-agent sum.
    auto toy = uniform_toy(0.7);
    auto second = toy.blocks[0];
    toy.blocks.push_back(second);
    const auto rep2 = validation::estimate_violation(
        toy, {toy.blocks[0].x0, toy.blocks[1].x0}, VectorXd::Zero(2), 5000, 13);
    CHECK(rep2.global_rate <= rep2.agent_rates[0] + rep2.agent_rates[1] + 1e-12);
    CHECK(rep2.global_rate >= std::max(rep2.agent_rates[0], rep2.agent_rates[1]) - 1e-12);
}

TEST_CASE("mode comparison runs all four formulations on shared plant seeds") {
    casestudy::ThreeRoomOptions options;
    options.epsilon = 0.3;
    options.beta = 0.1;
    const auto net = casestudy::three_room(options);

    std::vector<mpc::ControllerMode> modes;
    modes.push_back({mpc::ControllerKind::Decoupled, {}});
    modes.push_back({mpc::ControllerKind::Distributed, {}});
    mpc::ControllerMode soft;
    soft.kind = mpc::ControllerKind::SoftComm;
    soft.soft.alpha_target = 0.85;
    soft.soft.beta_tilde = 0.05;
    modes.push_back(soft);

    const auto rows = validation::compare_modes(net, modes, 3, {101, 102}, {});
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].mode == "DeSMPC");
    CHECK(rows[1].mode == "DSMPC");
    CHECK(rows[2].mode == "DSMPCS-0.85");

    // The decoupled baseline mispredicts the coupled plant and violates far
    // more than the distributed controller.
    CHECK(rows[0].violation_rate > rows[1].violation_rate);

    const std::string csv = validation::summaries_to_csv(rows);
    CHECK(csv.find("DeSMPC") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

#include <doctest.h>

#include <cstring>

#include "dsmpc/casestudy.hpp"
#include "dsmpc/mpc.hpp"
#include "dsmpc/parallel.hpp"
#include "dsmpc/validation.hpp"

using namespace dsmpc;
using Eigen::VectorXd;

// The OpenMP kernels write disjoint outputs (or reduce integer counts), so
// the serial reference and the parallel path must agree bit for bit.

namespace {

std::vector<VectorXd> x0_of(const mpc::Network& net) {
    std::vector<VectorXd> x0;
    for (const auto& blk : net.blocks) x0.push_back(blk.x0);
    return x0;
}

casestudy::ThreeRoomOptions small() {
    casestudy::ThreeRoomOptions options;
    options.epsilon = 0.3;
    options.beta = 0.1;
    return options;
}

}  // namespace

TEST_CASE("parallel_for covers the range exactly once in both backends") {
    for (auto backend : {parallel::Backend::Serial, parallel::Backend::OpenMp}) {
        parallel::BackendGuard guard(backend);
        std::vector<int> hits(1000, 0);
        parallel::parallel_for(1000, [&](std::int64_t i) { hits[static_cast<std::size_t>(i)]++; });
        for (int h : hits) CHECK(h == 1);
    }
}

TEST_CASE("scenario generation is backend-invariant") {
    const auto net = casestudy::three_room();
    scenario::ScenarioSet serial_set, parallel_set;
    {
        parallel::BackendGuard guard(parallel::Backend::Serial);
        serial_set = scenario::draw_scenarios(net.blocks[0].process, 0, 64, net.horizon, 2024);
    }
    {
        parallel::BackendGuard guard(parallel::Backend::OpenMp);
        parallel_set = scenario::draw_scenarios(net.blocks[0].process, 0, 64, net.horizon, 2024);
    }
    REQUIRE(serial_set.count() == parallel_set.count());
    for (int s = 0; s < serial_set.count(); ++s) {
        CHECK(std::memcmp(serial_set.scenarios[static_cast<std::size_t>(s)].w.data(),
                          parallel_set.scenarios[static_cast<std::size_t>(s)].w.data(),
                          sizeof(double) * static_cast<std::size_t>(
                                               serial_set.scenarios[static_cast<std::size_t>(s)].w.size())) == 0);
    }
}

TEST_CASE("closed-loop traces are backend-invariant") {
    const auto net = casestudy::three_room(small());
    mpc::ClosedLoopTrace serial_trace, parallel_trace;
    {
        parallel::BackendGuard guard(parallel::Backend::Serial);
        serial_trace = mpc::run_dsmpc(net, x0_of(net), 2, 7, {});
    }
    {
        parallel::BackendGuard guard(parallel::Backend::OpenMp);
        parallel_trace = mpc::run_dsmpc(net, x0_of(net), 2, 7, {});
    }
    CHECK(serial_trace.same_numeric(parallel_trace));
}

TEST_CASE("Monte Carlo violation counts are backend-invariant") {
    const auto net = casestudy::three_room(small());
    validation::ViolationReport serial_report, parallel_report;
    const VectorXd v = VectorXd::Zero(net.horizon * 3);
    {
        parallel::BackendGuard guard(parallel::Backend::Serial);
        serial_report = validation::estimate_violation(net, x0_of(net), v, 4000, 3);
    }
    {
        parallel::BackendGuard guard(parallel::Backend::OpenMp);
        parallel_report = validation::estimate_violation(net, x0_of(net), v, 4000, 3);
    }
    CHECK(serial_report.global_rate == parallel_report.global_rate);
    for (std::size_t i = 0; i < serial_report.agent_rates.size(); ++i) {
        CHECK(serial_report.agent_rates[i] == parallel_report.agent_rates[i]);
    }
}

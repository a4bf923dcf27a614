#include <doctest.h>

#include <random>

#include "dsmpc/casestudy.hpp"
#include "dsmpc/errors.hpp"
#include "dsmpc/exchange.hpp"
#include "dsmpc/program.hpp"

using namespace dsmpc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

scenario::Scenario zero_scenario(int horizon, int p) {
    scenario::Scenario s;
    s.w = MatrixXd::Zero(horizon, p);
    s.delta = VectorXd::Zero(horizon);
    return s;
}

/// Step-by-step simulation oracle for the condensed prediction.
VectorXd rollout_oracle(const model::AgentModel& agent, const VectorXd& x0, const VectorXd& v,
                        const scenario::Scenario& scen,
                        const std::map<int, VectorXd>& neighbor_x0,
                        const std::map<int, VectorXd>& neighbor_traj) {
    const int T = agent.horizon;
    VectorXd traj(T * agent.n);
    VectorXd x = x0;
    for (int k = 0; k < T; ++k) {
        const double d = scen.delta(k);
        const VectorXd u = agent.K * x + v.segment(k * agent.m, agent.m);
        VectorXd next = agent.A_ii(d) * x + agent.B_i(d) * u +
                        agent.C_i(d) * scen.w.row(k).transpose();
        for (int j : agent.neighbors) {
            VectorXd xj;
            if (k == 0) {
                xj = neighbor_x0.at(j);
            } else {
                const int nj = static_cast<int>(neighbor_traj.at(j).size()) / T;
                xj = neighbor_traj.at(j).segment((k - 1) * nj, nj);
            }
            next += agent.A_ij(j, d) * xj;
        }
        x = next;
        traj.segment(k * agent.n, agent.n) = x;
    }
    return traj;
}

}  // namespace

TEST_CASE("condensation matches the simulation oracle") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const auto& agent = agents[1];  // two neighbors
    const int T = net.horizon;

    std::mt19937_64 eng(41);
    std::normal_distribution<double> gauss(0.0, 1.0);

    scenario::NoiseProcess proc = net.blocks[1].process;
    for (int trial = 0; trial < 10; ++trial) {
        const auto scen =
            scenario::draw_one(proc, T, rng::derive(7, {static_cast<std::uint64_t>(trial)}));
        const VectorXd x0 = VectorXd::Constant(1, 19.0 + 0.1 * gauss(eng));
        std::map<int, VectorXd> neighbor_x0{{0, VectorXd::Constant(1, 21.0)},
                                            {2, VectorXd::Constant(1, 23.0)}};
        std::map<int, VectorXd> ztraj;
        for (int j : agent.neighbors) {
            VectorXd z(T);
            for (int t = 0; t < T; ++t) z(t) = 20.0 + gauss(eng);
            ztraj[j] = z;
        }
        VectorXd v(T);
        for (int t = 0; t < T; ++t) v(t) = gauss(eng);

        const auto cond = program::condense_agent(agent, x0, scen, neighbor_x0);
        const auto op = program::resolve(cond, ztraj);
        const VectorXd predicted = op.Phi * v + op.phi;
        const VectorXd simulated = rollout_oracle(agent, x0, v, scen, neighbor_x0, ztraj);
        CHECK((predicted - simulated).cwiseAbs().maxCoeff() < 1e-10);
    }
}

TEST_CASE("condensation basics") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const auto& agent = agents[0];
    const int T = net.horizon;
    const VectorXd x0 = VectorXd::Constant(1, 21.0);
    std::map<int, VectorXd> zeros{{1, VectorXd::Zero(T)}};

    // v = 0, w = delta = 0, neighbors 0: phi equals the pure rollout.
    auto scen = zero_scenario(T, 1);
    const auto cond = program::condense_agent(agent, x0, scen, {{1, VectorXd::Zero(1)}});
    const auto op = program::resolve(cond, zeros);
    const VectorXd expected =
        rollout_oracle(agent, x0, VectorXd::Zero(T), scen, {{1, VectorXd::Zero(1)}}, zeros);
    CHECK((op.phi - expected).cwiseAbs().maxCoeff() < 1e-12);

    // Two scenarios differing only in w share Phi but not phi.
    auto scen2 = scen;
    scen2.w = MatrixXd::Constant(T, 1, 5.0);
    const auto cond2 = program::condense_agent(agent, x0, scen2, {{1, VectorXd::Zero(1)}});
    CHECK((cond.Phi - cond2.Phi).cwiseAbs().maxCoeff() == 0.0);
    CHECK((cond.phi_base - cond2.phi_base).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("centralized builder reduces to deterministic MPC at zero uncertainty") {
    casestudy::ThreeRoomOptions options;
    options.w_band_fraction = 0.0;
    options.delta_cap = 0.0;
    const auto net = casestudy::three_room(options);
    const auto sys = net.assemble();
    const int T = net.horizon;

    std::vector<program::GlobalScenario> scens(1);
    scens[0].w.resize(T, 3);
    for (int i = 0; i < 3; ++i) {
        scens[0].w.col(i) = net.blocks[static_cast<std::size_t>(i)].process.w_nominal.col(0);
    }
    scens[0].delta = MatrixXd::Zero(T, 3);

    VectorXd x0(3);
    x0 << 21.0, 19.0, 23.0;
    const auto inst = program::build_centralized(sys, x0, scens, scens);
    const auto sol = qp::solve(inst.quadprog);
    REQUIRE(sol.status == qp::QpStatus::Optimal);

    // Independent deterministic formulation: variables (x_1..x_T, v_0..v_{T-1})
    // with explicit dynamics equalities.
    const int n = 3, m = 3;
    const int dim = T * (n + m);
    qp::QuadraticProgram det;
    det.H = MatrixXd::Zero(dim, dim);
    det.f = VectorXd::Zero(dim);
    for (int t = 0; t < T; ++t) {
        det.H.block(t * n, t * n, n, n) = 2.0 * (t == T - 1 ? sys.P : sys.Q);
        det.H.block(T * n + t * m, T * n + t * m, m, m) = 2.0 * sys.R;
    }
    det.A_eq = MatrixXd::Zero(T * n, dim);
    det.b_eq = VectorXd::Zero(T * n);
    for (int t = 0; t < T; ++t) {
        det.A_eq.block(t * n, t * n, n, n) = -MatrixXd::Identity(n, n);
        det.A_eq.block(t * n, T * n + t * m, n, m) = sys.B_nom;
        const VectorXd drift = sys.C_nom * scens[0].w.row(t).transpose();
        if (t == 0) {
            det.b_eq.segment(0, n) = -(sys.A_nom * x0 + drift);
        } else {
            det.A_eq.block(t * n, (t - 1) * n, n, n) = sys.A_nom;
            det.b_eq.segment(t * n, n) = -drift;
        }
    }
    const int q = sys.state_polytope.rows();
    const int r = sys.input_polytope.rows();
    det.A_in = MatrixXd::Zero(T * (q + r), dim);
    det.b_in = VectorXd::Zero(T * (q + r));
    for (int t = 0; t < T; ++t) {
        det.A_in.block(t * q, t * n, q, n) = sys.state_polytope.A;
        det.b_in.segment(t * q, q) = sys.state_polytope.b;
        det.A_in.block(T * q + t * r, T * n + t * m, r, m) = sys.input_polytope.A;
        det.b_in.segment(T * q + t * r, r) = sys.input_polytope.b;
    }
    const auto det_sol = qp::solve(det);
    REQUIRE(det_sol.status == qp::QpStatus::Optimal);
    CHECK((sol.x - det_sol.x.tail(T * m)).cwiseAbs().maxCoeff() < 1e-4);

    // Objective values agree (the condensed form carries the stage-0 cost in
    // its constant).
    const double obj_condensed = sol.objective + inst.objective_constant;
    const double obj_det = det_sol.objective + x0.dot(sys.Q * x0);
    CHECK(obj_condensed == doctest::Approx(obj_det).epsilon(1e-6));
}

TEST_CASE("unconstrained optimum matches the normal equations") {
    casestudy::ThreeRoomOptions options;
    options.w_band_fraction = 0.0;
    options.delta_cap = 0.0;
    auto net = casestudy::three_room(options);
    for (auto& blk : net.blocks) {
        blk.state_polytope.b = Eigen::VectorXd::Constant(2, 1e6);
        blk.input_polytope.b = Eigen::VectorXd::Constant(2, 1e6);
    }
    const auto sys = net.assemble();
    const int T = net.horizon;
    std::vector<program::GlobalScenario> scens(1);
    scens[0].w.resize(T, 3);
    for (int i = 0; i < 3; ++i) {
        scens[0].w.col(i) = net.blocks[static_cast<std::size_t>(i)].process.w_nominal.col(0);
    }
    scens[0].delta = MatrixXd::Zero(T, 3);
    VectorXd x0(3);
    x0 << 21.0, 19.0, 23.0;

    const auto inst = program::build_centralized(sys, x0, scens, scens);
    const auto sol = qp::solve(inst.quadprog);
    REQUIRE(sol.status == qp::QpStatus::Optimal);
    const VectorXd expect = inst.quadprog.H.ldlt().solve(-inst.quadprog.f);
    CHECK((sol.x - expect).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("infeasible instance reports Infeasible") {
    casestudy::ThreeRoomOptions options;
    options.w_band_fraction = 0.0;
    options.delta_cap = 0.0;
    const auto net = casestudy::three_room(options);
    const auto sys = net.assemble();
    const int T = net.horizon;
    std::vector<program::GlobalScenario> scens(1);
    scens[0].w = MatrixXd::Zero(T, 3);  // no heating: rooms fall out of the band
    scens[0].delta = MatrixXd::Zero(T, 3);
    VectorXd x0(3);
    x0 << 21.0, 19.0, 23.0;
    const auto inst = program::build_centralized(sys, x0, scens, scens);
    const auto sol = qp::solve(inst.quadprog);
    CHECK(sol.status == qp::QpStatus::Infeasible);
}

TEST_CASE("time-0 input rows appear exactly once regardless of S") {
    const auto net = casestudy::three_room();
    const auto sys = net.assemble();
    const int T = net.horizon;
    std::vector<program::GlobalScenario> scens;
    for (int s = 0; s < 3; ++s) {
        program::GlobalScenario g;
        g.w.resize(T, 3);
        for (int i = 0; i < 3; ++i) {
            g.w.col(i) = net.blocks[static_cast<std::size_t>(i)].process.w_nominal.col(0) *
                         (1.0 + 0.001 * s);
        }
        g.delta = MatrixXd::Zero(T, 3);
        scens.push_back(std::move(g));
    }
    VectorXd x0(3);
    x0 << 21.0, 19.0, 23.0;

    // K = 0 network: scenario-independent input rows, deduplicated.
    const auto inst = program::build_centralized(sys, x0, scens, {scens[0]});
    int time0 = 0, input_rows = 0, state_rows = 0;
    for (const auto& row : inst.rows) {
        if (row.kind == program::RowInfo::Kind::InputTime0) ++time0;
        if (row.kind == program::RowInfo::Kind::Input) ++input_rows;
        if (row.kind == program::RowInfo::Kind::State) ++state_rows;
    }
    CHECK(time0 == sys.input_polytope.rows());
    CHECK(input_rows == (T - 1) * sys.input_polytope.rows());
    CHECK(state_rows == 3 * T * sys.state_polytope.rows());

    // K != 0: later input rows become scenario-dependent, time 0 stays single.
    auto net_k = net;
    for (auto& blk : net_k.blocks) blk.K = MatrixXd::Constant(1, 1, -0.01);
    const auto sys_k = net_k.assemble();
    const auto inst_k = program::build_centralized(sys_k, x0, scens, {scens[0]});
    time0 = 0;
    input_rows = 0;
    for (const auto& row : inst_k.rows) {
        if (row.kind == program::RowInfo::Kind::InputTime0) ++time0;
        if (row.kind == program::RowInfo::Kind::Input) ++input_rows;
    }
    CHECK(time0 == sys_k.input_polytope.rows());
    CHECK(input_rows == 3 * (T - 1) * sys_k.input_polytope.rows());
}

TEST_CASE("local primal program: penalty vanishes at matching estimates") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const auto& agent = agents[0];
    const int T = net.horizon;
    const VectorXd x0 = VectorXd::Constant(1, 21.0);
    std::map<int, VectorXd> neighbor_x0{{1, VectorXd::Constant(1, 19.0)}};

    const auto scens = scenario::draw_scenarios(net.blocks[0].process, 0, 3, T, 99).scenarios;
    program::NeighborTrajectories z;
    z[1].assign(3, VectorXd::Constant(T, 19.0));
    const auto cond = program::condense_agent_batch(agent, x0, scens, {scens[0]}, neighbor_x0);

    // No incoming estimates: a standalone scenario program.
    const auto standalone = program::build_local_primal(cond, z, {}, 1.0);
    const auto sol = qp::solve(standalone.quadprog);
    REQUIRE(sol.status == qp::QpStatus::Optimal);

    // Incoming estimates equal to this agent's own predictions at sol.x with
    // zero multipliers: the penalty term evaluates to zero there.
    std::map<int, program::IncomingPenalty> incoming;
    auto& pen = incoming[1];
    for (int s = 0; s < 3; ++s) {
        const auto op = program::resolve(cond.constraint_ops[static_cast<std::size_t>(s)],
                                         {{1, z[1][static_cast<std::size_t>(s)]}});
        pen.estimates.push_back(op.Phi * sol.x + op.phi);
        pen.multipliers.push_back(VectorXd::Zero(T));
    }
    const auto with_pen = program::build_local_primal(cond, z, incoming, 2.5);
    const double obj_plain = 0.5 * sol.x.dot(standalone.quadprog.H * sol.x) +
                             standalone.quadprog.f.dot(sol.x) + standalone.objective_constant;
    const double obj_pen = 0.5 * sol.x.dot(with_pen.quadprog.H * sol.x) +
                           with_pen.quadprog.f.dot(sol.x) + with_pen.objective_constant;
    CHECK(obj_pen == doctest::Approx(obj_plain).epsilon(1e-9));
}

TEST_CASE("projection: unconstrained and clamped cases") {
    auto net = casestudy::three_room();
    const int T = net.horizon;
    net.blocks[0].state_polytope.b = Eigen::VectorXd::Constant(2, 1e9);
    auto agents = net.build_agents();
    const auto& agent = agents[0];
    const VectorXd x0 = VectorXd::Constant(1, 21.0);
    std::map<int, VectorXd> neighbor_x0{{1, VectorXd::Constant(1, 19.0)}};
    const auto scens = scenario::draw_scenarios(net.blocks[0].process, 0, 2, T, 5).scenarios;
    const auto cond = program::condense_agent_batch(agent, x0, scens, {scens[0]}, neighbor_x0);

    program::NeighborTrajectories xj, lam;
    std::mt19937_64 eng(55);
    std::normal_distribution<double> gauss(19.0, 1.0);
    for (int s = 0; s < 2; ++s) {
        VectorXd t(T), l(T);
        for (int k = 0; k < T; ++k) {
            t(k) = gauss(eng);
            l(k) = 0.1 * (gauss(eng) - 19.0);
        }
        xj[1].push_back(t);
        lam[1].push_back(l);
    }

    const double mu = 2.0;
    const auto inst = program::build_projection(cond, VectorXd::Zero(T), xj, lam, mu);
    const auto sol = qp::solve(inst.quadprog);
    REQUIRE(sol.status == qp::QpStatus::Optimal);
    // Unconstrained projection: z = x_j - Lambda/mu exactly.
    for (int s = 0; s < 2; ++s) {
        const VectorXd expect = xj[1][static_cast<std::size_t>(s)] -
                                lam[1][static_cast<std::size_t>(s)] / mu;
        CHECK((sol.x.segment(s * T, T) - expect).cwiseAbs().maxCoeff() < 1e-6);
    }

    // Lambda = 0 and feasible x_j: z = x_j.
    program::NeighborTrajectories zero_lam;
    zero_lam[1].assign(2, VectorXd::Zero(T));
    const auto inst2 = program::build_projection(cond, VectorXd::Zero(T), xj, zero_lam, mu);
    const auto sol2 = qp::solve(inst2.quadprog);
    for (int s = 0; s < 2; ++s) {
        CHECK((sol2.x.segment(s * T, T) - xj[1][static_cast<std::size_t>(s)])
                  .cwiseAbs()
                  .maxCoeff() < 1e-6);
    }
}

TEST_CASE("robust builder: zero-width boxes reproduce the exact-neighbor program") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const auto& agent = agents[0];
    const int T = net.horizon;
    const VectorXd x0 = VectorXd::Constant(1, 21.0);
    std::map<int, VectorXd> neighbor_x0{{1, VectorXd::Constant(1, 19.0)}};
    const auto scens = scenario::draw_scenarios(net.blocks[0].process, 0, 4, T, 77).scenarios;
    const auto cond = program::condense_agent_batch(agent, x0, scens, {scens[0]}, neighbor_x0);

    const VectorXd center = VectorXd::Constant(T, 19.0);
    softcomm::ReliabilityBox box;
    box.center = center;
    box.half_width = VectorXd::Zero(T);
    box.alpha_tilde = 1.0;

    const auto robust = program::build_robust_local(cond, {{1, box}});
    program::NeighborTrajectories z;
    z[1].assign(4, center);
    const auto exact = program::build_local_primal(cond, z, {}, 1.0);

    CHECK((robust.quadprog.H - exact.quadprog.H).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((robust.quadprog.f - exact.quadprog.f).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((robust.quadprog.b_in - exact.quadprog.b_in).cwiseAbs().maxCoeff() < 1e-12);

    // Widening any box never enlarges the feasible set: the wide-box solution
    // stays feasible for the narrow-box program.
    softcomm::ReliabilityBox wide = box;
    wide.half_width = VectorXd::Constant(T, 0.3);
    const auto robust_wide = program::build_robust_local(cond, {{1, wide}});
    const auto sol_wide = qp::solve(robust_wide.quadprog);
    REQUIRE(sol_wide.status == qp::QpStatus::Optimal);
    CHECK(((robust.quadprog.A_in * sol_wide.x - robust.quadprog.b_in).array() <= 1e-7).all());
    const int affected = static_cast<int>(
        ((robust.quadprog.b_in - robust_wide.quadprog.b_in).array() > 1e-12).count());
    CHECK(affected > 0);
}

TEST_CASE("empirical cost evaluation") {
    const MatrixXd Q = MatrixXd::Identity(1, 1);
    const MatrixXd R = MatrixXd::Identity(1, 1) * 0.5;
    const MatrixXd P = MatrixXd::Identity(1, 1) * 2.0;
    const MatrixXd K = MatrixXd::Zero(1, 1);

    CHECK(program::empirical_cost(VectorXd::Zero(1), {VectorXd::Zero(3)}, VectorXd::Zero(3), K,
                                  Q, R, P) == 0.0);

    VectorXd x0 = VectorXd::Constant(1, 2.0);
    VectorXd traj(3);
    traj << 1.0, 0.5, 0.25;
    VectorXd v(3);
    v << -1.0, 0.5, 0.0;
    // stage: x: 2^2 + 1^2 + 0.5^2, u: 0.5*(1 + 0.25 + 0), terminal 2*0.25^2
    const double expect = (4.0 + 1.0 + 0.25) + 0.5 * 1.25 + 2.0 * 0.0625;
    CHECK(program::empirical_cost(x0, {traj}, v, K, Q, R, P) ==
          doctest::Approx(expect).epsilon(1e-12));

    VectorXd t2 = traj * 2.0, t3 = traj * 0.5;
    const double c1 = program::empirical_cost(x0, {traj}, v, K, Q, R, P);
    const double c2 = program::empirical_cost(x0, {t2}, v, K, Q, R, P);
    const double c3 = program::empirical_cost(x0, {t3}, v, K, Q, R, P);
    CHECK(program::empirical_cost(x0, {traj, t2, t3}, v, K, Q, R, P) ==
          doctest::Approx((c1 + c2 + c3) / 3.0).epsilon(1e-12));
}

TEST_CASE("program dump is human-readable") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const int T = net.horizon;
    const auto scens = scenario::draw_scenarios(net.blocks[0].process, 0, 1, T, 1).scenarios;
    const auto cond = program::condense_agent_batch(
        agents[0], VectorXd::Constant(1, 21.0), scens, scens,
        {{1, VectorXd::Constant(1, 19.0)}});
    program::NeighborTrajectories z;
    z[1].assign(1, VectorXd::Constant(T, 19.0));
    const auto inst = program::build_local_primal(cond, z, {}, 1.0);
    const std::string text = inst.dump();
    CHECK(text.find("LocalPrimal") != std::string::npos);
    CHECK(text.find("state") != std::string::npos);
    CHECK(text.find("input@0") != std::string::npos);
}

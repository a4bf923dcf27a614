#include <doctest.h>

#include <random>

#include "dsmpc/casestudy.hpp"
#include "dsmpc/exchange.hpp"
#include "dsmpc/mpc.hpp"

using namespace dsmpc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

mpc::Network two_agent_chain(double coupling_12, double coupling_21) {
    mpc::Network net;
    net.horizon = 2;
    for (int i = 0; i < 2; ++i) {
        mpc::AgentBlock blk;
        blk.A_ii = MatrixXd::Constant(1, 1, 0.5);
        blk.B = MatrixXd::Constant(1, 1, 1.0);
        blk.C = MatrixXd::Constant(1, 1, 1.0);
        blk.state_polytope.A.resize(2, 1);
        blk.state_polytope.A << 1.0, -1.0;
        blk.state_polytope.b = VectorXd::Constant(2, 50.0);
        blk.input_polytope.A.resize(2, 1);
        blk.input_polytope.A << 1.0, -1.0;
        blk.input_polytope.b = VectorXd::Constant(2, 50.0);
        blk.K = MatrixXd::Zero(1, 1);
        blk.Q = MatrixXd::Identity(1, 1);
        blk.R = MatrixXd::Identity(1, 1);
        blk.P = MatrixXd::Identity(1, 1);
        blk.x0 = VectorXd::Constant(1, i == 0 ? 1.0 : -1.0);
        blk.process.w_nominal = MatrixXd::Zero(net.horizon, 1);
        blk.process.w_band_fraction = 0.0;
        blk.process.delta_stddev = 0.0;
        blk.process.delta_cap = 0.0;
        net.blocks.push_back(std::move(blk));
    }
    if (coupling_12 != 0.0) net.blocks[0].couplings[1] = MatrixXd::Constant(1, 1, coupling_12);
    if (coupling_21 != 0.0) net.blocks[1].couplings[0] = MatrixXd::Constant(1, 1, coupling_21);
    return net;
}

std::vector<std::vector<scenario::Scenario>> zero_scens(const mpc::Network& net, int count) {
    std::vector<std::vector<scenario::Scenario>> out;
    for (int i = 0; i < net.agent_count(); ++i) {
        out.push_back(scenario::draw_scenarios(net.blocks[static_cast<std::size_t>(i)].process,
                                               i, count, net.horizon, 1)
                          .scenarios);
    }
    return out;
}

}  // namespace

TEST_CASE("message codec round-trips bit-exactly") {
    std::mt19937_64 eng(81);
    std::normal_distribution<double> gauss(0.0, 10.0);
    for (int trial = 0; trial < 100; ++trial) {
        exchange::ExchangeMessage msg;
        msg.kind = static_cast<exchange::MessageKind>(1 + eng() % 3);
        msg.sender = static_cast<std::uint16_t>(eng() % 100);
        msg.receiver = static_cast<std::uint16_t>(eng() % 100);
        msg.iteration = static_cast<std::uint32_t>(eng() % 10000);
        const int count = static_cast<int>(eng() % 5);
        const int dim = 1 + static_cast<int>(eng() % 8);
        for (int c = 0; c < count; ++c) {
            VectorXd traj(dim);
            for (int k = 0; k < dim; ++k) traj(k) = gauss(eng);
            msg.payload.push_back(traj);
        }
        const auto bytes = exchange::encode_message(msg);
        CHECK(bytes.size() ==
              17 + 8 * static_cast<std::size_t>(count) * static_cast<std::size_t>(dim));
        CHECK(exchange::decode_message(bytes) == msg);
    }
}

TEST_CASE("dual update arithmetic") {
    program::NeighborTrajectories lambda, z, x;
    lambda[1] = {VectorXd::Zero(3)};
    z[1] = {VectorXd::Constant(3, 2.0)};
    x[1] = {VectorXd::Constant(3, 2.0)};
    // z = x: unchanged.
    auto next = exchange::dual_update(lambda, z, x, 1.0);
    CHECK(next[1][0].cwiseAbs().maxCoeff() == 0.0);

    // mu = 1, z - x = e1.
    x[1][0](0) = 1.0;
    next = exchange::dual_update(lambda, z, x, 1.0);
    CHECK(next[1][0](0) == doctest::Approx(1.0));
    CHECK(next[1][0](1) == 0.0);

    // Three accumulation steps match the hand sum.
    program::NeighborTrajectories acc = lambda;
    double hand = 0.0;
    for (int it = 0; it < 3; ++it) {
        acc = exchange::dual_update(acc, z, x, 0.5);
        hand += 0.5 * (z[1][0](0) - x[1][0](0));
    }
    CHECK(acc[1][0](0) == doctest::Approx(hand));
}

TEST_CASE("residual definition") {
    program::NeighborTrajectories z, x;
    z[1] = {VectorXd::Zero(4)};
    x[1] = {VectorXd::Zero(4)};
    CHECK(exchange::residual(z, x, 2.0) == 0.0);

    // Single mismatch of norm 2 with mu = 2: (mu/2)*4 = 4.
    z[1][0](0) = 2.0;
    CHECK(exchange::residual(z, x, 2.0) == doctest::Approx(4.0));

    // Random state matches an independent recomputation.
    std::mt19937_64 eng(83);
    std::normal_distribution<double> gauss(0.0, 1.0);
    program::NeighborTrajectories z2, x2;
    double expect = 0.0;
    const double mu = 1.7;
    for (int j : {0, 2}) {
        for (int s = 0; s < 3; ++s) {
            VectorXd a(5), b(5);
            for (int k = 0; k < 5; ++k) {
                a(k) = gauss(eng);
                b(k) = gauss(eng);
            }
            z2[j].push_back(a);
            x2[j].push_back(b);
            expect += 0.5 * mu * (a - b).squaredNorm();
        }
    }
    CHECK(exchange::residual(z2, x2, mu) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("SUS rollout matches the condensation at 1e-10") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const auto& agent = agents[1];
    const int T = net.horizon;
    const VectorXd x0 = VectorXd::Constant(1, 19.0);
    std::map<int, VectorXd> neighbor_x0{{0, VectorXd::Constant(1, 21.0)},
                                        {2, VectorXd::Constant(1, 23.0)}};
    const auto scens =
        scenario::draw_scenarios(net.blocks[1].process, 1, 5, T, 313).scenarios;

    std::mt19937_64 eng(89);
    std::normal_distribution<double> gauss(0.0, 1.0);
    program::NeighborTrajectories estimates;
    for (int j : agent.neighbors) {
        for (int s = 0; s < 5; ++s) {
            VectorXd z(T);
            for (int k = 0; k < T; ++k) z(k) = 21.0 + gauss(eng);
            estimates[j].push_back(z);
        }
    }
    VectorXd v(T);
    for (int k = 0; k < T; ++k) v(k) = gauss(eng);

    const auto trajs = exchange::sus_update(agent, x0, v, scens, estimates, neighbor_x0);
    const auto cond = program::condense_agent_batch(agent, x0, scens, {}, neighbor_x0);
    for (int s = 0; s < 5; ++s) {
        std::map<int, VectorXd> z_s;
        for (int j : agent.neighbors) z_s[j] = estimates[j][static_cast<std::size_t>(s)];
        const auto op = program::resolve(cond.constraint_ops[static_cast<std::size_t>(s)], z_s);
        CHECK((trajs[static_cast<std::size_t>(s)] - (op.Phi * v + op.phi)).cwiseAbs().maxCoeff() <
              1e-10);
    }

    // Scenario independence: changing scenario s only affects trajectory s.
    auto scens2 = scens;
    scens2[2].w.array() += 1.0;
    const auto trajs2 = exchange::sus_update(agent, x0, v, scens2, estimates, neighbor_x0);
    for (int s = 0; s < 5; ++s) {
        if (s == 2) {
            CHECK((trajs2[2] - trajs[2]).cwiseAbs().maxCoeff() > 0.0);
        } else {
            CHECK((trajs2[static_cast<std::size_t>(s)] - trajs[static_cast<std::size_t>(s)])
                      .cwiseAbs()
                      .maxCoeff() == 0.0);
        }
    }

    // Pure nominal rollout when everything is zero.
    auto zero_net = two_agent_chain(0.0, 0.0);
    const auto zero_agents = zero_net.build_agents();
    const auto zscens = zero_scens(zero_net, 1);
    const auto ztrajs = exchange::sus_update(zero_agents[0], VectorXd::Constant(1, 1.0),
                                             VectorXd::Zero(2), zscens[0], {}, {});
    CHECK(ztrajs[0](0) == doctest::Approx(0.5));
    CHECK(ztrajs[0](1) == doctest::Approx(0.25));
}

TEST_CASE("primal update: decoupled agent solves its standalone program") {
    auto net = two_agent_chain(0.0, 0.0);
    const auto agents = net.build_agents();
    const auto scens = zero_scens(net, 1);
    const auto cond = program::condense_agent_batch(agents[0], net.blocks[0].x0, scens[0],
                                                    scens[0], {});
    const VectorXd v1 = exchange::primal_update(cond, {}, {}, 1.0);
    const auto inst = program::build_local_primal(cond, {}, {}, 1.0);
    const auto sol = qp::solve(inst.quadprog);
    CHECK((v1 - sol.x).cwiseAbs().maxCoeff() < 1e-9);

    // Determinism: repeated calls give identical output.
    const VectorXd v2 = exchange::primal_update(cond, {}, {}, 1.0);
    CHECK(std::memcmp(v1.data(), v2.data(), sizeof(double) * 2) == 0);
}

TEST_CASE("penalty-dominant mu pulls predictions toward the incoming estimates") {
    auto net = two_agent_chain(0.3, 0.2);
    const auto agents = net.build_agents();
    const int T = net.horizon;
    const auto scens = zero_scens(net, 1);
    std::map<int, VectorXd> neighbor_x0{{1, net.blocks[1].x0}};
    const auto cond = program::condense_agent_batch(agents[0], net.blocks[0].x0, scens[0],
                                                    scens[0], neighbor_x0);

    program::NeighborTrajectories own;
    own[1].assign(1, VectorXd::Constant(T, -0.5));
    std::map<int, program::IncomingPenalty> incoming;
    incoming[1].estimates.assign(1, VectorXd::Constant(T, 5.0));
    incoming[1].multipliers.assign(1, VectorXd::Zero(T));

    auto penalty_at = [&](double mu) {
        const VectorXd v = exchange::primal_update(cond, own, incoming, mu);
        const auto op = program::resolve(cond.constraint_ops[0], {{1, own[1][0]}});
        const VectorXd x = op.Phi * v + op.phi;
        return (incoming[1].estimates[0] - x).squaredNorm();
    };
    CHECK(penalty_at(1000.0) < penalty_at(0.01));
}

TEST_CASE("projection update agrees with the full projection instance") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const auto& agent = agents[1];
    const int T = net.horizon;
    const VectorXd x0 = VectorXd::Constant(1, 19.0);
    std::map<int, VectorXd> neighbor_x0{{0, VectorXd::Constant(1, 21.0)},
                                        {2, VectorXd::Constant(1, 23.0)}};
    const auto scens = scenario::draw_scenarios(net.blocks[1].process, 1, 3, T, 17).scenarios;
    const auto cond = program::condense_agent_batch(agent, x0, scens, {scens[0]}, neighbor_x0);

    std::mt19937_64 eng(97);
    std::normal_distribution<double> gauss(0.0, 0.3);
    program::NeighborTrajectories xj, lam;
    for (int j : agent.neighbors) {
        const double base = j == 0 ? 21.0 : 23.0;
        for (int s = 0; s < 3; ++s) {
            VectorXd t(T), l(T);
            for (int k = 0; k < T; ++k) {
                t(k) = base + gauss(eng);
                l(k) = gauss(eng);
            }
            xj[j].push_back(t);
            lam[j].push_back(l);
        }
    }
    const double mu = 1.3;
    const VectorXd v = VectorXd::Zero(T);
    const auto z = exchange::projection_update(cond, v, xj, lam, mu);

    const auto inst = program::build_projection(cond, v, xj, lam, mu);
    const auto sol = qp::solve(inst.quadprog);
    REQUIRE(sol.status == qp::QpStatus::Optimal);
    int col = 0;
    for (int s = 0; s < 3; ++s) {
        for (int j : agent.neighbors) {
            CHECK((z.at(j)[static_cast<std::size_t>(s)] - sol.x.segment(col, T))
                      .cwiseAbs()
                      .maxCoeff() < 1e-5);
            col += T;
        }
    }
}

TEST_CASE("decoupled network converges at iteration 1 with zero residual") {
    auto net = two_agent_chain(0.0, 0.0);
    const auto agents = net.build_agents();
    const auto scens = zero_scens(net, 1);
    exchange::ExchangeConfig config;
    exchange::InProcessTransport transport;
    const auto res = exchange::run_exchange(agents, {net.blocks[0].x0, net.blocks[1].x0},
                                            scens, scens, config, transport);
    CHECK(res.status == exchange::ExchangeStatus::Converged);
    CHECK(res.iterations == 1);
    CHECK(res.total_residual_history.back() == 0.0);
    CHECK(transport.undelivered() == 0);

    // The returned inputs coincide with the standalone solutions.
    for (int i = 0; i < 2; ++i) {
        const auto cond = program::condense_agent_batch(
            agents[static_cast<std::size_t>(i)], net.blocks[static_cast<std::size_t>(i)].x0,
            scens[static_cast<std::size_t>(i)], scens[static_cast<std::size_t>(i)], {});
        const auto inst = program::build_local_primal(cond, {}, {}, config.mu);
        const auto sol = qp::solve(inst.quadprog);
        CHECK((res.v[static_cast<std::size_t>(i)] - sol.x).cwiseAbs().maxCoeff() < 1e-9);
    }
}

TEST_CASE("two coupled scalar agents: ADMM follows the hand-rolled recursion") {
    auto net = two_agent_chain(0.3, 0.2);
    const auto agents = net.build_agents();
    const int T = net.horizon;
    const auto scens = zero_scens(net, 1);
    const std::vector<VectorXd> x0{net.blocks[0].x0, net.blocks[1].x0};
    const double mu = 1.0;

    // Hand-rolled two iterations with closed-form unconstrained solves.
    // Condensation for scalar dynamics x+ = a x + v + c z (zero noise):
    //   x1 = a x0 + v0 + c z0(= neighbor x0), x2 = a x1 + v1 + c z1.
    const double a = 0.5;
    const double c01 = 0.3, c10 = 0.2;
    auto phi_of = [&](double x0_own, double coupling, double zx0, double z1) {
        VectorXd phi(2);
        phi(0) = a * x0_own + coupling * zx0;
        phi(1) = a * phi(0) + coupling * z1;
        return phi;
    };
    MatrixXd Phi(2, 2);
    Phi << 1.0, 0.0, a, 1.0;

    // Initial estimates: the neighbor's nominal rollout (v = 0, neighbors
    // frozen at x0), matching the exchange initialization.
    auto nominal = [&](double x_own, double coupling, double x_other) {
        VectorXd r(2);
        r(0) = a * x_own + coupling * x_other;
        r(1) = a * r(0) + coupling * x_other;
        return r;
    };
    VectorXd z01 = nominal(x0[1](0), c10, x0[0](0));  // agent 0's estimate of agent 1
    VectorXd z10 = nominal(x0[0](0), c01, x0[1](0));  // agent 1's estimate of agent 0
    VectorXd lam01 = VectorXd::Zero(2), lam10 = VectorXd::Zero(2);
    VectorXd in_est0 = nominal(x0[0](0), c01, x0[1](0));  // what agent 1 holds for agent 0
    VectorXd in_est1 = nominal(x0[1](0), c10, x0[0](0));
    VectorXd in_lam0 = VectorXd::Zero(2), in_lam1 = VectorXd::Zero(2);

    VectorXd v0, v1, x_traj0, x_traj1;
    for (int iter = 0; iter < 2; ++iter) {
        // Primal: min v'(Q_t + I R)v terms; build the quadratic by hand.
        // J_i(v) = x1^2 + v0^2 + v1^2 + x2^2(P=1) + (mu/2)||z_in - x(v) + lam/mu||^2
        auto primal = [&](const VectorXd& phi, const VectorXd& z_in, const VectorXd& lam_in) {
            const MatrixXd q_tilde = MatrixXd::Identity(2, 2);  // Q at step1, P at step2
            MatrixXd h = 2.0 * (Phi.transpose() * q_tilde * Phi + MatrixXd::Identity(2, 2));
            VectorXd f = 2.0 * Phi.transpose() * q_tilde * phi;
            const VectorXd target = z_in + lam_in / mu - phi;
            h += mu * Phi.transpose() * Phi;
            f -= mu * Phi.transpose() * target;
            return VectorXd(h.ldlt().solve(-f));
        };
        const VectorXd phi0 = phi_of(x0[0](0), c01, x0[1](0), z01(0));
        const VectorXd phi1 = phi_of(x0[1](0), c10, x0[0](0), z10(0));
        v0 = primal(phi0, in_est0, in_lam0);
        v1 = primal(phi1, in_est1, in_lam1);

        // SUS with the current estimates.
        x_traj0 = Phi * v0 + phi0;
        x_traj1 = Phi * v1 + phi1;

        // Projection (unconstrained; the state set is wide): z = x - lam/mu.
        z01 = x_traj1 - lam01 / mu;
        z10 = x_traj0 - lam10 / mu;

        // Dual updates on both sides.
        lam01 += mu * (z01 - x_traj1);
        lam10 += mu * (z10 - x_traj0);
        in_est0 = z10;
        in_lam0 = lam10;
        in_est1 = z01;
        in_lam1 = lam01;
    }

    exchange::ExchangeConfig config;
    config.mu = mu;
    config.max_iterations = 2;
    config.default_tolerance = 0.0;  // force exactly two iterations
    exchange::InProcessTransport transport;
    const auto res = exchange::run_exchange(agents, x0, scens, scens, config, transport);
    CHECK(res.iterations == 2);
    CHECK((res.v[0] - v0).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((res.v[1] - v1).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((res.states[0].z.at(1)[0] - z01).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((res.states[1].z.at(0)[0] - z10).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((res.states[0].lambda.at(1)[0] - lam01).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("deterministic coupled pair reaches the centralized optimum") {
    // Directed coupling: agent 1 depends on agent 0. The exchange then has a
    // unique consistent fixed point equal to the joint optimum.
    auto net = two_agent_chain(0.0, 0.2);
    const auto agents = net.build_agents();
    const auto scens = zero_scens(net, 1);
    const std::vector<VectorXd> x0{net.blocks[0].x0, net.blocks[1].x0};

    exchange::ExchangeConfig config;
    config.default_tolerance = 1e-10;
    config.max_iterations = 500;
    exchange::InProcessTransport transport;
    const auto res = exchange::run_exchange(agents, x0, scens, scens, config, transport);
    REQUIRE(res.status == exchange::ExchangeStatus::Converged);

    // Centralized oracle on the assembled system.
    const auto sys = net.assemble();
    std::vector<program::GlobalScenario> gscens(1);
    gscens[0].w = MatrixXd::Zero(net.horizon, 2);
    gscens[0].delta = MatrixXd::Zero(net.horizon, 2);
    VectorXd x_global(2);
    x_global << x0[0](0), x0[1](0);
    const auto inst = program::build_centralized(sys, x_global, gscens, gscens);
    const auto central = qp::solve(inst.quadprog);
    REQUIRE(central.status == qp::QpStatus::Optimal);
    const double j_central = central.objective + inst.objective_constant;

    // Joint rollout under the exchanged inputs gives the summed local cost.
    double j_local = 0.0;
    {
        VectorXd x = x_global;
        double cost = x.dot(sys.Q * x);
        for (int k = 0; k < net.horizon; ++k) {
            VectorXd v_k(2);
            v_k << res.v[0](k), res.v[1](k);
            cost += v_k.dot(sys.R * v_k);
            x = sys.A_nom * x + sys.B_nom * v_k;
            if (k < net.horizon - 1) cost += x.dot(sys.Q * x);
        }
        cost += x.dot(sys.P * x);
        j_local = cost;
    }
    CHECK(std::abs(j_local - j_central) / std::abs(j_central) < 1e-4);
    CHECK(transport.undelivered() == 0);
}

TEST_CASE("three-room exchange: convergence, replay, order invariance, transports") {
    const auto net = casestudy::three_room();
    const auto agents = net.build_agents();
    const std::vector<VectorXd> x0{net.blocks[0].x0, net.blocks[1].x0, net.blocks[2].x0};

    std::vector<std::vector<scenario::Scenario>> cons, costs;
    for (int i = 0; i < 3; ++i) {
        cons.push_back(scenario::draw_scenarios(
                           net.blocks[static_cast<std::size_t>(i)].process, i, 5, net.horizon,
                           rng::derive(7, rng::Role::Constraint, {0, static_cast<std::uint64_t>(i)}))
                           .scenarios);
        costs.push_back(scenario::draw_scenarios(
                            net.blocks[static_cast<std::size_t>(i)].process, i, 3, net.horizon,
                            rng::derive(7, rng::Role::CostAveraging,
                                        {0, static_cast<std::uint64_t>(i)}))
                            .scenarios);
    }

    exchange::ExchangeConfig config;
    exchange::InProcessTransport t1;
    const auto res = exchange::run_exchange(agents, x0, cons, costs, config, t1);
    REQUIRE(res.status == exchange::ExchangeStatus::Converged);
    CHECK(res.total_residual_history.back() <= 3.0 * config.default_tolerance);
    CHECK(t1.undelivered() == 0);

    // Residual bound at termination: max ||z - x||_inf <= sqrt(2 tol / mu).
    const double bound = std::sqrt(2.0 * config.default_tolerance / config.mu);
    for (int i = 0; i < 3; ++i) {
        const auto& st = res.states[static_cast<std::size_t>(i)];
        for (int j : agents[static_cast<std::size_t>(i)].neighbors) {
            for (std::size_t s = 0; s < st.z.at(j).size(); ++s) {
                // Compare against the neighbor's final own trajectories.
                const auto& xj = res.states[static_cast<std::size_t>(j)].own_trajectories[s];
                CHECK((st.z.at(j)[s] - xj).cwiseAbs().maxCoeff() <= bound + 1e-9);
            }
        }
    }

    // Bitwise replay.
    exchange::InProcessTransport t2;
    const auto res2 = exchange::run_exchange(agents, x0, cons, costs, config, t2);
    CHECK(res2.iterations == res.iterations);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::memcmp(res.v[static_cast<std::size_t>(i)].data(),
                          res2.v[static_cast<std::size_t>(i)].data(),
                          sizeof(double) * static_cast<std::size_t>(
                                               res.v[static_cast<std::size_t>(i)].size())) == 0);
    }

    // Evaluation-order invariance, bit for bit.
    exchange::ExchangeConfig permuted = config;
    permuted.evaluation_order = {2, 0, 1};
    exchange::InProcessTransport t3;
    const auto res3 = exchange::run_exchange(agents, x0, cons, costs, permuted, t3);
    CHECK(res3.iterations == res.iterations);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::memcmp(res.v[static_cast<std::size_t>(i)].data(),
                          res3.v[static_cast<std::size_t>(i)].data(),
                          sizeof(double) * static_cast<std::size_t>(
                                               res.v[static_cast<std::size_t>(i)].size())) == 0);
    }

    // The byte-serialized transport exercises the same path with the same
    // results (payloads survive the codec bit-exactly).
    exchange::SerializingTransport t4;
    const auto res4 = exchange::run_exchange(agents, x0, cons, costs, config, t4);
    CHECK(res4.iterations == res.iterations);
    for (int i = 0; i < 3; ++i) {
        CHECK(std::memcmp(res.v[static_cast<std::size_t>(i)].data(),
                          res4.v[static_cast<std::size_t>(i)].data(),
                          sizeof(double) * static_cast<std::size_t>(
                                               res.v[static_cast<std::size_t>(i)].size())) == 0);
    }
}

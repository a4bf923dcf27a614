#include "dsmpc/exchange.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <iostream>
#include <limits>
#include <optional>

#include "dsmpc/errors.hpp"
#include "dsmpc/parallel.hpp"

namespace dsmpc::exchange {

namespace {

int log_level() {
    static const int level = [] {
        const char* env = std::getenv("DSMPC_LOG");
        return env ? std::atoi(env) : 0;
    }();
    return level;
}

}  // namespace

bool ExchangeMessage::operator==(const ExchangeMessage& other) const {
    if (kind != other.kind || sender != other.sender || receiver != other.receiver ||
        iteration != other.iteration || payload.size() != other.payload.size()) {
        return false;
    }
    for (std::size_t i = 0; i < payload.size(); ++i) {
        if (payload[i].size() != other.payload[i].size()) return false;
        if (std::memcmp(payload[i].data(), other.payload[i].data(),
                        sizeof(double) * static_cast<std::size_t>(payload[i].size())) != 0) {
            return false;
        }
    }
    return true;
}

std::vector<std::uint8_t> encode_message(const ExchangeMessage& msg) {
    const std::uint32_t count = static_cast<std::uint32_t>(msg.payload.size());
    const std::uint32_t dim =
        count == 0 ? 0 : static_cast<std::uint32_t>(msg.payload.front().size());
    for (const auto& traj : msg.payload) {
        if (static_cast<std::uint32_t>(traj.size()) != dim) {
            throw DimensionMismatch("message payload trajectories differ in length");
        }
    }

    std::vector<std::uint8_t> out;
    out.reserve(17 + 8 * static_cast<std::size_t>(count) * dim);
    auto put = [&out](const void* src, std::size_t bytes) {
        const auto* b = static_cast<const std::uint8_t*>(src);
        out.insert(out.end(), b, b + bytes);
    };
    const std::uint8_t kind = static_cast<std::uint8_t>(msg.kind);
    put(&kind, 1);
    put(&msg.sender, 2);
    put(&msg.receiver, 2);
    put(&msg.iteration, 4);
    put(&count, 4);
    put(&dim, 4);
    for (const auto& traj : msg.payload) {
        put(traj.data(), sizeof(double) * static_cast<std::size_t>(traj.size()));
    }
    return out;
}

ExchangeMessage decode_message(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    auto get = [&bytes, &pos](void* dst, std::size_t n) {
        if (pos + n > bytes.size()) throw Error("message payload truncated");
        std::memcpy(dst, bytes.data() + pos, n);
        pos += n;
    };
    ExchangeMessage msg;
    std::uint8_t kind = 0;
    get(&kind, 1);
    msg.kind = static_cast<MessageKind>(kind);
    get(&msg.sender, 2);
    get(&msg.receiver, 2);
    get(&msg.iteration, 4);
    std::uint32_t count = 0, dim = 0;
    get(&count, 4);
    get(&dim, 4);
    msg.payload.resize(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        msg.payload[i].resize(dim);
        get(msg.payload[i].data(), sizeof(double) * dim);
    }
    if (pos != bytes.size()) throw Error("message payload has trailing bytes");
    return msg;
}

void InProcessTransport::send(ExchangeMessage msg) {
    queue_.push_back(std::move(msg));
    ++sent_;
}

std::vector<ExchangeMessage> InProcessTransport::receive(int receiver, MessageKind kind,
                                                         std::uint32_t iteration) {
    std::vector<ExchangeMessage> out;
    auto it = queue_.begin();
    while (it != queue_.end()) {
        if (it->receiver == static_cast<std::uint16_t>(receiver) && it->kind == kind &&
            it->iteration == iteration) {
            out.push_back(std::move(*it));
            it = queue_.erase(it);
        } else {
            ++it;
        }
    }
    return out;
}

void SerializingTransport::send(ExchangeMessage msg) {
    inner_.send(decode_message(encode_message(msg)));
}

std::vector<ExchangeMessage> SerializingTransport::receive(int receiver, MessageKind kind,
                                                           std::uint32_t iteration) {
    return inner_.receive(receiver, kind, iteration);
}

Eigen::VectorXd primal_update(const program::AgentCondensation& cond,
                              const program::NeighborTrajectories& own_estimates,
                              const std::map<int, program::IncomingPenalty>& incoming,
                              double mu, const qp::QpSettings& settings) {
    const program::ProgramInstance inst =
        program::build_local_primal(cond, own_estimates, incoming, mu);
    const qp::QpSolution sol = qp::solve(inst.quadprog, settings);
    if (sol.status == qp::QpStatus::Infeasible) {
        throw SubproblemInfeasible(cond.agent->index, "local primal program infeasible");
    }
    return sol.x;
}

std::vector<Eigen::VectorXd> sus_update(const model::AgentModel& agent,
                                        const Eigen::VectorXd& x0, const Eigen::VectorXd& v,
                                        const std::vector<scenario::Scenario>& scens,
                                        const program::NeighborTrajectories& estimates,
                                        const std::map<int, Eigen::VectorXd>& neighbor_x0) {
    const int T = agent.horizon;
    const int n = agent.n;
    std::vector<Eigen::VectorXd> out(scens.size());
    for (std::size_t s = 0; s < scens.size(); ++s) {
        const auto& scen = scens[s];
        Eigen::VectorXd traj(T * n);
        Eigen::VectorXd x = x0;
        for (int k = 0; k < T; ++k) {
            const double d = scen.delta(k);
            const Eigen::VectorXd u = agent.K * x + v.segment(k * agent.m, agent.m);
            Eigen::VectorXd q = agent.C_i(d) * scen.w.row(k).transpose();
            for (int j : agent.neighbors) {
                Eigen::VectorXd xj;
                if (k == 0) {
                    const auto it = neighbor_x0.find(j);
                    if (it == neighbor_x0.end()) throw MissingNeighborState(j);
                    xj = it->second;
                } else {
                    const auto it = estimates.find(j);
                    if (it == estimates.end() || it->second.size() <= s) {
                        throw MissingNeighborState(j);
                    }
                    const int nj = static_cast<int>(it->second[s].size()) / T;
                    xj = it->second[s].segment((k - 1) * nj, nj);
                }
                q += agent.A_ij(j, d) * xj;
            }
            x = agent.A_ii(d) * x + agent.B_i(d) * u + q;
            traj.segment(k * n, n) = x;
        }
        out[s] = std::move(traj);
    }
    return out;
}

program::NeighborTrajectories projection_update(
    const program::AgentCondensation& cond, const Eigen::VectorXd& v_fixed,
    const program::NeighborTrajectories& neighbor_trajectories,
    const program::NeighborTrajectories& multipliers, double mu,
    const qp::QpSettings& settings) {
    const model::AgentModel& agent = *cond.agent;
    const int T = agent.horizon;
    const int S = static_cast<int>(cond.constraint_ops.size());

    program::NeighborTrajectories out;
    if (agent.neighbors.empty()) return out;

    Eigen::MatrixXd g_stack =
        Eigen::MatrixXd::Zero(T * agent.state_polytope.rows(), T * agent.n);
    Eigen::VectorXd g_rhs(T * agent.state_polytope.rows());
    for (int t = 0; t < T; ++t) {
        g_stack.block(t * agent.state_polytope.rows(), t * agent.n,
                      agent.state_polytope.rows(), agent.n) = agent.state_polytope.A;
        g_rhs.segment(t * agent.state_polytope.rows(), agent.state_polytope.rows()) =
            agent.state_polytope.b;
    }

    for (int j : agent.neighbors) {
        out[j].resize(static_cast<std::size_t>(S));
    }

    for (int s = 0; s < S; ++s) {
        const auto& op = cond.constraint_ops[static_cast<std::size_t>(s)];
        const Eigen::VectorXd base = op.Phi * v_fixed + op.phi_base;

        // Unconstrained minimizer: z_j = x_j - Lambda_j / mu.
        std::map<int, Eigen::VectorXd> target;
        int dim = 0;
        for (int j : agent.neighbors) {
            const auto& traj = neighbor_trajectories.at(j);
            const auto& lam = multipliers.at(j);
            target[j] = traj[static_cast<std::size_t>(s)] -
                        lam[static_cast<std::size_t>(s)] / mu;
            dim += static_cast<int>(target[j].size());
        }

        Eigen::VectorXd state = base;
        for (int j : agent.neighbors) state += op.Psi.at(j) * target[j];
        if (((g_stack * state - g_rhs).array() <= 1e-10).all()) {
            for (int j : agent.neighbors) {
                out[j][static_cast<std::size_t>(s)] = target[j];
            }
            continue;
        }

        qp::QuadraticProgram prog;
        prog.H = mu * Eigen::MatrixXd::Identity(dim, dim);
        prog.f.resize(dim);
        prog.A_in.resize(g_stack.rows(), dim);
        prog.b_in = g_rhs - g_stack * base;
        int col = 0;
        for (int j : agent.neighbors) {
            const auto& psi = op.Psi.at(j);
            const int nj = static_cast<int>(psi.cols());
            prog.A_in.middleCols(col, nj) = g_stack * psi;
            prog.f.segment(col, nj) = -mu * target[j];
            col += nj;
        }
        const qp::QpSolution sol = qp::solve(prog, settings);
        if (sol.status == qp::QpStatus::Infeasible) {
            throw SubproblemInfeasible(agent.index, "projection program infeasible");
        }
        col = 0;
        for (int j : agent.neighbors) {
            const int nj = static_cast<int>(target[j].size());
            out[j][static_cast<std::size_t>(s)] = sol.x.segment(col, nj);
            col += nj;
        }
    }
    return out;
}

program::NeighborTrajectories dual_update(const program::NeighborTrajectories& lambda,
                                          const program::NeighborTrajectories& z,
                                          const program::NeighborTrajectories& neighbor_traj,
                                          double mu) {
    program::NeighborTrajectories out = lambda;
    for (auto& [j, lams] : out) {
        const auto& zj = z.at(j);
        const auto& xj = neighbor_traj.at(j);
        for (std::size_t s = 0; s < lams.size(); ++s) {
            lams[s] += mu * (zj[s] - xj[s]);
        }
    }
    return out;
}

double residual(const program::NeighborTrajectories& z,
                const program::NeighborTrajectories& neighbor_traj, double mu) {
    double eta = 0.0;
    for (const auto& [j, zj] : z) {
        const auto& xj = neighbor_traj.at(j);
        for (std::size_t s = 0; s < zj.size(); ++s) {
            eta += 0.5 * mu * (zj[s] - xj[s]).squaredNorm();
        }
    }
    return eta;
}

namespace {

/// Nominal closed-loop rollout from the measured initial state: v = 0,
/// delta = 0, disturbance at the scenario-set mean, neighbors frozen at
/// their measured initial states. Broadcast once to initialize estimates.
Eigen::VectorXd nominal_rollout(const model::AgentModel& agent, const Eigen::VectorXd& x0,
                                const std::vector<scenario::Scenario>& scens,
                                const std::map<int, Eigen::VectorXd>& neighbor_x0) {
    const int T = agent.horizon;
    Eigen::MatrixXd w_mean = Eigen::MatrixXd::Zero(T, agent.p);
    for (const auto& s : scens) w_mean += s.w.topRows(T);
    if (!scens.empty()) w_mean /= static_cast<double>(scens.size());

    Eigen::VectorXd traj(T * agent.n);
    Eigen::VectorXd x = x0;
    const Eigen::MatrixXd a = agent.A_ii(0.0);
    const Eigen::MatrixXd b = agent.B_i(0.0);
    const Eigen::MatrixXd c = agent.C_i(0.0);
    Eigen::VectorXd coupling = Eigen::VectorXd::Zero(agent.n);
    for (int j : agent.neighbors) {
        coupling += agent.A_ij(j, 0.0) * neighbor_x0.at(j);
    }
    for (int k = 0; k < T; ++k) {
        x = a * x + b * (agent.K * x) + c * w_mean.row(k).transpose() + coupling;
        traj.segment(k * agent.n, agent.n) = x;
    }
    return traj;
}

struct AgentRuntime {
    program::AgentCondensation cond;
    std::vector<int> in_neighbors;
    std::map<int, Eigen::VectorXd> neighbor_x0;

    qp::Solver primal_solver;
    bool primal_ready = false;

    ExchangeAgentState state;
    std::map<int, program::IncomingPenalty> incoming;
    std::map<int, std::vector<Eigen::VectorXd>> received_x;
};

}  // namespace

ExchangeResult run_exchange(const std::vector<model::AgentModel>& agents,
                            const std::vector<Eigen::VectorXd>& x0s,
                            const std::vector<std::vector<scenario::Scenario>>& constraint_scens,
                            const std::vector<std::vector<scenario::Scenario>>& cost_scens,
                            const ExchangeConfig& config, Transport& transport) {
    const int N = static_cast<int>(agents.size());
    if (static_cast<int>(x0s.size()) != N || static_cast<int>(constraint_scens.size()) != N ||
        static_cast<int>(cost_scens.size()) != N) {
        throw DimensionMismatch("per-agent argument lengths");
    }
    const std::size_t S = constraint_scens.empty() ? 0 : constraint_scens.front().size();
    for (const auto& scens : constraint_scens) {
        if (scens.size() != S) {
            throw Error("all agents must use the same scenario count in one exchange");
        }
    }
    if (!config.tolerances.empty() && static_cast<int>(config.tolerances.size()) != N) {
        throw DimensionMismatch("per-agent tolerance count");
    }

    std::vector<int> order = config.evaluation_order;
    if (order.empty()) {
        order.resize(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i) order[static_cast<std::size_t>(i)] = i;
    }

    std::vector<AgentRuntime> rt(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        auto& r = rt[static_cast<std::size_t>(i)];
        for (int j : agents[static_cast<std::size_t>(i)].neighbors) {
            r.neighbor_x0[j] = x0s[static_cast<std::size_t>(j)];
        }
        for (int a = 0; a < N; ++a) {
            if (agents[static_cast<std::size_t>(a)].has_neighbor(i)) r.in_neighbors.push_back(a);
        }
    }

    // Condensation is the per-step setup cost; scenarios parallelize inside.
    for (int i = 0; i < N; ++i) {
        auto& r = rt[static_cast<std::size_t>(i)];
        r.cond = program::condense_agent_batch(agents[static_cast<std::size_t>(i)],
                                               x0s[static_cast<std::size_t>(i)],
                                               constraint_scens[static_cast<std::size_t>(i)],
                                               cost_scens[static_cast<std::size_t>(i)],
                                               r.neighbor_x0);
    }

    // Initialization: each agent broadcasts its nominal rollout once; the
    // receivers seed their estimates with it, multipliers start at zero.
    for (int idx : order) {
        const auto& agent = agents[static_cast<std::size_t>(idx)];
        ExchangeMessage msg;
        msg.kind = MessageKind::ScenarioSetBroadcast;
        msg.sender = static_cast<std::uint16_t>(idx);
        msg.iteration = 0;
        msg.payload = {nominal_rollout(agent, x0s[static_cast<std::size_t>(idx)],
                                       constraint_scens[static_cast<std::size_t>(idx)],
                                       rt[static_cast<std::size_t>(idx)].neighbor_x0)};
        for (int a : rt[static_cast<std::size_t>(idx)].in_neighbors) {
            msg.receiver = static_cast<std::uint16_t>(a);
            transport.send(msg);
        }
    }
    for (int idx : order) {
        auto& r = rt[static_cast<std::size_t>(idx)];
        const auto msgs =
            transport.receive(idx, MessageKind::ScenarioSetBroadcast, 0);
        for (const auto& m : msgs) {
            const int j = static_cast<int>(m.sender);
            r.state.z[j].assign(S, m.payload.front());
            r.state.lambda[j].assign(
                S, Eigen::VectorXd::Zero(m.payload.front().size()));
        }
        // Seed the incoming penalty data symmetrically: in-neighbor a starts
        // from this agent's own nominal rollout.
        const Eigen::VectorXd own_nominal =
            nominal_rollout(agents[static_cast<std::size_t>(idx)],
                            x0s[static_cast<std::size_t>(idx)],
                            constraint_scens[static_cast<std::size_t>(idx)], r.neighbor_x0);
        for (int a : r.in_neighbors) {
            r.incoming[a].estimates.assign(S, own_nominal);
            r.incoming[a].multipliers.assign(S, Eigen::VectorXd::Zero(own_nominal.size()));
        }
    }

    ExchangeResult result;
    double prev_total_eta = std::numeric_limits<double>::infinity();

    for (int iter = 1; iter <= config.max_iterations; ++iter) {
        const auto iteration = static_cast<std::uint32_t>(iter);

        // (1) primal updates, independent across agents
        std::optional<SubproblemInfeasible> failure;
        parallel::parallel_for(N, [&](std::int64_t i) {
            auto& r = rt[static_cast<std::size_t>(i)];
            try {
                const program::ProgramInstance inst = program::build_local_primal(
                    r.cond, r.state.z, r.incoming, config.mu);
                if (!r.primal_ready) {
                    r.primal_solver.setup(inst.quadprog, config.qp_settings);
                    r.primal_ready = true;
                } else {
                    r.primal_solver.update_linear_cost(inst.quadprog.f);
                    r.primal_solver.update_rhs(inst.quadprog.b_in, std::nullopt);
                }
                const qp::QpSolution sol = r.primal_solver.solve();
                if (sol.status == qp::QpStatus::Infeasible) {
                    throw SubproblemInfeasible(static_cast<int>(i),
                                               "local primal program infeasible");
                }
                r.state.v = sol.x;
            } catch (const SubproblemInfeasible& e) {
#pragma omp critical
                if (!failure) failure = e;
            }
        });
        if (failure) throw *failure;

        // (2) scenario updating steps; evaluated through the condensation,
        // which the tests pin to the step-by-step recursion at 1e-10.
        parallel::parallel_for(N, [&](std::int64_t i) {
            auto& r = rt[static_cast<std::size_t>(i)];
            r.state.own_trajectories.resize(S);
            for (std::size_t s = 0; s < S; ++s) {
                const auto& op = r.cond.constraint_ops[s];
                Eigen::VectorXd traj = op.Phi * r.state.v + op.phi_base;
                for (int j : agents[static_cast<std::size_t>(i)].neighbors) {
                    traj += op.Psi.at(j) * r.state.z.at(j)[s];
                }
                r.state.own_trajectories[s] = std::move(traj);
            }
        });
        for (int idx : order) {
            auto& r = rt[static_cast<std::size_t>(idx)];
            ExchangeMessage msg;
            msg.kind = MessageKind::ScenarioSetBroadcast;
            msg.sender = static_cast<std::uint16_t>(idx);
            msg.iteration = iteration;
            msg.payload = r.state.own_trajectories;
            for (int a : r.in_neighbors) {
                msg.receiver = static_cast<std::uint16_t>(a);
                transport.send(msg);
            }
        }
        for (int idx : order) {
            auto& r = rt[static_cast<std::size_t>(idx)];
            for (auto& m : transport.receive(idx, MessageKind::ScenarioSetBroadcast, iteration)) {
                r.received_x[static_cast<int>(m.sender)] = std::move(m.payload);
            }
        }

        // (3) residuals: the post-SUS trajectories of this iteration against
        // the estimates that produced them. Zero means the estimates
        // reproduced themselves exactly, i.e. a fixed point of the scheme.
        double total_eta = 0.0;
        bool all_ok = true;
        for (int i = 0; i < N; ++i) {
            auto& r = rt[static_cast<std::size_t>(i)];
            program::NeighborTrajectories received;
            for (int j : agents[static_cast<std::size_t>(i)].neighbors) {
                received[j] = r.received_x.at(j);
            }
            const double eta_i = residual(r.state.z, received, config.mu);
            r.state.residual_history.push_back(eta_i);
            total_eta += eta_i;
            if (eta_i > config.tolerance_for(i)) all_ok = false;
        }
        result.total_residual_history.push_back(total_eta);
        result.iterations = iter;

        if (total_eta > 1.1 * prev_total_eta) {
            result.residual_increased = true;
            if (log_level() > 0) {
                std::cerr << "dsmpc: exchange residual increased at iteration " << iter << " ("
                          << prev_total_eta << " -> " << total_eta << ")\n";
            }
        }
        prev_total_eta = total_eta;

        if (all_ok) {
            result.status = ExchangeStatus::Converged;
            break;
        }

        // (4) projection updates
        parallel::parallel_for(N, [&](std::int64_t i) {
            auto& r = rt[static_cast<std::size_t>(i)];
            const auto& agent = agents[static_cast<std::size_t>(i)];
            if (agent.neighbors.empty()) return;
            try {
                program::NeighborTrajectories received;
                for (int j : agent.neighbors) received[j] = r.received_x.at(j);
                r.state.z = projection_update(r.cond, r.state.v, received, r.state.lambda,
                                              config.mu, config.qp_settings);
            } catch (const SubproblemInfeasible& e) {
#pragma omp critical
                if (!failure) failure = e;
            }
        });
        if (failure) throw *failure;
        for (int idx : order) {
            auto& r = rt[static_cast<std::size_t>(idx)];
            for (int j : agents[static_cast<std::size_t>(idx)].neighbors) {
                ExchangeMessage msg;
                msg.kind = MessageKind::EstimateBroadcast;
                msg.sender = static_cast<std::uint16_t>(idx);
                msg.receiver = static_cast<std::uint16_t>(j);
                msg.iteration = iteration;
                msg.payload = r.state.z.at(j);
                transport.send(std::move(msg));
            }
        }

        // (5) multiplier updates and broadcasts
        parallel::parallel_for(N, [&](std::int64_t i) {
            auto& r = rt[static_cast<std::size_t>(i)];
            const auto& agent = agents[static_cast<std::size_t>(i)];
            if (agent.neighbors.empty()) return;
            program::NeighborTrajectories received;
            for (int j : agent.neighbors) received[j] = r.received_x.at(j);
            r.state.lambda = dual_update(r.state.lambda, r.state.z, received, config.mu);
        });
        for (int idx : order) {
            auto& r = rt[static_cast<std::size_t>(idx)];
            for (int j : agents[static_cast<std::size_t>(idx)].neighbors) {
                ExchangeMessage msg;
                msg.kind = MessageKind::MultiplierBroadcast;
                msg.sender = static_cast<std::uint16_t>(idx);
                msg.receiver = static_cast<std::uint16_t>(j);
                msg.iteration = iteration;
                msg.payload = r.state.lambda.at(j);
                transport.send(std::move(msg));
            }
        }
        for (int idx : order) {
            auto& r = rt[static_cast<std::size_t>(idx)];
            for (auto& m : transport.receive(idx, MessageKind::EstimateBroadcast, iteration)) {
                r.incoming[static_cast<int>(m.sender)].estimates = std::move(m.payload);
            }
            for (auto& m : transport.receive(idx, MessageKind::MultiplierBroadcast, iteration)) {
                r.incoming[static_cast<int>(m.sender)].multipliers = std::move(m.payload);
            }
        }
    }

    result.v.reserve(static_cast<std::size_t>(N));
    result.states.reserve(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        result.v.push_back(rt[static_cast<std::size_t>(i)].state.v);
        result.states.push_back(std::move(rt[static_cast<std::size_t>(i)].state));
    }
    result.messages_sent = transport.messages_sent();
    return result;
}

}  // namespace dsmpc::exchange

#include "dsmpc/mpc.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <sstream>

#include "dsmpc/parallel.hpp"

namespace dsmpc::mpc {

namespace {

Eigen::MatrixXd nonzero_mask(const Eigen::MatrixXd& m) {
    return (m.array() != 0.0).cast<double>();
}

bool is_zero_block(const Eigen::MatrixXd& m) {
    return m.size() == 0 || m.cwiseAbs().maxCoeff() <= 1e-12;
}

}  // namespace

scenario::BudgetSplit Network::split() const {
    return scenario::split_budget(epsilon, beta, agent_count(), budget_weights);
}

std::vector<scenario::Budget> Network::budgets() const {
    const scenario::BudgetSplit s = split();
    std::vector<scenario::Budget> out;
    out.reserve(blocks.size());
    for (int i = 0; i < agent_count(); ++i) {
        out.push_back(scenario::make_budget(s.epsilons[static_cast<std::size_t>(i)],
                                            s.betas[static_cast<std::size_t>(i)],
                                            horizon * blocks[static_cast<std::size_t>(i)].m()));
    }
    return out;
}

std::vector<model::AgentModel> Network::build_agents(bool decoupled) const {
    std::vector<model::AgentModel> agents;
    agents.reserve(blocks.size());
    for (int i = 0; i < agent_count(); ++i) {
        const AgentBlock& blk = blocks[static_cast<std::size_t>(i)];
        model::AgentModel a;
        a.index = i;
        a.n = blk.n();
        a.m = blk.m();
        a.p = blk.p();
        a.horizon = horizon;
        if (!decoupled) {
            for (const auto& [j, mat] : blk.couplings) {
                if (j < 0 || j >= agent_count() || j == i) {
                    throw DisconnectedCouplingSpec("coupling to unknown agent " +
                                                   std::to_string(j));
                }
                if (!is_zero_block(mat)) a.neighbors.push_back(j);
            }
            std::sort(a.neighbors.begin(), a.neighbors.end());
        }

        // Additive structure-preserving uncertainty on the agent's own blocks.
        const Eigen::MatrixXd a_ii = blk.A_ii, mask_a = nonzero_mask(blk.A_ii);
        const Eigen::MatrixXd b = blk.B, mask_b = nonzero_mask(blk.B);
        const Eigen::MatrixXd c = blk.C, mask_c = nonzero_mask(blk.C);
        a.A_ii = [a_ii, mask_a](double d) -> Eigen::MatrixXd { return a_ii + d * mask_a; };
        a.B_i = [b, mask_b](double d) -> Eigen::MatrixXd { return b + d * mask_b; };
        a.C_i = [c, mask_c](double d) -> Eigen::MatrixXd { return c + d * mask_c; };
        const std::map<int, Eigen::MatrixXd> couplings =
            decoupled ? std::map<int, Eigen::MatrixXd>{} : blk.couplings;
        a.A_ij = [couplings](int j, double d) -> Eigen::MatrixXd {
            const auto it = couplings.find(j);
            if (it == couplings.end()) throw UnknownAgent("no coupling to " + std::to_string(j));
            return it->second + d * nonzero_mask(it->second);
        };

        a.K = blk.K;
        a.Q = blk.Q;
        a.R = blk.R;
        a.P = blk.P;
        a.state_polytope = blk.state_polytope;
        a.input_polytope = blk.input_polytope;
        agents.push_back(std::move(a));
    }
    return agents;
}

model::UncertainSystem Network::assemble() const {
    const int N = agent_count();
    int n = 0, m = 0, p = 0, q = 0, r = 0;
    for (const auto& blk : blocks) {
        n += blk.n();
        m += blk.m();
        p += blk.p();
        q += blk.state_polytope.rows();
        r += blk.input_polytope.rows();
    }

    model::UncertainSystem sys;
    sys.n = n;
    sys.m = m;
    sys.p = p;
    sys.delta_dim = N;
    sys.horizon = horizon;
    sys.A_nom = Eigen::MatrixXd::Zero(n, n);
    sys.B_nom = Eigen::MatrixXd::Zero(n, m);
    sys.C_nom = Eigen::MatrixXd::Zero(n, p);
    sys.Q = Eigen::MatrixXd::Zero(n, n);
    sys.P = Eigen::MatrixXd::Zero(n, n);
    sys.R = Eigen::MatrixXd::Zero(m, m);
    sys.K = Eigen::MatrixXd::Zero(m, n);
    sys.state_polytope.A = Eigen::MatrixXd::Zero(q, n);
    sys.state_polytope.b = Eigen::VectorXd::Zero(q);
    sys.input_polytope.A = Eigen::MatrixXd::Zero(r, m);
    sys.input_polytope.b = Eigen::VectorXd::Zero(r);

    std::vector<int> n_off(static_cast<std::size_t>(N) + 1, 0);
    std::vector<int> m_off(static_cast<std::size_t>(N) + 1, 0);
    std::vector<int> p_off(static_cast<std::size_t>(N) + 1, 0);
    for (int i = 0; i < N; ++i) {
        n_off[static_cast<std::size_t>(i) + 1] = n_off[static_cast<std::size_t>(i)] + blocks[static_cast<std::size_t>(i)].n();
        m_off[static_cast<std::size_t>(i) + 1] = m_off[static_cast<std::size_t>(i)] + blocks[static_cast<std::size_t>(i)].m();
        p_off[static_cast<std::size_t>(i) + 1] = p_off[static_cast<std::size_t>(i)] + blocks[static_cast<std::size_t>(i)].p();
    }

    int q0 = 0, r0 = 0;
    for (int i = 0; i < N; ++i) {
        const AgentBlock& blk = blocks[static_cast<std::size_t>(i)];
        const int ni = blk.n(), mi = blk.m(), pi = blk.p();
        sys.A_nom.block(n_off[static_cast<std::size_t>(i)], n_off[static_cast<std::size_t>(i)], ni, ni) = blk.A_ii;
        for (const auto& [j, mat] : blk.couplings) {
            sys.A_nom.block(n_off[static_cast<std::size_t>(i)], n_off[static_cast<std::size_t>(j)], ni,
                            blocks[static_cast<std::size_t>(j)].n()) = mat;
        }
        sys.B_nom.block(n_off[static_cast<std::size_t>(i)], m_off[static_cast<std::size_t>(i)], ni, mi) = blk.B;
        sys.C_nom.block(n_off[static_cast<std::size_t>(i)], p_off[static_cast<std::size_t>(i)], ni, pi) = blk.C;
        sys.Q.block(n_off[static_cast<std::size_t>(i)], n_off[static_cast<std::size_t>(i)], ni, ni) = blk.Q;
        sys.P.block(n_off[static_cast<std::size_t>(i)], n_off[static_cast<std::size_t>(i)], ni, ni) = blk.P;
        sys.R.block(m_off[static_cast<std::size_t>(i)], m_off[static_cast<std::size_t>(i)], mi, mi) = blk.R;
        sys.K.block(m_off[static_cast<std::size_t>(i)], n_off[static_cast<std::size_t>(i)], mi, ni) = blk.K;
        sys.state_polytope.A.block(q0, n_off[static_cast<std::size_t>(i)], blk.state_polytope.rows(), ni) =
            blk.state_polytope.A;
        sys.state_polytope.b.segment(q0, blk.state_polytope.rows()) = blk.state_polytope.b;
        q0 += blk.state_polytope.rows();
        sys.input_polytope.A.block(r0, m_off[static_cast<std::size_t>(i)], blk.input_polytope.rows(), mi) =
            blk.input_polytope.A;
        sys.input_polytope.b.segment(r0, blk.input_polytope.rows()) = blk.input_polytope.b;
        r0 += blk.input_polytope.rows();
    }

    std::vector<int> state_blocks;
    for (const auto& blk : blocks) state_blocks.push_back(blk.n());
    sys.uncertainty_map =
        model::additive_uncertainty_map(sys.A_nom, sys.B_nom, sys.C_nom, state_blocks);
    return sys;
}

Eigen::VectorXd Network::stacked_x0() const {
    int n = 0;
    for (const auto& blk : blocks) n += blk.n();
    Eigen::VectorXd x(n);
    int off = 0;
    for (const auto& blk : blocks) {
        x.segment(off, blk.n()) = blk.x0;
        off += blk.n();
    }
    return x;
}

Network plug_in(const Network& network, const AgentBlock& new_agent,
                const std::map<int, Eigen::MatrixXd>& couplings_to_new,
                const std::map<int, Eigen::MatrixXd>& couplings_from_new) {
    Network out = network;
    const int new_id = network.agent_count();
    AgentBlock added = new_agent;
    added.couplings.clear();
    for (const auto& [j, mat] : couplings_to_new) {
        if (j < 0 || j >= new_id) {
            throw DisconnectedCouplingSpec("coupling references unknown agent " +
                                           std::to_string(j));
        }
        if (mat.rows() != added.n() || mat.cols() != network.blocks[static_cast<std::size_t>(j)].n()) {
            throw DimensionMismatch("coupling block shape");
        }
        added.couplings[j] = mat;
    }
    for (const auto& [j, mat] : couplings_from_new) {
        if (j < 0 || j >= new_id) {
            throw DisconnectedCouplingSpec("coupling references unknown agent " +
                                           std::to_string(j));
        }
        if (mat.rows() != network.blocks[static_cast<std::size_t>(j)].n() || mat.cols() != added.n()) {
            throw DimensionMismatch("coupling block shape");
        }
        out.blocks[static_cast<std::size_t>(j)].couplings[new_id] = mat;
    }
    out.blocks.push_back(std::move(added));
    return out;
}

Network plug_out(const Network& network, int agent_id) {
    if (agent_id < 0 || agent_id >= network.agent_count()) {
        throw UnknownAgent("agent " + std::to_string(agent_id));
    }
    Network out = network;
    out.blocks.erase(out.blocks.begin() + agent_id);
    for (auto& blk : out.blocks) {
        std::map<int, Eigen::MatrixXd> remapped;
        for (auto& [j, mat] : blk.couplings) {
            if (j == agent_id) continue;
            remapped[j > agent_id ? j - 1 : j] = std::move(mat);
        }
        blk.couplings = std::move(remapped);
    }
    return out;
}

std::string ControllerMode::name() const {
    switch (kind) {
        case ControllerKind::Centralized:
            return "CSMPC";
        case ControllerKind::Distributed:
            return "DSMPC";
        case ControllerKind::Decoupled:
            return "DeSMPC";
        case ControllerKind::SoftComm: {
            std::ostringstream os;
            os << "DSMPCS-" << std::fixed << std::setprecision(2) << soft.alpha_target;
            return os.str();
        }
    }
    return "unknown";
}

namespace {

/// True-plant step: every agent advances with the fully coupled dynamics and
/// a fresh realization from the plant stream (disjoint from the controller
/// scenario streams).
std::vector<Eigen::VectorXd> plant_step(const Network& network,
                                        const std::vector<model::AgentModel>& coupled_agents,
                                        const std::vector<Eigen::VectorXd>& states,
                                        const std::vector<Eigen::VectorXd>& inputs,
                                        std::uint64_t seed, int step) {
    const int N = network.agent_count();
    std::vector<Eigen::VectorXd> next(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        const auto realization = scenario::draw_one(
            network.blocks[static_cast<std::size_t>(i)].process, 1,
            rng::derive(seed, rng::Role::Plant,
                        {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)}));
        std::map<int, Eigen::VectorXd> neighbor_states;
        for (int j : coupled_agents[static_cast<std::size_t>(i)].neighbors) {
            neighbor_states[j] = states[static_cast<std::size_t>(j)];
        }
        next[static_cast<std::size_t>(i)] = model::step_agent(
            coupled_agents[static_cast<std::size_t>(i)], states[static_cast<std::size_t>(i)],
            inputs[static_cast<std::size_t>(i)], neighbor_states,
            realization.w.row(0).transpose(), realization.delta(0));
    }
    return next;
}

void check_applied_input(const model::AgentModel& agent, const Eigen::VectorXd& u) {
    if (!agent.input_polytope.contains(u, 1e-5)) {
        throw Error("applied input violates the input constraints beyond solver tolerance");
    }
}

std::vector<std::vector<scenario::Scenario>> draw_all(
    const Network& network, int count, int horizon, std::uint64_t seed, rng::Role role,
    int step, int attempt) {
    std::vector<std::vector<scenario::Scenario>> out(static_cast<std::size_t>(network.agent_count()));
    for (int i = 0; i < network.agent_count(); ++i) {
        out[static_cast<std::size_t>(i)] =
            scenario::draw_scenarios(
                network.blocks[static_cast<std::size_t>(i)].process, i, count, horizon,
                rng::derive(seed, role,
                            {static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i),
                             static_cast<std::uint64_t>(attempt)}))
                .scenarios;
    }
    return out;
}

std::vector<program::GlobalScenario> stack_scenarios(
    const Network& network, const std::vector<std::vector<scenario::Scenario>>& per_agent) {
    const int N = network.agent_count();
    const std::size_t S = per_agent.front().size();
    int p = 0;
    for (const auto& blk : network.blocks) p += blk.p();
    const int T = network.horizon;

    std::vector<program::GlobalScenario> out(S);
    for (std::size_t s = 0; s < S; ++s) {
        out[s].w.resize(T, p);
        out[s].delta.resize(T, N);
        int p0 = 0;
        for (int i = 0; i < N; ++i) {
            const auto& scen = per_agent[static_cast<std::size_t>(i)][s];
            out[s].w.middleCols(p0, network.blocks[static_cast<std::size_t>(i)].p()) = scen.w;
            out[s].delta.col(i) = scen.delta;
            p0 += network.blocks[static_cast<std::size_t>(i)].p();
        }
    }
    return out;
}

double record_objective(const Network& network, int i,
                        const std::vector<Eigen::VectorXd>& trajectories,
                        const Eigen::VectorXd& x0_i, const Eigen::VectorXd& v_i) {
    const AgentBlock& blk = network.blocks[static_cast<std::size_t>(i)];
    return program::empirical_cost(x0_i, trajectories, v_i, blk.K, blk.Q, blk.R, blk.P);
}

}  // namespace

bool ClosedLoopTrace::same_numeric(const ClosedLoopTrace& other) const {
    if (steps.size() != other.steps.size() || final_states.size() != other.final_states.size()) {
        return false;
    }
    auto eq = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
        return a.size() == b.size() &&
               std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
    };
    for (std::size_t k = 0; k < steps.size(); ++k) {
        const auto& s = steps[k];
        const auto& o = other.steps[k];
        if (s.states.size() != o.states.size() || s.inputs.size() != o.inputs.size()) return false;
        for (std::size_t i = 0; i < s.states.size(); ++i) {
            if (!eq(s.states[i], o.states[i]) || !eq(s.inputs[i], o.inputs[i]) ||
                !eq(s.v[i], o.v[i])) {
                return false;
            }
        }
    }
    for (std::size_t i = 0; i < final_states.size(); ++i) {
        if (!eq(final_states[i], other.final_states[i])) return false;
    }
    return true;
}

std::string ClosedLoopTrace::to_csv() const {
    int max_n = 0, max_m = 0;
    for (const auto& s : steps) {
        for (const auto& x : s.states) max_n = std::max<int>(max_n, static_cast<int>(x.size()));
        for (const auto& u : s.inputs) max_m = std::max<int>(max_m, static_cast<int>(u.size()));
    }
    std::ostringstream os;
    os << "k,i";
    for (int c = 0; c < max_n; ++c) os << ",x" << c;
    for (int c = 0; c < max_m; ++c) os << ",u" << c;
    os << ",mode,residual,redraws\n";
    os << std::setprecision(10);
    for (const auto& s : steps) {
        for (std::size_t i = 0; i < s.states.size(); ++i) {
            os << s.step << "," << i;
            for (int c = 0; c < max_n; ++c) {
                os << ",";
                if (c < s.states[i].size()) os << s.states[i](c);
            }
            for (int c = 0; c < max_m; ++c) {
                os << ",";
                if (c < s.inputs[i].size()) os << s.inputs[i](c);
            }
            os << "," << mode << "," << s.residual << "," << s.redraws << "\n";
        }
    }
    return os.str();
}

ClosedLoopTrace run_dsmpc(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                          int sim_horizon, std::uint64_t seed, const RunOptions& options) {
    const int N = network.agent_count();
    const auto agents = network.build_agents();
    const auto budgets = network.budgets();
    int s_use = 0;
    for (const auto& b : budgets) s_use = std::max(s_use, b.sample_count);
    const int s_cost = std::min(s_use, network.cost_scenario_cap);

    ClosedLoopTrace trace;
    trace.mode = "DSMPC";
    trace.seed = seed;
    std::vector<Eigen::VectorXd> states = x0;

    for (int k = 0; k < sim_horizon; ++k) {
        exchange::ExchangeResult res;
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt > options.max_retries) {
                throw InfeasibleAfterRetries(k, options.max_retries,
                                             "distributed exchange infeasible");
            }
            const auto cons =
                draw_all(network, s_use, network.horizon, seed, rng::Role::Constraint, k, attempt);
            const auto costs = draw_all(network, s_cost, network.horizon, seed,
                                        rng::Role::CostAveraging, k, attempt);
            try {
                if (options.serialize_messages) {
                    exchange::SerializingTransport transport;
                    res = exchange::run_exchange(agents, states, cons, costs, options.exchange,
                                                 transport);
                } else {
                    exchange::InProcessTransport transport;
                    res = exchange::run_exchange(agents, states, cons, costs, options.exchange,
                                                 transport);
                }
                break;
            } catch (const SubproblemInfeasible&) {
                continue;  // fresh scenario draws
            }
        }

        StepRecord rec;
        rec.step = k;
        rec.states = states;
        rec.redraws = attempt;
        rec.exchange_iterations = res.iterations;
        rec.residual = res.total_residual_history.empty() ? 0.0
                                                          : res.total_residual_history.back();
        rec.messages = res.messages_sent;
        std::vector<Eigen::VectorXd> inputs(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i) {
            const auto& blk = network.blocks[static_cast<std::size_t>(i)];
            const Eigen::VectorXd v_i = res.v[static_cast<std::size_t>(i)];
            inputs[static_cast<std::size_t>(i)] =
                blk.K * states[static_cast<std::size_t>(i)] + v_i.head(blk.m());
            check_applied_input(agents[static_cast<std::size_t>(i)],
                                inputs[static_cast<std::size_t>(i)]);
            rec.v.push_back(v_i);
            rec.objectives.push_back(record_objective(
                network, i, res.states[static_cast<std::size_t>(i)].own_trajectories,
                states[static_cast<std::size_t>(i)], v_i));
        }
        rec.inputs = inputs;
        trace.steps.push_back(std::move(rec));

        states = plant_step(network, agents, states, inputs, seed, k);
    }
    trace.final_states = states;
    return trace;
}

ClosedLoopTrace run_dsmpcs(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                           const SoftCommConfig& soft, int sim_horizon, std::uint64_t seed,
                           const RunOptions& options) {
    const int N = network.agent_count();
    const auto agents = network.build_agents();
    const auto budgets = network.budgets();
    int s_use = 0;
    for (const auto& b : budgets) s_use = std::max(s_use, b.sample_count);
    const int s_cost = std::min(s_use, network.cost_scenario_cap);
    const int T = network.horizon;

    // Per-agent box sample counts from the reliability target.
    std::vector<int> box_samples(static_cast<std::size_t>(N));
    std::vector<int> box_dims(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        const int n_i = network.blocks[static_cast<std::size_t>(i)].n();
        box_dims[static_cast<std::size_t>(i)] =
            soft.dimension == softcomm::BoxDimension::FullTrajectory ? T * n_i : n_i;
        box_samples[static_cast<std::size_t>(i)] =
            soft.sample_count > 0
                ? soft.sample_count
                : scenario::samples_for_reliability(soft.alpha_target, soft.beta_tilde,
                                                    box_dims[static_cast<std::size_t>(i)]);
    }

    // Step-0 boxes: point boxes at the measured initial states.
    std::vector<softcomm::ReliabilityBox> boxes(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        const int n_i = network.blocks[static_cast<std::size_t>(i)].n();
        softcomm::ReliabilityBox box;
        box.center.resize(T * n_i);
        for (int t = 0; t < T; ++t) box.center.segment(t * n_i, n_i) = x0[static_cast<std::size_t>(i)];
        box.half_width = Eigen::VectorXd::Zero(T * n_i);
        box.sample_count = 0;
        box.beta_tilde = soft.beta_tilde;
        box.alpha_tilde = 1.0;  // the initial state is known exactly
        boxes[static_cast<std::size_t>(i)] = std::move(box);
    }

    ClosedLoopTrace trace;
    ControllerMode mode;
    mode.kind = ControllerKind::SoftComm;
    mode.soft = soft;
    trace.mode = mode.name();
    trace.seed = seed;
    std::vector<Eigen::VectorXd> states = x0;

    for (int k = 0; k < sim_horizon; ++k) {
        StepRecord rec;
        rec.step = k;
        rec.states = states;
        std::vector<Eigen::VectorXd> inputs(static_cast<std::size_t>(N));
        std::vector<softcomm::ReliabilityBox> next_boxes(static_cast<std::size_t>(N));
        std::size_t messages = 0;

        for (int i = 0; i < N; ++i) {
            const auto& agent = agents[static_cast<std::size_t>(i)];
            const auto& blk = network.blocks[static_cast<std::size_t>(i)];
            std::map<int, Eigen::VectorXd> neighbor_x0;
            std::map<int, softcomm::ReliabilityBox> neighbor_boxes;
            for (int j : agent.neighbors) {
                neighbor_x0[j] = states[static_cast<std::size_t>(j)];
                neighbor_boxes[j] = boxes[static_cast<std::size_t>(j)];
            }

            qp::QpSolution sol;
            program::AgentCondensation cond;
            int attempt = 0;
            for (;; ++attempt) {
                if (attempt > options.max_retries) {
                    throw InfeasibleAfterRetries(k, options.max_retries,
                                                 "robust-communication program infeasible");
                }
                const auto cons = scenario::draw_scenarios(
                    blk.process, i, s_use, T,
                    rng::derive(seed, rng::Role::Constraint,
                                {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(attempt)}));
                const auto costs = scenario::draw_scenarios(
                    blk.process, i, s_cost, T,
                    rng::derive(seed, rng::Role::CostAveraging,
                                {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(attempt)}));
                cond = program::condense_agent_batch(agent, states[static_cast<std::size_t>(i)],
                                                     cons.scenarios, costs.scenarios,
                                                     neighbor_x0);
                try {
                    const program::ProgramInstance inst =
                        program::build_robust_local(cond, neighbor_boxes);
                    sol = qp::solve(inst.quadprog, options.exchange.qp_settings);
                } catch (const EmptyTightenedSet&) {
                    continue;
                }
                if (sol.status != qp::QpStatus::Infeasible) break;
            }

            const Eigen::VectorXd v_i = sol.x;
            inputs[static_cast<std::size_t>(i)] =
                blk.K * states[static_cast<std::size_t>(i)] + v_i.head(blk.m());
            check_applied_input(agent, inputs[static_cast<std::size_t>(i)]);

            // Roll fresh local trajectories and fit the next box around them;
            // neighbors are represented by their current box centers.
            const auto box_scens = scenario::draw_scenarios(
                blk.process, i, box_samples[static_cast<std::size_t>(i)], T,
                rng::derive(seed, rng::Role::BoxFit,
                            {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i)}));
            program::NeighborTrajectories center_estimates;
            for (int j : agent.neighbors) {
                center_estimates[j].assign(box_scens.scenarios.size(),
                                           boxes[static_cast<std::size_t>(j)].center);
            }
            const auto trajs =
                exchange::sus_update(agent, states[static_cast<std::size_t>(i)], v_i,
                                     box_scens.scenarios, center_estimates, neighbor_x0);
            next_boxes[static_cast<std::size_t>(i)] = softcomm::fit_and_certify(
                trajs, soft.centering, soft.beta_tilde, box_dims[static_cast<std::size_t>(i)]);

            rec.v.push_back(v_i);
            rec.objectives.push_back(
                record_objective(network, i, trajs, states[static_cast<std::size_t>(i)], v_i));
            rec.redraws += attempt;
        }

        // Box broadcast: one message per agent per in-neighbor.
        for (int i = 0; i < N; ++i) {
            for (int a = 0; a < N; ++a) {
                if (agents[static_cast<std::size_t>(a)].has_neighbor(i)) ++messages;
            }
        }
        rec.messages = messages;
        rec.inputs = inputs;
        trace.steps.push_back(std::move(rec));

        boxes = std::move(next_boxes);
        states = plant_step(network, agents, states, inputs, seed, k);
    }
    trace.final_states = states;
    return trace;
}

ClosedLoopTrace run_centralized(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                                int sim_horizon, std::uint64_t seed,
                                const RunOptions& options) {
    const int N = network.agent_count();
    const auto agents = network.build_agents();
    const model::UncertainSystem sys = network.assemble();
    const scenario::Budget budget =
        scenario::make_budget(network.epsilon, network.beta, network.horizon * sys.m);
    const int s_cost = std::min(budget.sample_count, network.cost_scenario_cap);

    ClosedLoopTrace trace;
    trace.mode = "CSMPC";
    trace.seed = seed;
    std::vector<Eigen::VectorXd> states = x0;

    for (int k = 0; k < sim_horizon; ++k) {
        Eigen::VectorXd x_global(sys.n);
        {
            int off = 0;
            for (int i = 0; i < N; ++i) {
                x_global.segment(off, network.blocks[static_cast<std::size_t>(i)].n()) =
                    states[static_cast<std::size_t>(i)];
                off += network.blocks[static_cast<std::size_t>(i)].n();
            }
        }

        qp::QpSolution sol;
        std::vector<program::GlobalScenario> cons_global;
        int attempt = 0;
        for (;; ++attempt) {
            if (attempt > options.max_retries) {
                throw InfeasibleAfterRetries(k, options.max_retries,
                                             "centralized scenario program infeasible");
            }
            cons_global = stack_scenarios(
                network, draw_all(network, budget.sample_count, network.horizon, seed,
                                  rng::Role::Constraint, k, attempt));
            const auto costs_global = stack_scenarios(
                network, draw_all(network, s_cost, network.horizon, seed,
                                  rng::Role::CostAveraging, k, attempt));
            const program::ProgramInstance inst =
                program::build_centralized(sys, x_global, cons_global, costs_global);
            sol = qp::solve(inst.quadprog, options.exchange.qp_settings);
            if (sol.status != qp::QpStatus::Infeasible) break;
        }

        StepRecord rec;
        rec.step = k;
        rec.states = states;
        rec.redraws = attempt;

        // Slice the stacked input v_k = col_i(v_{i,k}) into per-agent pieces.
        std::vector<Eigen::VectorXd> inputs(static_cast<std::size_t>(N));
        int m_off = 0;
        for (int i = 0; i < N; ++i) {
            const auto& blk = network.blocks[static_cast<std::size_t>(i)];
            Eigen::VectorXd v_i(network.horizon * blk.m());
            for (int t = 0; t < network.horizon; ++t) {
                v_i.segment(t * blk.m(), blk.m()) = sol.x.segment(t * sys.m + m_off, blk.m());
            }
            inputs[static_cast<std::size_t>(i)] =
                blk.K * states[static_cast<std::size_t>(i)] + v_i.head(blk.m());
            check_applied_input(agents[static_cast<std::size_t>(i)],
                                inputs[static_cast<std::size_t>(i)]);
            rec.v.push_back(std::move(v_i));
            m_off += blk.m();
        }

        // Informational per-agent objectives from the rolled global predictions.
        {
            const std::size_t sample_cap = std::min<std::size_t>(cons_global.size(), 32);
            std::vector<std::vector<Eigen::VectorXd>> per_agent_trajs(
                static_cast<std::size_t>(N));
            for (std::size_t s = 0; s < sample_cap; ++s) {
                const auto cond = program::condense_global(sys, x_global, cons_global[s]);
                const auto op = program::resolve(cond, {});
                const Eigen::VectorXd x_stack = op.Phi * sol.x + op.phi;
                int off = 0;
                for (int i = 0; i < N; ++i) {
                    const int ni = network.blocks[static_cast<std::size_t>(i)].n();
                    Eigen::VectorXd traj(network.horizon * ni);
                    for (int t = 0; t < network.horizon; ++t) {
                        traj.segment(t * ni, ni) = x_stack.segment(t * sys.n + off, ni);
                    }
                    per_agent_trajs[static_cast<std::size_t>(i)].push_back(std::move(traj));
                    off += ni;
                }
            }
            for (int i = 0; i < N; ++i) {
                rec.objectives.push_back(record_objective(
                    network, i, per_agent_trajs[static_cast<std::size_t>(i)],
                    states[static_cast<std::size_t>(i)], rec.v[static_cast<std::size_t>(i)]));
            }
        }

        rec.inputs = inputs;
        trace.steps.push_back(std::move(rec));
        states = plant_step(network, agents, states, inputs, seed, k);
    }
    trace.final_states = states;
    return trace;
}

ClosedLoopTrace run_decoupled(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                              int sim_horizon, std::uint64_t seed, const RunOptions& options) {
    const int N = network.agent_count();
    const auto solver_agents = network.build_agents(true);  // couplings relaxed
    const auto plant_agents = network.build_agents(false);  // true plant stays coupled
    const auto budgets = network.budgets();
    int s_use = 0;
    for (const auto& b : budgets) s_use = std::max(s_use, b.sample_count);
    const int s_cost = std::min(s_use, network.cost_scenario_cap);

    ClosedLoopTrace trace;
    trace.mode = "DeSMPC";
    trace.seed = seed;
    std::vector<Eigen::VectorXd> states = x0;

    for (int k = 0; k < sim_horizon; ++k) {
        StepRecord rec;
        rec.step = k;
        rec.states = states;
        std::vector<Eigen::VectorXd> inputs(static_cast<std::size_t>(N));
        for (int i = 0; i < N; ++i) {
            const auto& agent = solver_agents[static_cast<std::size_t>(i)];
            const auto& blk = network.blocks[static_cast<std::size_t>(i)];
            qp::QpSolution sol;
            for (int attempt = 0;; ++attempt) {
                const auto cons = scenario::draw_scenarios(
                    blk.process, i, s_use, network.horizon,
                    rng::derive(seed, rng::Role::Constraint,
                                {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(attempt)}));
                const auto costs = scenario::draw_scenarios(
                    blk.process, i, s_cost, network.horizon,
                    rng::derive(seed, rng::Role::CostAveraging,
                                {static_cast<std::uint64_t>(k), static_cast<std::uint64_t>(i),
                                 static_cast<std::uint64_t>(attempt)}));
                const auto cond = program::condense_agent_batch(
                    agent, states[static_cast<std::size_t>(i)], cons.scenarios, costs.scenarios,
                    {});
                program::ProgramInstance inst = program::build_local_primal(cond, {}, {}, 1.0);
                sol = qp::solve(inst.quadprog, options.exchange.qp_settings);
                if (sol.status != qp::QpStatus::Infeasible) break;
                if (attempt < 1) continue;  // one fresh redraw first

                // The decoupled prediction admits no in-band plan (the whole
                // point of the baseline). Drop the state rows, keep the input
                // rows, and actuate the minimum-effort plan.
                std::vector<int> keep;
                for (std::size_t r = 0; r < inst.rows.size(); ++r) {
                    if (inst.rows[r].kind != program::RowInfo::Kind::State) {
                        keep.push_back(static_cast<int>(r));
                    }
                }
                qp::QuadraticProgram relaxed;
                relaxed.H = inst.quadprog.H;
                relaxed.f = inst.quadprog.f;
                relaxed.A_in.resize(static_cast<int>(keep.size()), inst.decision_dim);
                relaxed.b_in.resize(static_cast<int>(keep.size()));
                for (std::size_t r = 0; r < keep.size(); ++r) {
                    relaxed.A_in.row(static_cast<int>(r)) = inst.quadprog.A_in.row(keep[r]);
                    relaxed.b_in(static_cast<int>(r)) = inst.quadprog.b_in(keep[r]);
                }
                sol = qp::solve(relaxed, options.exchange.qp_settings);
                rec.redraws += 1;
                break;
            }
            const Eigen::VectorXd v_i = sol.x;
            inputs[static_cast<std::size_t>(i)] =
                blk.K * states[static_cast<std::size_t>(i)] + v_i.head(blk.m());
            check_applied_input(agent, inputs[static_cast<std::size_t>(i)]);
            rec.v.push_back(v_i);
            rec.objectives.push_back(sol.objective);
        }
        rec.inputs = inputs;
        trace.steps.push_back(std::move(rec));
        states = plant_step(network, plant_agents, states, inputs, seed, k);
    }
    trace.final_states = states;
    return trace;
}

ClosedLoopTrace run_mode(const Network& network, const ControllerMode& mode,
                         const std::vector<Eigen::VectorXd>& x0, int sim_horizon,
                         std::uint64_t seed, const RunOptions& options) {
    switch (mode.kind) {
        case ControllerKind::Centralized:
            return run_centralized(network, x0, sim_horizon, seed, options);
        case ControllerKind::Distributed:
            return run_dsmpc(network, x0, sim_horizon, seed, options);
        case ControllerKind::SoftComm:
            return run_dsmpcs(network, x0, mode.soft, sim_horizon, seed, options);
        case ControllerKind::Decoupled:
            return run_decoupled(network, x0, sim_horizon, seed, options);
    }
    throw Error("unknown controller mode");
}

SingleStepSolution solve_single_step(const Network& network, const ControllerMode& mode,
                                     const std::vector<Eigen::VectorXd>& x0,
                                     std::uint64_t seed, const RunOptions& options) {
    ClosedLoopTrace trace = run_mode(network, mode, x0, 1, seed, options);
    const StepRecord& rec = trace.steps.front();

    const int T = network.horizon;
    int m = 0;
    for (const auto& blk : network.blocks) m += blk.m();
    SingleStepSolution out;
    out.redraws = rec.redraws;
    out.v_stacked.resize(T * m);
    int m_off = 0;
    for (int i = 0; i < network.agent_count(); ++i) {
        const int mi = network.blocks[static_cast<std::size_t>(i)].m();
        for (int t = 0; t < T; ++t) {
            out.v_stacked.segment(t * m + m_off, mi) =
                rec.v[static_cast<std::size_t>(i)].segment(t * mi, mi);
        }
        m_off += mi;
    }
    return out;
}

}  // namespace dsmpc::mpc

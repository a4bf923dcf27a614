#include "dsmpc/program.hpp"

#include <cmath>
#include <sstream>

#include "dsmpc/errors.hpp"
#include "dsmpc/parallel.hpp"

namespace dsmpc::program {

namespace {

/// Shared condensation core. step_matrices(k) must return the closed-loop
/// matrix, the input matrix, and the affine drift for step k.
struct StepMatrices {
    Eigen::MatrixXd a_cl;
    Eigen::MatrixXd b;
    Eigen::VectorXd drift;
};

CondensedScenario condense_core(int n, int m, int horizon, const Eigen::VectorXd& x0,
                                const std::function<StepMatrices(int)>& step_matrices) {
    CondensedScenario cond;
    cond.Phi = Eigen::MatrixXd::Zero(horizon * n, horizon * m);
    cond.phi_base = Eigen::VectorXd::Zero(horizon * n);

    Eigen::VectorXd prev_phi = x0;
    for (int t = 1; t <= horizon; ++t) {
        const StepMatrices sm = step_matrices(t - 1);
        const int row = (t - 1) * n;
        // phi_t = A_cl(t-1) phi_{t-1} + drift(t-1)
        cond.phi_base.segment(row, n) = sm.a_cl * prev_phi + sm.drift;
        prev_phi = cond.phi_base.segment(row, n);
        // Phi block row t: propagate row t-1 and add the new input column.
        if (t > 1) {
            cond.Phi.middleRows(row, n).leftCols((t - 1) * m) =
                sm.a_cl * cond.Phi.middleRows(row - n, n).leftCols((t - 1) * m);
        }
        cond.Phi.block(row, (t - 1) * m, n, m) = sm.b;
    }
    return cond;
}

}  // namespace

CondensedScenario condense_agent(const model::AgentModel& agent, const Eigen::VectorXd& x0,
                                 const scenario::Scenario& scen,
                                 const std::map<int, Eigen::VectorXd>& neighbor_x0) {
    const int T = agent.horizon;
    if (scen.w.rows() < T || scen.delta.size() < T) {
        throw DimensionMismatch("scenario shorter than the horizon");
    }
    if (x0.size() != agent.n) throw DimensionMismatch("x0 length");

    // Per-step block evaluations (the uncertainty map is evaluated once per
    // step and reused by the Psi pass below).
    std::vector<Eigen::MatrixXd> a_cl(static_cast<std::size_t>(T));
    std::vector<Eigen::MatrixXd> b(static_cast<std::size_t>(T));
    std::vector<std::map<int, Eigen::MatrixXd>> a_ij(static_cast<std::size_t>(T));
    for (int k = 0; k < T; ++k) {
        const double d = scen.delta(k);
        b[static_cast<std::size_t>(k)] = agent.B_i(d);
        a_cl[static_cast<std::size_t>(k)] =
            agent.A_ii(d) + b[static_cast<std::size_t>(k)] * agent.K;
        for (int j : agent.neighbors) {
            a_ij[static_cast<std::size_t>(k)][j] = agent.A_ij(j, d);
        }
    }

    CondensedScenario cond = condense_core(
        agent.n, agent.m, T, x0, [&](int k) {
            StepMatrices sm;
            sm.a_cl = a_cl[static_cast<std::size_t>(k)];
            sm.b = b[static_cast<std::size_t>(k)];
            sm.drift = agent.C_i(scen.delta(k)) * scen.w.row(k).transpose();
            if (k == 0) {
                for (int j : agent.neighbors) {
                    auto it = neighbor_x0.find(j);
                    if (it == neighbor_x0.end()) throw MissingNeighborState(j);
                    sm.drift += a_ij[0][j] * it->second;
                }
            }
            return sm;
        });

    // Sensitivity of the stacked prediction to each neighbor's trajectory
    // steps 1..T. Z_j[k] enters x_{k+1} through A_ij(delta_k).
    const int n = agent.n;
    for (int j : agent.neighbors) {
        const int nj = static_cast<int>(a_ij[0][j].cols());
        Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(T * n, T * nj);
        for (int k = 1; k < T; ++k) {
            psi.block(k * n, (k - 1) * nj, n, nj) = a_ij[static_cast<std::size_t>(k)][j];
            for (int t = k + 2; t <= T; ++t) {
                psi.block((t - 1) * n, (k - 1) * nj, n, nj) =
                    a_cl[static_cast<std::size_t>(t - 1)] *
                    psi.block((t - 2) * n, (k - 1) * nj, n, nj);
            }
        }
        cond.Psi[j] = std::move(psi);
    }
    return cond;
}

CondensedScenario condense_global(const model::UncertainSystem& system,
                                  const Eigen::VectorXd& x0, const GlobalScenario& scen) {
    const int T = system.horizon;
    if (scen.w.rows() < T || scen.delta.rows() < T) {
        throw DimensionMismatch("scenario shorter than the horizon");
    }
    if (x0.size() != system.n) throw DimensionMismatch("x0 length");

    return condense_core(system.n, system.m, T, x0, [&](int k) {
        const model::SystemMatrices mats = system.at(scen.delta.row(k).transpose());
        StepMatrices sm;
        sm.a_cl = mats.A + mats.B * system.K;
        sm.b = mats.B;
        sm.drift = mats.C * scen.w.row(k).transpose();
        return sm;
    });
}

PredictionOperator resolve(const CondensedScenario& cond,
                           const std::map<int, Eigen::VectorXd>& neighbor_trajectories) {
    PredictionOperator op;
    op.Phi = cond.Phi;
    op.phi = cond.phi_base;
    for (const auto& [j, psi] : cond.Psi) {
        auto it = neighbor_trajectories.find(j);
        if (it == neighbor_trajectories.end()) throw MissingNeighborState(j);
        if (it->second.size() != psi.cols()) {
            throw DimensionMismatch("neighbor trajectory length");
        }
        op.phi += psi * it->second;
    }
    return op;
}

AgentCondensation condense_agent_batch(const model::AgentModel& agent,
                                       const Eigen::VectorXd& x0,
                                       const std::vector<scenario::Scenario>& constraint_scens,
                                       const std::vector<scenario::Scenario>& cost_scens,
                                       const std::map<int, Eigen::VectorXd>& neighbor_x0) {
    AgentCondensation out;
    out.agent = &agent;
    out.x0 = x0;
    out.neighbor_x0 = neighbor_x0;
    out.constraint_ops.resize(constraint_scens.size());
    out.cost_ops.resize(cost_scens.size());
    parallel::parallel_for(static_cast<std::int64_t>(constraint_scens.size()), [&](std::int64_t s) {
        out.constraint_ops[static_cast<std::size_t>(s)] =
            condense_agent(agent, x0, constraint_scens[static_cast<std::size_t>(s)], neighbor_x0);
    });
    parallel::parallel_for(static_cast<std::int64_t>(cost_scens.size()), [&](std::int64_t s) {
        out.cost_ops[static_cast<std::size_t>(s)] =
            condense_agent(agent, x0, cost_scens[static_cast<std::size_t>(s)], neighbor_x0);
    });
    return out;
}

namespace {

/// Block-diagonal stacking of the per-step state rows over steps 1..T.
Eigen::MatrixXd stack_state_rows(const model::Polytope& poly, int T) {
    const int q = poly.rows();
    const int n = poly.dim();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(T * q, T * n);
    for (int t = 0; t < T; ++t) out.block(t * q, t * n, q, n) = poly.A;
    return out;
}

Eigen::VectorXd stack_state_rhs(const model::Polytope& poly, int T) {
    Eigen::VectorXd out(T * poly.rows());
    for (int t = 0; t < T; ++t) out.segment(t * poly.rows(), poly.rows()) = poly.b;
    return out;
}

struct CostAccumulator {
    Eigen::MatrixXd H;
    Eigen::VectorXd f;
    double constant = 0.0;
};

/// Empirical quadratic cost assembled from resolved prediction operators.
CostAccumulator accumulate_cost(const std::vector<PredictionOperator>& ops,
                                const Eigen::VectorXd& x0, const Eigen::MatrixXd& K,
                                const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                                const Eigen::MatrixXd& P) {
    const int n = static_cast<int>(Q.rows());
    const int m = static_cast<int>(R.rows());
    const int T = static_cast<int>(ops.front().phi.size()) / n;
    const int dim = T * m;

    Eigen::MatrixXd q_tilde = Eigen::MatrixXd::Zero(T * n, T * n);
    for (int t = 0; t < T - 1; ++t) q_tilde.block(t * n, t * n, n, n) = Q;
    q_tilde.block((T - 1) * n, (T - 1) * n, n, n) = P;

    Eigen::MatrixXd r_tilde = Eigen::MatrixXd::Zero(dim, dim);
    for (int k = 0; k < T; ++k) r_tilde.block(k * m, k * m, m, m) = R;

    CostAccumulator acc;
    acc.H = Eigen::MatrixXd::Zero(dim, dim);
    acc.f = Eigen::VectorXd::Zero(dim);
    const double stage0 = x0.dot(Q * x0);

    for (const auto& op : ops) {
        // Stacked input map u = Uv v + uc with u_k = K x_k + v_k.
        Eigen::MatrixXd uv = Eigen::MatrixXd::Identity(dim, dim);
        Eigen::VectorXd uc = Eigen::VectorXd::Zero(dim);
        uc.head(m) = K * x0;
        for (int k = 1; k < T; ++k) {
            uv.block(k * m, 0, m, dim) += K * op.Phi.middleRows((k - 1) * n, n);
            uc.segment(k * m, m) = K * op.phi.segment((k - 1) * n, n);
        }
        acc.H += 2.0 * (op.Phi.transpose() * q_tilde * op.Phi + uv.transpose() * r_tilde * uv);
        acc.f += 2.0 * (op.Phi.transpose() * (q_tilde * op.phi) + uv.transpose() * (r_tilde * uc));
        acc.constant += op.phi.dot(q_tilde * op.phi) + uc.dot(r_tilde * uc) + stage0;
    }
    const double inv = 1.0 / static_cast<double>(ops.size());
    acc.H *= inv;
    acc.f *= inv;
    acc.constant *= inv;
    return acc;
}

bool is_zero_gain(const Eigen::MatrixXd& K) {
    return K.size() == 0 || K.cwiseAbs().maxCoeff() == 0.0;
}

/// State rows plus input rows for one program; appends to the triplet lists.
struct ConstraintAssembly {
    std::vector<Eigen::MatrixXd> blocks_lhs;
    std::vector<Eigen::VectorXd> blocks_rhs;
    std::vector<RowInfo> rows;
    int total_rows = 0;

    void add(Eigen::MatrixXd lhs, Eigen::VectorXd rhs, RowInfo::Kind kind, int scen, int step,
             int poly_rows) {
        total_rows += static_cast<int>(lhs.rows());
        for (int r = 0; r < poly_rows; ++r) {
            rows.push_back({kind, scen, step, r});
        }
        blocks_lhs.push_back(std::move(lhs));
        blocks_rhs.push_back(std::move(rhs));
    }

    void add_state_block(const Eigen::MatrixXd& lhs, const Eigen::VectorXd& rhs, int scen,
                         int T, int q) {
        total_rows += static_cast<int>(lhs.rows());
        for (int t = 1; t <= T; ++t) {
            for (int r = 0; r < q; ++r) rows.push_back({RowInfo::Kind::State, scen, t, r});
        }
        blocks_lhs.push_back(lhs);
        blocks_rhs.push_back(rhs);
    }

    void finalize(qp::QuadraticProgram& prog, int dim) const {
        prog.A_in.resize(total_rows, dim);
        prog.b_in.resize(total_rows);
        int r0 = 0;
        for (std::size_t b = 0; b < blocks_lhs.size(); ++b) {
            const int nr = static_cast<int>(blocks_lhs[b].rows());
            prog.A_in.middleRows(r0, nr) = blocks_lhs[b];
            prog.b_in.segment(r0, nr) = blocks_rhs[b];
            r0 += nr;
        }
    }
};

/// Deterministic input rows for K = 0: H v_k <= h, one block per step.
void add_decoupled_input_rows(ConstraintAssembly& asm_out, const model::Polytope& input_poly,
                              int T, int m, int dim) {
    const int r = input_poly.rows();
    if (r == 0) return;
    for (int k = 0; k < T; ++k) {
        Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(r, dim);
        lhs.middleCols(k * m, m) = input_poly.A;
        asm_out.add(std::move(lhs), input_poly.b,
                    k == 0 ? RowInfo::Kind::InputTime0 : RowInfo::Kind::Input, -1, k, r);
    }
}

/// Input rows for K != 0: time 0 deterministic, later steps per scenario.
void add_feedback_input_rows(ConstraintAssembly& asm_out, const model::Polytope& input_poly,
                             const Eigen::MatrixXd& K, const Eigen::VectorXd& x0,
                             const std::vector<PredictionOperator>& ops, int T, int n, int m,
                             int dim) {
    const int r = input_poly.rows();
    if (r == 0) return;
    {
        Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(r, dim);
        lhs.middleCols(0, m) = input_poly.A;
        asm_out.add(std::move(lhs), input_poly.b - input_poly.A * (K * x0),
                    RowInfo::Kind::InputTime0, -1, 0, r);
    }
    for (std::size_t s = 0; s < ops.size(); ++s) {
        const auto& op = ops[s];
        for (int k = 1; k < T; ++k) {
            Eigen::MatrixXd lhs = input_poly.A * K * op.Phi.middleRows((k - 1) * n, n);
            lhs.middleCols(k * m, m) += input_poly.A;
            asm_out.add(std::move(lhs),
                        input_poly.b - input_poly.A * (K * op.phi.segment((k - 1) * n, n)),
                        RowInfo::Kind::Input, static_cast<int>(s), k, r);
        }
    }
}

}  // namespace

ProgramInstance build_centralized(const model::UncertainSystem& system,
                                  const Eigen::VectorXd& x0,
                                  const std::vector<GlobalScenario>& constraint_scenarios,
                                  const std::vector<GlobalScenario>& cost_scenarios) {
    if (constraint_scenarios.empty() || cost_scenarios.empty()) {
        throw Error("need at least one constraint and one cost scenario");
    }
    const int T = system.horizon;
    const int dim = T * system.m;

    std::vector<PredictionOperator> constraint_ops(constraint_scenarios.size());
    parallel::parallel_for(static_cast<std::int64_t>(constraint_scenarios.size()),
                           [&](std::int64_t s) {
                               const auto cond = condense_global(
                                   system, x0, constraint_scenarios[static_cast<std::size_t>(s)]);
                               constraint_ops[static_cast<std::size_t>(s)] = resolve(cond, {});
                           });
    std::vector<PredictionOperator> cost_ops(cost_scenarios.size());
    parallel::parallel_for(static_cast<std::int64_t>(cost_scenarios.size()), [&](std::int64_t s) {
        const auto cond =
            condense_global(system, x0, cost_scenarios[static_cast<std::size_t>(s)]);
        cost_ops[static_cast<std::size_t>(s)] = resolve(cond, {});
    });

    ProgramInstance inst;
    inst.provenance = Provenance::Centralized;
    inst.decision_dim = dim;
    inst.scenario_count = static_cast<int>(constraint_scenarios.size());
    inst.cost_scenario_count = static_cast<int>(cost_scenarios.size());

    const CostAccumulator cost =
        accumulate_cost(cost_ops, x0, system.K, system.Q, system.R, system.P);
    inst.quadprog.H = cost.H;
    inst.quadprog.f = cost.f;
    inst.objective_constant = cost.constant;

    const Eigen::MatrixXd g_stack = stack_state_rows(system.state_polytope, T);
    const Eigen::VectorXd g_rhs = stack_state_rhs(system.state_polytope, T);
    ConstraintAssembly rows;
    for (std::size_t s = 0; s < constraint_ops.size(); ++s) {
        rows.add_state_block(g_stack * constraint_ops[s].Phi,
                             g_rhs - g_stack * constraint_ops[s].phi, static_cast<int>(s), T,
                             system.state_polytope.rows());
    }
    if (is_zero_gain(system.K)) {
        add_decoupled_input_rows(rows, system.input_polytope, T, system.m, dim);
    } else {
        add_feedback_input_rows(rows, system.input_polytope, system.K, x0, constraint_ops, T,
                                system.n, system.m, dim);
    }
    rows.finalize(inst.quadprog, dim);
    inst.rows = std::move(rows.rows);
    return inst;
}

ProgramInstance build_local_primal(const AgentCondensation& cond,
                                   const NeighborTrajectories& own_estimates,
                                   const std::map<int, IncomingPenalty>& incoming,
                                   double mu) {
    const model::AgentModel& agent = *cond.agent;
    const int T = agent.horizon;
    const int dim = T * agent.m;
    const int n = agent.n;
    if (cond.constraint_ops.empty() || cond.cost_ops.empty()) {
        throw Error("need at least one constraint and one cost scenario");
    }

    // Resolve constraint offsets with this agent's own neighbor estimates.
    std::vector<PredictionOperator> constraint_ops(cond.constraint_ops.size());
    for (std::size_t s = 0; s < cond.constraint_ops.size(); ++s) {
        std::map<int, Eigen::VectorXd> z_s;
        for (int j : agent.neighbors) {
            const auto it = own_estimates.find(j);
            if (it == own_estimates.end() || it->second.size() <= s) {
                throw MissingNeighborState(j);
            }
            z_s[j] = it->second[s];
        }
        constraint_ops[s] = resolve(cond.constraint_ops[s], z_s);
    }

    // Cost scenarios use the mean neighbor estimate (the cost set is a tuning
    // device; with S = 1 this coincides with the single estimate and the
    // decomposition stays exact).
    std::map<int, Eigen::VectorXd> z_mean;
    for (int j : agent.neighbors) {
        const auto it = own_estimates.find(j);
        if (it == own_estimates.end() || it->second.empty()) throw MissingNeighborState(j);
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(it->second.front().size());
        for (const auto& z : it->second) mean += z;
        z_mean[j] = mean / static_cast<double>(it->second.size());
    }
    std::vector<PredictionOperator> cost_ops(cond.cost_ops.size());
    for (std::size_t s = 0; s < cond.cost_ops.size(); ++s) {
        cost_ops[s] = resolve(cond.cost_ops[s], z_mean);
    }

    ProgramInstance inst;
    inst.provenance = Provenance::LocalPrimal;
    inst.decision_dim = dim;
    inst.scenario_count = static_cast<int>(constraint_ops.size());
    inst.cost_scenario_count = static_cast<int>(cost_ops.size());

    CostAccumulator cost = accumulate_cost(cost_ops, cond.x0, agent.K, agent.Q, agent.R, agent.P);

    // Consensus penalty (mu/2)||z_ai^s - x_i^s + Lambda_ai^s/mu||^2 summed over
    // in-neighbors a and their scenario estimates of this agent.
    for (const auto& [a, pen] : incoming) {
        (void)a;
        if (pen.estimates.size() != pen.multipliers.size()) {
            throw DimensionMismatch("penalty estimates vs multipliers");
        }
        for (std::size_t s = 0; s < pen.estimates.size(); ++s) {
            if (s >= constraint_ops.size()) {
                throw DimensionMismatch("more penalty scenarios than condensed scenarios");
            }
            const auto& op = constraint_ops[s];
            const Eigen::VectorXd target =
                pen.estimates[s] + pen.multipliers[s] / mu - op.phi;
            cost.H += mu * (op.Phi.transpose() * op.Phi);
            cost.f -= mu * (op.Phi.transpose() * target);
            cost.constant += 0.5 * mu * target.squaredNorm();
        }
    }

    inst.quadprog.H = 0.5 * (cost.H + cost.H.transpose());
    inst.quadprog.f = cost.f;
    inst.objective_constant = cost.constant;

    const Eigen::MatrixXd g_stack = stack_state_rows(agent.state_polytope, T);
    const Eigen::VectorXd g_rhs = stack_state_rhs(agent.state_polytope, T);
    ConstraintAssembly rows;
    for (std::size_t s = 0; s < constraint_ops.size(); ++s) {
        rows.add_state_block(g_stack * constraint_ops[s].Phi,
                             g_rhs - g_stack * constraint_ops[s].phi, static_cast<int>(s), T,
                             agent.state_polytope.rows());
    }
    if (is_zero_gain(agent.K)) {
        add_decoupled_input_rows(rows, agent.input_polytope, T, agent.m, dim);
    } else {
        add_feedback_input_rows(rows, agent.input_polytope, agent.K, cond.x0, constraint_ops, T,
                                n, agent.m, dim);
    }
    rows.finalize(inst.quadprog, dim);
    inst.rows = std::move(rows.rows);
    return inst;
}

ProgramInstance build_projection(const AgentCondensation& cond, const Eigen::VectorXd& v_fixed,
                                 const NeighborTrajectories& neighbor_trajectories,
                                 const NeighborTrajectories& multipliers, double mu) {
    const model::AgentModel& agent = *cond.agent;
    const int T = agent.horizon;
    const int S = static_cast<int>(cond.constraint_ops.size());

    // Decision layout: scenario-major, then neighbors in N_i order.
    int per_scenario = 0;
    for (int j : agent.neighbors) {
        per_scenario += static_cast<int>(cond.constraint_ops.front().Psi.at(j).cols());
    }
    const int dim = S * per_scenario;

    ProgramInstance inst;
    inst.provenance = Provenance::Projection;
    inst.decision_dim = dim;
    inst.scenario_count = S;
    inst.cost_scenario_count = 0;

    inst.quadprog.H = mu * Eigen::MatrixXd::Identity(dim, dim);
    inst.quadprog.f.resize(dim);
    inst.objective_constant = 0.0;

    const Eigen::MatrixXd g_stack = stack_state_rows(agent.state_polytope, T);
    const Eigen::VectorXd g_rhs = stack_state_rhs(agent.state_polytope, T);
    const bool zero_gain = is_zero_gain(agent.K);
    const int q = agent.state_polytope.rows();

    ConstraintAssembly rows;
    for (int s = 0; s < S; ++s) {
        const auto& op = cond.constraint_ops[static_cast<std::size_t>(s)];
        int col = s * per_scenario;
        Eigen::VectorXd base = op.Phi * v_fixed + op.phi_base;

        Eigen::MatrixXd lhs = Eigen::MatrixXd::Zero(T * q, dim);
        for (int j : agent.neighbors) {
            const auto& psi = op.Psi.at(j);
            const int nj = static_cast<int>(psi.cols());
            lhs.middleCols(col, nj) = g_stack * psi;

            const auto traj_it = neighbor_trajectories.find(j);
            const auto lam_it = multipliers.find(j);
            if (traj_it == neighbor_trajectories.end() || lam_it == multipliers.end() ||
                traj_it->second.size() < static_cast<std::size_t>(S) ||
                lam_it->second.size() < static_cast<std::size_t>(S)) {
                throw MissingNeighborState(j);
            }
            const auto& traj = traj_it->second;
            const auto& lam = lam_it->second;
            const Eigen::VectorXd target =
                traj[static_cast<std::size_t>(s)] - lam[static_cast<std::size_t>(s)] / mu;
            inst.quadprog.f.segment(col, nj) = -mu * target;
            inst.objective_constant += 0.5 * mu * target.squaredNorm();
            col += nj;
        }
        rows.add_state_block(lhs, g_rhs - g_stack * base, s, T, q);

        if (!zero_gain && agent.input_polytope.rows() > 0) {
            // u_k = K x_k + v_k depends on the estimates through x_k, k >= 1.
            const int r = agent.input_polytope.rows();
            for (int k = 1; k < T; ++k) {
                Eigen::MatrixXd in_lhs = Eigen::MatrixXd::Zero(r, dim);
                int c2 = s * per_scenario;
                for (int j : agent.neighbors) {
                    const auto& psi = op.Psi.at(j);
                    const int nj = static_cast<int>(psi.cols());
                    in_lhs.middleCols(c2, nj) =
                        agent.input_polytope.A * agent.K * psi.middleRows((k - 1) * agent.n, agent.n);
                    c2 += nj;
                }
                const Eigen::VectorXd x_base = base.segment((k - 1) * agent.n, agent.n);
                const Eigen::VectorXd rhs =
                    agent.input_polytope.b -
                    agent.input_polytope.A *
                        (agent.K * x_base + v_fixed.segment(k * agent.m, agent.m));
                rows.add(std::move(in_lhs), rhs, RowInfo::Kind::Input, s, k, r);
            }
        }
    }
    rows.finalize(inst.quadprog, dim);
    inst.rows = std::move(rows.rows);
    return inst;
}

ProgramInstance build_robust_local(const AgentCondensation& cond,
                                   const std::map<int, softcomm::ReliabilityBox>& neighbor_boxes) {
    const model::AgentModel& agent = *cond.agent;
    const int T = agent.horizon;
    const int dim = T * agent.m;
    if (cond.constraint_ops.empty() || cond.cost_ops.empty()) {
        throw Error("need at least one constraint and one cost scenario");
    }

    std::map<int, Eigen::VectorXd> centers;
    for (int j : agent.neighbors) {
        const auto it = neighbor_boxes.find(j);
        if (it == neighbor_boxes.end()) throw MissingNeighborState(j);
        centers[j] = it->second.center;
    }

    std::vector<PredictionOperator> constraint_ops(cond.constraint_ops.size());
    for (std::size_t s = 0; s < cond.constraint_ops.size(); ++s) {
        constraint_ops[s] = resolve(cond.constraint_ops[s], centers);
    }
    std::vector<PredictionOperator> cost_ops(cond.cost_ops.size());
    for (std::size_t s = 0; s < cond.cost_ops.size(); ++s) {
        cost_ops[s] = resolve(cond.cost_ops[s], centers);
    }

    ProgramInstance inst;
    inst.provenance = Provenance::RobustLocal;
    inst.decision_dim = dim;
    inst.scenario_count = static_cast<int>(constraint_ops.size());
    inst.cost_scenario_count = static_cast<int>(cost_ops.size());

    const CostAccumulator cost =
        accumulate_cost(cost_ops, cond.x0, agent.K, agent.Q, agent.R, agent.P);
    inst.quadprog.H = cost.H;
    inst.quadprog.f = cost.f;
    inst.objective_constant = cost.constant;

    const Eigen::MatrixXd g_stack = stack_state_rows(agent.state_polytope, T);
    const Eigen::VectorXd g_rhs = stack_state_rhs(agent.state_polytope, T);
    ConstraintAssembly rows;
    for (std::size_t s = 0; s < constraint_ops.size(); ++s) {
        const auto& op = constraint_ops[s];
        const Eigen::MatrixXd lhs = g_stack * op.Phi;
        Eigen::VectorXd rhs = g_rhs - g_stack * op.phi;
        // Immunize every state row against all box members: subtract the
        // support function of each neighbor box.
        for (int j : agent.neighbors) {
            rhs -= softcomm::tighten_offsets(g_stack * cond.constraint_ops[s].Psi.at(j),
                                             neighbor_boxes.at(j).half_width);
        }
        for (int r = 0; r < rhs.size(); ++r) {
            if (lhs.row(r).cwiseAbs().maxCoeff() <= 1e-12 && rhs(r) < -1e-12) {
                throw EmptyTightenedSet("state row " + std::to_string(r) + " of scenario " +
                                        std::to_string(s) +
                                        " is unsatisfiable after box tightening");
            }
        }
        rows.add_state_block(lhs, rhs, static_cast<int>(s), T, agent.state_polytope.rows());
    }
    if (is_zero_gain(agent.K)) {
        add_decoupled_input_rows(rows, agent.input_polytope, T, agent.m, dim);
    } else {
        add_feedback_input_rows(rows, agent.input_polytope, agent.K, cond.x0, constraint_ops, T,
                                agent.n, agent.m, dim);
    }
    rows.finalize(inst.quadprog, dim);
    inst.rows = std::move(rows.rows);
    return inst;
}

double empirical_cost(const Eigen::VectorXd& x0,
                      const std::vector<Eigen::VectorXd>& state_trajectories,
                      const Eigen::VectorXd& v, const Eigen::MatrixXd& K,
                      const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                      const Eigen::MatrixXd& P) {
    if (state_trajectories.empty()) return 0.0;
    const int n = static_cast<int>(Q.rows());
    const int m = static_cast<int>(R.rows());
    const int T = static_cast<int>(state_trajectories.front().size()) / n;

    double total = 0.0;
    for (const auto& traj : state_trajectories) {
        double cost = x0.dot(Q * x0);
        for (int k = 0; k < T; ++k) {
            const Eigen::VectorXd x_k =
                k == 0 ? x0 : Eigen::VectorXd(traj.segment((k - 1) * n, n));
            const Eigen::VectorXd u_k = K * x_k + v.segment(k * m, m);
            cost += u_k.dot(R * u_k);
            if (k > 0) cost += x_k.dot(Q * x_k);
        }
        const Eigen::VectorXd x_t = traj.segment((T - 1) * n, n);
        cost += x_t.dot(P * x_t);
        total += cost;
    }
    return total / static_cast<double>(state_trajectories.size());
}

std::string ProgramInstance::dump() const {
    std::ostringstream os;
    const char* names[] = {"Centralized", "LocalPrimal", "Projection", "RobustLocal"};
    os << "ProgramInstance[" << names[static_cast<int>(provenance)] << "] dim=" << decision_dim
       << " S=" << scenario_count << " S_cost=" << cost_scenario_count
       << " rows=" << quadprog.A_in.rows() << "\n";
    os << "H =\n" << quadprog.H << "\nf = " << quadprog.f.transpose()
       << "\nconstant = " << objective_constant << "\n";
    const Eigen::IOFormat fmt(Eigen::StreamPrecision, Eigen::DontAlignCols, " ", " ");
    for (int r = 0; r < quadprog.A_in.rows(); ++r) {
        const auto& info = rows[static_cast<std::size_t>(r)];
        const char* kind = info.kind == RowInfo::Kind::State
                               ? "state"
                               : (info.kind == RowInfo::Kind::Input ? "input" : "input@0");
        os << "row " << r << " [" << kind << " s=" << info.scenario << " k=" << info.step
           << " r=" << info.polytope_row << "] " << quadprog.A_in.row(r).format(fmt)
           << " <= " << quadprog.b_in(r) << "\n";
    }
    return os.str();
}

}  // namespace dsmpc::program

#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "dsmpc/model.hpp"
#include "dsmpc/qp.hpp"
#include "dsmpc/scenario.hpp"
#include "dsmpc/softcomm.hpp"

namespace dsmpc::program {

/// Scenario draw for the unpartitioned system: per-step disturbance (T x p)
/// and one uncertainty channel per agent block (T x delta_dim).
struct GlobalScenario {
    Eigen::MatrixXd w;
    Eigen::MatrixXd delta;
};

/// Affine map from the stacked correction inputs to the stacked predicted
/// states x_1..x_T: X = Phi v + phi. With v = 0 the prediction is the pure
/// closed-loop rollout under u = Kx.
struct PredictionOperator {
    Eigen::MatrixXd Phi;  // (T n) x (T m)
    Eigen::VectorXd phi;  // T n
};

/// Condensation of one scenario with the neighbor-trajectory contribution
/// kept separate: X = Phi v + phi_base + sum_j Psi_j Z_j, where Z_j stacks
/// the neighbor's predicted states x_{j,1..T} and the (measured) x_{j,0}
/// has already been folded into phi_base.
struct CondensedScenario {
    Eigen::MatrixXd Phi;
    Eigen::VectorXd phi_base;
    std::map<int, Eigen::MatrixXd> Psi;  // neighbor index -> (T n) x (T n_j)
};

CondensedScenario condense_agent(const model::AgentModel& agent, const Eigen::VectorXd& x0,
                                 const scenario::Scenario& scen,
                                 const std::map<int, Eigen::VectorXd>& neighbor_x0);

CondensedScenario condense_global(const model::UncertainSystem& system,
                                  const Eigen::VectorXd& x0, const GlobalScenario& scen);

/// Resolves the affine offset for fixed neighbor trajectories.
PredictionOperator resolve(const CondensedScenario& cond,
                           const std::map<int, Eigen::VectorXd>& neighbor_trajectories);

enum class Provenance { Centralized, LocalPrimal, Projection, RobustLocal };

struct RowInfo {
    enum class Kind : std::uint8_t { State, Input, InputTime0 };
    Kind kind = Kind::State;
    int scenario = 0;  // -1 for deterministic rows
    int step = 0;      // prediction step (states: 1..T, inputs: 0..T-1)
    int polytope_row = 0;
};

/// One concrete QP with its decision layout and row provenance. The QP
/// objective is 0.5 v'Hv + f'v; adding objective_constant gives the value of
/// the full assembled objective (empirical cost plus any penalty terms).
struct ProgramInstance {
    qp::QuadraticProgram quadprog;
    double objective_constant = 0.0;
    Provenance provenance = Provenance::Centralized;
    int decision_dim = 0;
    int scenario_count = 0;       // S used for constraints
    int cost_scenario_count = 0;  // S-bar used for the empirical objective
    std::vector<RowInfo> rows;

    std::string dump() const;
};

/// Pre-assembled per-agent data reused across ADMM iterations within one MPC
/// step: condensed constraint and cost scenarios plus x0 bookkeeping.
struct AgentCondensation {
    const model::AgentModel* agent = nullptr;
    Eigen::VectorXd x0;
    std::map<int, Eigen::VectorXd> neighbor_x0;
    std::vector<CondensedScenario> constraint_ops;
    std::vector<CondensedScenario> cost_ops;
};

AgentCondensation condense_agent_batch(const model::AgentModel& agent,
                                       const Eigen::VectorXd& x0,
                                       const std::vector<scenario::Scenario>& constraint_scens,
                                       const std::vector<scenario::Scenario>& cost_scens,
                                       const std::map<int, Eigen::VectorXd>& neighbor_x0);

/// Trajectories per neighbor, outer index = neighbor id, inner = scenario.
using NeighborTrajectories = std::map<int, std::vector<Eigen::VectorXd>>;

/// Incoming penalty data for the primal update: for each in-neighbor a (an
/// agent with i in N_a), the estimates z_ai^s of this agent's trajectories
/// and the matching multipliers.
struct IncomingPenalty {
    std::vector<Eigen::VectorXd> estimates;    // z_ai^s, each T*n_i
    std::vector<Eigen::VectorXd> multipliers;  // Lambda_ai^s, same shape
};

ProgramInstance build_centralized(const model::UncertainSystem& system,
                                  const Eigen::VectorXd& x0,
                                  const std::vector<GlobalScenario>& constraint_scenarios,
                                  const std::vector<GlobalScenario>& cost_scenarios);

/// Eq-style local primal program: local empirical cost plus the consensus
/// penalty sum_a sum_s (mu/2)||z_ai^s - x_i^s + Lambda_ai^s/mu||^2, with the
/// agent's own neighbor estimates held fixed inside the affine offsets.
ProgramInstance build_local_primal(const AgentCondensation& cond,
                                   const NeighborTrajectories& own_estimates,
                                   const std::map<int, IncomingPenalty>& incoming,
                                   double mu);

/// Projection program over the stacked neighbor estimates for all scenarios.
ProgramInstance build_projection(const AgentCondensation& cond, const Eigen::VectorXd& v_fixed,
                                 const NeighborTrajectories& neighbor_trajectories,
                                 const NeighborTrajectories& multipliers, double mu);

/// Robust-communication program: neighbor scenario data replaced by one
/// reliability box per neighbor; state rows are tightened against the whole
/// box (exact support-function offsets), the box center enters the offsets.
ProgramInstance build_robust_local(const AgentCondensation& cond,
                                   const std::map<int, softcomm::ReliabilityBox>& neighbor_boxes);

/// Empirical cost of rolled trajectories: mean over scenarios of
/// sum_k (x'Qx + u'Ru) + x_T'P x_T, with u_k = K x_k + v_k.
double empirical_cost(const Eigen::VectorXd& x0,
                      const std::vector<Eigen::VectorXd>& state_trajectories,
                      const Eigen::VectorXd& v, const Eigen::MatrixXd& K,
                      const Eigen::MatrixXd& Q, const Eigen::MatrixXd& R,
                      const Eigen::MatrixXd& P);

}  // namespace dsmpc::program

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dsmpc/errors.hpp"
#include "dsmpc/exchange.hpp"
#include "dsmpc/model.hpp"
#include "dsmpc/scenario.hpp"
#include "dsmpc/softcomm.hpp"

namespace dsmpc::mpc {

/// Aborting a step after the configured number of scenario redraws.
struct InfeasibleAfterRetries : Error {
    explicit InfeasibleAfterRetries(int step, int retries, const std::string& what)
        : Error("step " + std::to_string(step) + " infeasible after " +
                std::to_string(retries) + " redraws: " + what),
          step(step) {}
    int step;
};

/// One subsystem described by its nominal blocks. The uncertainty is the
/// additive structure-preserving map (delta added to every structurally
/// nonzero entry), which composes under plug-in/plug-out.
struct AgentBlock {
    Eigen::MatrixXd A_ii;
    Eigen::MatrixXd B;
    Eigen::MatrixXd C;
    std::map<int, Eigen::MatrixXd> couplings;  // j -> A_ij (nominal)
    model::Polytope state_polytope;
    model::Polytope input_polytope;
    Eigen::MatrixXd K, Q, R, P;
    scenario::NoiseProcess process;
    Eigen::VectorXd x0;

    int n() const { return static_cast<int>(A_ii.rows()); }
    int m() const { return static_cast<int>(B.cols()); }
    int p() const { return static_cast<int>(C.cols()); }
};

/// A reconfigurable network of coupled agents plus the global budget.
struct Network {
    std::vector<AgentBlock> blocks;
    int horizon = 0;
    double epsilon = 0.05;
    double beta = 0.01;
    std::vector<double> budget_weights;  // empty = uniform
    int cost_scenario_cap = 20;          // S_bar = min(S, cap)

    int agent_count() const { return static_cast<int>(blocks.size()); }

    scenario::BudgetSplit split() const;
    /// Per-agent budgets with d_i = T m_i per the decomposition rule.
    std::vector<scenario::Budget> budgets() const;

    /// Agent models with neighbor sets from the coupling blocks.
    /// `decoupled` drops all couplings (the DeSMPC baseline's solver view).
    std::vector<model::AgentModel> build_agents(bool decoupled = false) const;

    /// Assembled global system (used by the centralized mode, the true plant
    /// and the validator).
    model::UncertainSystem assemble() const;

    Eigen::VectorXd stacked_x0() const;
};

/// Adds an agent; `couplings_to_new[j]` is the new agent's dependence on
/// agent j (A_{new,j}) and `couplings_from_new[j]` is agent j's dependence on
/// the new one (A_{j,new}). Budgets are re-split over the new agent count.
Network plug_in(const Network& network, const AgentBlock& new_agent,
                const std::map<int, Eigen::MatrixXd>& couplings_to_new,
                const std::map<int, Eigen::MatrixXd>& couplings_from_new);

/// Removes an agent (and every coupling that references it); remaining agents
/// are reindexed downward. Budgets are re-split over the new agent count.
Network plug_out(const Network& network, int agent_id);

struct SoftCommConfig {
    double beta_tilde = 0.01;
    double alpha_target = 0.85;
    int sample_count = 0;  // 0 = derive from alpha_target
    softcomm::BoxCentering centering = softcomm::BoxCentering::SampleMeanCentered;
    softcomm::BoxDimension dimension = softcomm::BoxDimension::FullTrajectory;
};

enum class ControllerKind { Centralized, Distributed, SoftComm, Decoupled };

struct ControllerMode {
    ControllerKind kind = ControllerKind::Distributed;
    SoftCommConfig soft;

    std::string name() const;
};

struct RunOptions {
    exchange::ExchangeConfig exchange;
    int max_retries = 5;
    bool serialize_messages = false;  // route exchange traffic through the codec
};

struct StepRecord {
    int step = 0;
    std::vector<Eigen::VectorXd> states;  // measured x_{i,k} before applying u
    std::vector<Eigen::VectorXd> inputs;  // applied u_{i,k}
    std::vector<Eigen::VectorXd> v;       // per-agent optimizers (full horizon)
    std::vector<double> objectives;       // per-agent objective values
    int exchange_iterations = 0;
    double residual = 0.0;
    int redraws = 0;
    std::size_t messages = 0;
};

struct ClosedLoopTrace {
    std::string mode;
    std::uint64_t seed = 0;
    std::string config_fingerprint;
    std::vector<StepRecord> steps;
    std::vector<Eigen::VectorXd> final_states;

    /// Numeric payload equality (replay determinism checks).
    bool same_numeric(const ClosedLoopTrace& other) const;
    std::string to_csv() const;
};

ClosedLoopTrace run_dsmpc(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                          int sim_horizon, std::uint64_t seed, const RunOptions& options = {});

ClosedLoopTrace run_dsmpcs(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                           const SoftCommConfig& soft, int sim_horizon, std::uint64_t seed,
                           const RunOptions& options = {});

ClosedLoopTrace run_centralized(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                                int sim_horizon, std::uint64_t seed,
                                const RunOptions& options = {});

ClosedLoopTrace run_decoupled(const Network& network, const std::vector<Eigen::VectorXd>& x0,
                              int sim_horizon, std::uint64_t seed,
                              const RunOptions& options = {});

ClosedLoopTrace run_mode(const Network& network, const ControllerMode& mode,
                         const std::vector<Eigen::VectorXd>& x0, int sim_horizon,
                         std::uint64_t seed, const RunOptions& options = {});

/// One open-loop solve (the first MPC step) returning the stacked optimizer;
/// used by the a-posteriori validator.
struct SingleStepSolution {
    Eigen::VectorXd v_stacked;  // T m (global layout)
    int redraws = 0;
};
SingleStepSolution solve_single_step(const Network& network, const ControllerMode& mode,
                                     const std::vector<Eigen::VectorXd>& x0,
                                     std::uint64_t seed, const RunOptions& options = {});

}  // namespace dsmpc::mpc

#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "dsmpc/mpc.hpp"

namespace dsmpc::validation {

struct Interval {
    double lower = 0.0;
    double upper = 1.0;
};

/// Exact Clopper-Pearson interval for `successes` out of `trials` at the
/// given confidence (default 95%).
Interval clopper_pearson(int successes, int trials, double confidence = 0.95);

/// A-posteriori Monte Carlo estimate of the chance-constraint violation of a
/// fixed optimizer v* on fresh out-of-sample draws.
struct ViolationReport {
    std::string mode;
    int draws = 0;
    std::vector<double> agent_rates;
    std::vector<Interval> agent_intervals;
    double global_rate = 0.0;  // violation in ANY agent (union event)
    Interval global_interval;
    double target_epsilon = 0.0;
};

/// Rolls M fresh realizations of the closed-form prediction under v_stacked
/// (u = Kx + v on the assembled system) and counts trajectories leaving the
/// state set at any step 1..T. Draws come from the validation stream,
/// disjoint from every controller stream.
ViolationReport estimate_violation(const mpc::Network& network,
                                   const std::vector<Eigen::VectorXd>& x0,
                                   const Eigen::VectorXd& v_stacked, int draws,
                                   std::uint64_t seed);

/// Closed-loop comparison of controller modes on identical plant seeds.
struct ModeSummary {
    std::string mode;
    double violation_rate = 0.0;  // fraction of (seed, step, agent) out-of-set events
    Interval violation_interval;
    double mean_cost = 0.0;       // realized quadratic cost per step
    double mean_messages_per_step = 0.0;
    double mean_exchange_iterations = 0.0;
    int infeasible_aborts = 0;
};

std::vector<ModeSummary> compare_modes(const mpc::Network& network,
                                       const std::vector<mpc::ControllerMode>& modes,
                                       int sim_horizon, const std::vector<std::uint64_t>& seeds,
                                       const mpc::RunOptions& options = {});

std::string summaries_to_csv(const std::vector<ModeSummary>& rows);

}  // namespace dsmpc::validation

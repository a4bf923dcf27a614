#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "dsmpc/rng.hpp"

namespace dsmpc::scenario {

/// Certificate tuple for one scenario program: drawing `sample_count` i.i.d.
/// scenarios makes the solution violate its chance constraint with
/// probability at most `epsilon`, with confidence at least 1 - `beta` over
/// the draw. `dimension` is the number of decision variables.
struct Budget {
    double epsilon = 0.0;
    double beta = 0.0;
    int dimension = 0;
    int sample_count = 0;
    std::string method;  // "binomial-tail" or "explicit"

    /// Validates the stored certificate (binomial tail at sample_count <= beta).
    bool holds() const;
};

/// log of the binomial tail sum_{i=0}^{d-1} C(S,i) eps^i (1-eps)^(S-i),
/// evaluated with log-gamma and a log-sum-exp reduction so S in the
/// thousands cannot overflow.
double log_binomial_tail(double epsilon, int sample_count, int dimension);

/// Smallest S >= d whose binomial tail is <= beta.
int sample_count(double epsilon, double beta, int dimension);

/// Closed-form upper bound ceil(e/(e-1) * (1/eps) * (d + ln(1/beta))).
int explicit_sample_count(double epsilon, double beta, int dimension);

Budget make_budget(double epsilon, double beta, int dimension);
Budget make_explicit_budget(double epsilon, double beta, int dimension);

/// Per-agent budget split with sum(eps_i) = eps and sum(beta_i) = beta.
/// Uniform by default; `weights` (positive, summing to 1) selects a
/// non-uniform split.
struct BudgetSplit {
    std::vector<double> epsilons;
    std::vector<double> betas;
};
BudgetSplit split_budget(double epsilon, double beta, int agent_count,
                         const std::vector<double>& weights = {});

/// Reliability level of a box fitted to `sample_count` samples in dimension
/// `dimension`: alpha = (beta / C(S, d))^(1/(S-d)), computed in log space.
double reliability_level(double beta_tilde, int sample_count, int dimension);

/// Smallest S > d with reliability_level(beta_tilde, S, d) >= alpha_target.
int samples_for_reliability(double alpha_target, double beta_tilde, int dimension);

/// Feasibility level of an agent whose neighbors communicate
/// probabilistically reliable sets: alpha_bar = 1 - (1-alpha)/prod(alpha_tilde).
/// The bound is vacuous (flag set, value clamped to 0) when
/// prod(alpha_tilde) <= 1 - alpha.
struct ComposedFeasibility {
    double alpha_bar = 0.0;
    bool vacuous = false;
};
ComposedFeasibility composed_feasibility(double alpha,
                                         const std::vector<double>& alpha_tildes);

/// Noise model for one agent's uncertainty sources. The additive disturbance
/// w is uniform in a band around a nominal trajectory; the parametric
/// uncertainty delta is a Gaussian rejection-sampled at a magnitude cap.
struct NoiseProcess {
    Eigen::MatrixXd w_nominal;     // T x p
    double w_band_fraction = 0.0;  // band half-width as a fraction of |nominal|
    double delta_mean = 0.0;
    double delta_stddev = 0.0;
    double delta_cap = 0.0;        // |delta| <= cap, enforced by rejection
};

/// One scenario: a disturbance trajectory (T x p) and a parametric
/// uncertainty trajectory (one scalar per step).
struct Scenario {
    Eigen::MatrixXd w;      // T x p
    Eigen::VectorXd delta;  // T
};

struct ScenarioSet {
    int agent_index = 0;
    std::uint64_t seed = 0;  // stream key the draws came from
    std::vector<Scenario> scenarios;

    int count() const { return static_cast<int>(scenarios.size()); }
};

/// Draws `count` i.i.d. scenario trajectories. `stream_key` should come from
/// rng::derive so that agents, sampling times, and roles (constraint set vs
/// cost-averaging set) get independent substreams.
ScenarioSet draw_scenarios(const NoiseProcess& process, int agent_index, int count,
                           int horizon, std::uint64_t stream_key);

/// Single fresh draw (used by the plant and the Monte Carlo validator).
Scenario draw_one(const NoiseProcess& process, int horizon, std::uint64_t stream_key);

}  // namespace dsmpc::scenario

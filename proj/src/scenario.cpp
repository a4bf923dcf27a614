#include "dsmpc/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dsmpc/errors.hpp"
#include "dsmpc/parallel.hpp"

namespace dsmpc::scenario {

namespace {

void check_probability(double value, const char* name) {
    if (!(value > 0.0 && value < 1.0)) {
        throw InvalidBudget(std::string(name) + " must lie in (0,1)");
    }
}

double log_choose(int n, int k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace

double log_binomial_tail(double epsilon, int sample_count, int dimension) {
    check_probability(epsilon, "epsilon");
    if (dimension < 1) throw InvalidBudget("dimension must be >= 1");
    if (sample_count < dimension) {
        return 0.0;  // tail covers the full distribution, log(1)
    }
    const double log_eps = std::log(epsilon);
    const double log_1m_eps = std::log1p(-epsilon);
    // log-sum-exp over i = 0..d-1 of log C(S,i) + i log eps + (S-i) log(1-eps)
    double max_term = -std::numeric_limits<double>::infinity();
    std::vector<double> terms(static_cast<std::size_t>(dimension));
    for (int i = 0; i < dimension; ++i) {
        double t = log_choose(sample_count, i) + i * log_eps + (sample_count - i) * log_1m_eps;
        terms[static_cast<std::size_t>(i)] = t;
        max_term = std::max(max_term, t);
    }
    double sum = 0.0;
    for (double t : terms) sum += std::exp(t - max_term);
    return max_term + std::log(sum);
}

int sample_count(double epsilon, double beta, int dimension) {
    check_probability(epsilon, "epsilon");
    check_probability(beta, "beta");
    if (dimension < 1) throw InvalidBudget("dimension must be >= 1");
    const double log_beta = std::log(beta);
    auto tail_ok = [&](int s) { return log_binomial_tail(epsilon, s, dimension) <= log_beta; };

    // The tail is non-increasing in S; bracket by doubling, then bisect.
    int lo = dimension;  // S must be at least d for the program to be supported
    if (tail_ok(lo)) return lo;
    int hi = std::max(2 * lo, 16);
    while (!tail_ok(hi)) {
        lo = hi;
        if (hi > (1 << 28)) throw InvalidBudget("sample count exceeds 2^28");
        hi *= 2;
    }
    while (hi - lo > 1) {
        int mid = lo + (hi - lo) / 2;
        (tail_ok(mid) ? hi : lo) = mid;
    }
    return hi;
}

int explicit_sample_count(double epsilon, double beta, int dimension) {
    check_probability(epsilon, "epsilon");
    check_probability(beta, "beta");
    if (dimension < 1) throw InvalidBudget("dimension must be >= 1");
    const double e = std::exp(1.0);
    const double bound = e / (e - 1.0) / epsilon * (dimension + std::log(1.0 / beta));
    return static_cast<int>(std::ceil(bound));
}

bool Budget::holds() const {
    if (!(epsilon > 0.0 && epsilon < 1.0) || !(beta > 0.0 && beta < 1.0)) return false;
    if (dimension < 1 || sample_count < dimension) return false;
    return log_binomial_tail(epsilon, sample_count, dimension) <= std::log(beta);
}

Budget make_budget(double epsilon, double beta, int dimension) {
    Budget b;
    b.epsilon = epsilon;
    b.beta = beta;
    b.dimension = dimension;
    b.sample_count = sample_count(epsilon, beta, dimension);
    b.method = "binomial-tail";
    return b;
}

Budget make_explicit_budget(double epsilon, double beta, int dimension) {
    Budget b;
    b.epsilon = epsilon;
    b.beta = beta;
    b.dimension = dimension;
    b.sample_count = explicit_sample_count(epsilon, beta, dimension);
    b.method = "explicit";
    return b;
}

BudgetSplit split_budget(double epsilon, double beta, int agent_count,
                         const std::vector<double>& weights) {
    check_probability(epsilon, "epsilon");
    check_probability(beta, "beta");
    if (agent_count < 1) throw InvalidBudget("agent_count must be >= 1");

    std::vector<double> w = weights;
    if (w.empty()) {
        w.assign(static_cast<std::size_t>(agent_count), 1.0 / agent_count);
    }
    if (static_cast<int>(w.size()) != agent_count) {
        throw WeightsDontSum("expected " + std::to_string(agent_count) + " weights, got " +
                             std::to_string(w.size()));
    }
    double total = 0.0;
    for (double wi : w) {
        if (!(wi > 0.0)) throw WeightsDontSum("weights must be positive");
        total += wi;
    }
    if (std::abs(total - 1.0) > 1e-9) {
        throw WeightsDontSum("weights sum to " + std::to_string(total) + ", expected 1");
    }

    BudgetSplit split;
    split.epsilons.reserve(w.size());
    split.betas.reserve(w.size());
    for (double wi : w) {
        split.epsilons.push_back(epsilon * wi);
        split.betas.push_back(beta * wi);
    }
    return split;
}

double reliability_level(double beta_tilde, int sample_count, int dimension) {
    check_probability(beta_tilde, "beta_tilde");
    if (dimension < 0) throw InvalidBudget("dimension must be >= 0");
    if (sample_count <= dimension) {
        throw InsufficientSamples("need more than " + std::to_string(dimension) +
                                  " samples, got " + std::to_string(sample_count));
    }
    const int root_degree = sample_count - dimension;
    const double log_alpha =
        (std::log(beta_tilde) - log_choose(sample_count, dimension)) / root_degree;
    return std::exp(log_alpha);
}

int samples_for_reliability(double alpha_target, double beta_tilde, int dimension) {
    check_probability(alpha_target, "alpha_target");
    check_probability(beta_tilde, "beta_tilde");
    if (dimension < 0) throw InvalidBudget("dimension must be >= 0");
    auto ok = [&](int s) { return reliability_level(beta_tilde, s, dimension) >= alpha_target; };

    // reliability_level is increasing in S; bracket by doubling, then bisect.
    int lo = dimension + 1;
    if (ok(lo)) return lo;
    int hi = std::max(2 * lo, 16);
    while (!ok(hi)) {
        lo = hi;
        if (hi > (1 << 28)) throw InvalidBudget("sample count exceeds 2^28");
        hi *= 2;
    }
    while (hi - lo > 1) {
        int mid = lo + (hi - lo) / 2;
        (ok(mid) ? hi : lo) = mid;
    }
    return hi;
}

ComposedFeasibility composed_feasibility(double alpha,
                                         const std::vector<double>& alpha_tildes) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw InvalidBudget("alpha must lie in (0,1]");
    double product = 1.0;
    for (double a : alpha_tildes) {
        if (!(a > 0.0 && a <= 1.0)) throw InvalidBudget("alpha_tilde must lie in (0,1]");
        product *= a;
    }
    ComposedFeasibility out;
    if (product <= 1.0 - alpha) {
        out.vacuous = true;
        out.alpha_bar = 0.0;
        return out;
    }
    out.alpha_bar = 1.0 - (1.0 - alpha) / product;
    return out;
}

namespace {

double uniform_symmetric(rng::Engine& eng) {
    // U(-1, 1)
    std::uniform_real_distribution<double> dist(-1.0, 1.0);
    return dist(eng);
}

double truncated_gaussian(rng::Engine& eng, double mean, double stddev, double cap) {
    if (cap <= 0.0) return 0.0;
    if (stddev <= 0.0) return std::clamp(mean, -cap, cap);
    std::normal_distribution<double> dist(mean, stddev);
    for (int attempt = 0; attempt < 100000; ++attempt) {
        double d = dist(eng);
        if (std::abs(d) <= cap) return d;
    }
    // Effectively unreachable: the Gaussian has positive mass in [-cap, cap].
    return 0.0;
}

}  // namespace

Scenario draw_one(const NoiseProcess& process, int horizon, std::uint64_t stream_key) {
    const int p = static_cast<int>(process.w_nominal.cols());
    if (process.w_nominal.rows() < horizon) {
        throw DimensionMismatch("nominal disturbance trajectory shorter than horizon");
    }
    rng::Engine eng = rng::engine(stream_key);
    Scenario s;
    s.w.resize(horizon, p);
    s.delta.resize(horizon);
    for (int k = 0; k < horizon; ++k) {
        for (int c = 0; c < p; ++c) {
            const double nominal = process.w_nominal(k, c);
            s.w(k, c) =
                nominal + process.w_band_fraction * std::abs(nominal) * uniform_symmetric(eng);
        }
        s.delta(k) =
            truncated_gaussian(eng, process.delta_mean, process.delta_stddev, process.delta_cap);
    }
    return s;
}

ScenarioSet draw_scenarios(const NoiseProcess& process, int agent_index, int count,
                           int horizon, std::uint64_t stream_key) {
    ScenarioSet set;
    set.agent_index = agent_index;
    set.seed = stream_key;
    set.scenarios.resize(static_cast<std::size_t>(count));
    // One substream per scenario index: draws are identical no matter how the
    // loop is scheduled.
    parallel::parallel_for(count, [&](std::int64_t s) {
        set.scenarios[static_cast<std::size_t>(s)] = draw_one(
            process, horizon, rng::derive(stream_key, {static_cast<std::uint64_t>(s)}));
    });
    return set;
}

}  // namespace dsmpc::scenario

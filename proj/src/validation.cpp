#include "dsmpc/validation.hpp"

#include <boost/math/special_functions/beta.hpp>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "dsmpc/parallel.hpp"
#include "dsmpc/program.hpp"

namespace dsmpc::validation {

Interval clopper_pearson(int successes, int trials, double confidence) {
    if (trials <= 0 || successes < 0 || successes > trials) {
        throw Error("invalid binomial counts");
    }
    const double tail = 0.5 * (1.0 - confidence);
    Interval out;
    if (successes == 0) {
        out.lower = 0.0;
    } else {
        out.lower = boost::math::ibeta_inv(static_cast<double>(successes),
                                           static_cast<double>(trials - successes + 1), tail);
    }
    if (successes == trials) {
        out.upper = 1.0;
    } else {
        out.upper = boost::math::ibeta_inv(static_cast<double>(successes + 1),
                                           static_cast<double>(trials - successes),
                                           1.0 - tail);
    }
    return out;
}

ViolationReport estimate_violation(const mpc::Network& network,
                                   const std::vector<Eigen::VectorXd>& x0,
                                   const Eigen::VectorXd& v_stacked, int draws,
                                   std::uint64_t seed) {
    const int N = network.agent_count();
    const model::UncertainSystem sys = network.assemble();
    const int T = network.horizon;
    if (v_stacked.size() != T * sys.m) throw DimensionMismatch("stacked optimizer length");

    Eigen::VectorXd x_global(sys.n);
    {
        int off = 0;
        for (int i = 0; i < N; ++i) {
            x_global.segment(off, network.blocks[static_cast<std::size_t>(i)].n()) =
                x0[static_cast<std::size_t>(i)];
            off += network.blocks[static_cast<std::size_t>(i)].n();
        }
    }

    // Per-agent violation counters; the union event is counted per draw, so
    // the global rate is exact (not a bound).
    std::vector<std::atomic<int>> agent_hits(static_cast<std::size_t>(N));
    for (auto& a : agent_hits) a.store(0);
    std::atomic<int> global_hits{0};

    parallel::parallel_for(draws, [&](std::int64_t mdraw) {
        // Fresh global realization: per-agent trajectories stacked.
        Eigen::MatrixXd w(T, sys.p);
        Eigen::MatrixXd delta(T, N);
        int p0 = 0;
        for (int i = 0; i < N; ++i) {
            const auto scen = scenario::draw_one(
                network.blocks[static_cast<std::size_t>(i)].process, T,
                rng::derive(seed, rng::Role::Validation,
                            {static_cast<std::uint64_t>(mdraw), static_cast<std::uint64_t>(i)}));
            w.middleCols(p0, network.blocks[static_cast<std::size_t>(i)].p()) = scen.w;
            delta.col(i) = scen.delta;
            p0 += network.blocks[static_cast<std::size_t>(i)].p();
        }

        // Closed-form rollout x+ = A_cl(d) x + B(d) v_k + C(d) w_k.
        std::vector<bool> agent_violated(static_cast<std::size_t>(N), false);
        Eigen::VectorXd x = x_global;
        for (int k = 0; k < T; ++k) {
            const model::SystemMatrices mats = sys.at(delta.row(k).transpose());
            x = (mats.A + mats.B * sys.K) * x + mats.B * v_stacked.segment(k * sys.m, sys.m) +
                mats.C * w.row(k).transpose();
            int off = 0;
            for (int i = 0; i < N; ++i) {
                const auto& blk = network.blocks[static_cast<std::size_t>(i)];
                if (!blk.state_polytope.contains(x.segment(off, blk.n()))) {
                    agent_violated[static_cast<std::size_t>(i)] = true;
                }
                off += blk.n();
            }
        }
        bool any = false;
        for (int i = 0; i < N; ++i) {
            if (agent_violated[static_cast<std::size_t>(i)]) {
                agent_hits[static_cast<std::size_t>(i)].fetch_add(1);
                any = true;
            }
        }
        if (any) global_hits.fetch_add(1);
    });

    ViolationReport report;
    report.draws = draws;
    report.target_epsilon = network.epsilon;
    for (int i = 0; i < N; ++i) {
        const int hits = agent_hits[static_cast<std::size_t>(i)].load();
        report.agent_rates.push_back(static_cast<double>(hits) / draws);
        report.agent_intervals.push_back(clopper_pearson(hits, draws));
    }
    const int ghits = global_hits.load();
    report.global_rate = static_cast<double>(ghits) / draws;
    report.global_interval = clopper_pearson(ghits, draws);
    return report;
}

std::vector<ModeSummary> compare_modes(const mpc::Network& network,
                                       const std::vector<mpc::ControllerMode>& modes,
                                       int sim_horizon, const std::vector<std::uint64_t>& seeds,
                                       const mpc::RunOptions& options) {
    std::vector<ModeSummary> rows;
    for (const auto& mode : modes) {
        ModeSummary row;
        row.mode = mode.name();
        long violations = 0, cells = 0;
        double cost = 0.0, messages = 0.0, iterations = 0.0;
        long steps_total = 0;

        std::vector<mpc::ClosedLoopTrace> traces(seeds.size());
        std::atomic<int> aborts{0};
        parallel::parallel_for(static_cast<std::int64_t>(seeds.size()), [&](std::int64_t sidx) {
            try {
                traces[static_cast<std::size_t>(sidx)] =
                    mpc::run_mode(network, mode, [&] {
                        std::vector<Eigen::VectorXd> x0;
                        for (const auto& blk : network.blocks) x0.push_back(blk.x0);
                        return x0;
                    }(), sim_horizon, seeds[static_cast<std::size_t>(sidx)], options);
            } catch (const mpc::InfeasibleAfterRetries&) {
                aborts.fetch_add(1);
            }
        });
        row.infeasible_aborts = aborts.load();

        for (const auto& trace : traces) {
            for (const auto& rec : trace.steps) {
                ++steps_total;
                messages += static_cast<double>(rec.messages);
                iterations += rec.exchange_iterations;
                for (std::size_t i = 0; i < rec.states.size(); ++i) {
                    const auto& blk = network.blocks[i];
                    // Count post-initial states against the constraint set; the
                    // initial condition is given, later steps are the loop's doing.
                    if (rec.step > 0) {
                        ++cells;
                        if (!blk.state_polytope.contains(rec.states[i])) ++violations;
                    }
                    const Eigen::VectorXd& u = rec.inputs[i];
                    const Eigen::VectorXd& x = rec.states[i];
                    cost += x.dot(blk.Q * x) + u.dot(blk.R * u);
                }
            }
            // Final states count as well.
            for (std::size_t i = 0; i < trace.final_states.size(); ++i) {
                ++cells;
                if (!network.blocks[i].state_polytope.contains(trace.final_states[i])) {
                    ++violations;
                }
            }
        }
        row.violation_rate = cells > 0 ? static_cast<double>(violations) / cells : 0.0;
        row.violation_interval =
            cells > 0 ? clopper_pearson(static_cast<int>(violations), static_cast<int>(cells))
                      : Interval{};
        row.mean_cost = steps_total > 0 ? cost / steps_total : 0.0;
        row.mean_messages_per_step = steps_total > 0 ? messages / steps_total : 0.0;
        row.mean_exchange_iterations = steps_total > 0 ? iterations / steps_total : 0.0;
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string summaries_to_csv(const std::vector<ModeSummary>& rows) {
    std::ostringstream os;
    os << "mode,violation_rate,violation_lo,violation_hi,mean_cost,mean_messages_per_step,"
          "mean_exchange_iterations,infeasible_aborts\n";
    os << std::setprecision(10);
    for (const auto& r : rows) {
        os << r.mode << "," << r.violation_rate << "," << r.violation_interval.lower << ","
           << r.violation_interval.upper << "," << r.mean_cost << ","
           << r.mean_messages_per_step << "," << r.mean_exchange_iterations << ","
           << r.infeasible_aborts << "\n";
    }
    return os.str();
}

}  // namespace dsmpc::validation

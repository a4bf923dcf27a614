// Command-line driver: budget tables, closed-loop runs, Monte Carlo
// validation, and the plug-and-play demo.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "dsmpc/casestudy.hpp"
#include "dsmpc/config.hpp"
#include "dsmpc/validation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitInfeasible = 3;
constexpr int kExitNumerical = 4;

json budget_record(const dsmpc::scenario::Budget& b) {
    return json{{"epsilon", b.epsilon},
                {"beta", b.beta},
                {"dimension", b.dimension},
                {"sample_count", b.sample_count},
                {"method", b.method}};
}

void write_file(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path);
    if (!out) throw dsmpc::Error("cannot write " + path.string());
    out << text;
}

json trace_summary(const dsmpc::config::ExperimentConfig& cfg,
                   const dsmpc::mpc::ClosedLoopTrace& trace) {
    json per_step = json::array();
    for (const auto& rec : trace.steps) {
        json step{{"k", rec.step},
                  {"exchange_iterations", rec.exchange_iterations},
                  {"residual", rec.residual},
                  {"redraws", rec.redraws},
                  {"messages", rec.messages},
                  {"objectives", rec.objectives}};
        per_step.push_back(std::move(step));
    }
    json final_states = json::array();
    for (const auto& x : trace.final_states) {
        final_states.push_back(std::vector<double>(x.data(), x.data() + x.size()));
    }

    json summary{{"mode", trace.mode},
                 {"seed", trace.seed},
                 {"fingerprint", cfg.fingerprint},
                 {"config", json::parse(cfg.resolved)},
                 {"steps", std::move(per_step)},
                 {"final_states", std::move(final_states)}};

    json budgets = json::array();
    for (const auto& b : cfg.network.budgets()) budgets.push_back(budget_record(b));
    summary["budgets"] = std::move(budgets);

    if (cfg.mode.kind == dsmpc::mpc::ControllerKind::SoftComm) {
        // Composed feasibility per agent given the neighbors' reliability.
        const auto agents = cfg.network.build_agents();
        const auto split = cfg.network.split();
        json soft = json::array();
        double global_eps_bar = 0.0;
        for (int i = 0; i < cfg.network.agent_count(); ++i) {
            std::vector<double> alphas(agents[static_cast<std::size_t>(i)].neighbors.size(),
                                       cfg.mode.soft.alpha_target);
            const auto composed = dsmpc::scenario::composed_feasibility(
                1.0 - split.epsilons[static_cast<std::size_t>(i)], alphas);
            const double eps_bar = composed.vacuous ? 1.0 : 1.0 - composed.alpha_bar;
            global_eps_bar += eps_bar;
            soft.push_back(json{{"agent", i},
                                {"epsilon_i", split.epsilons[static_cast<std::size_t>(i)]},
                                {"alpha_tilde_target", cfg.mode.soft.alpha_target},
                                {"epsilon_bar_i", eps_bar},
                                {"vacuous", composed.vacuous}});
        }
        summary["soft_reliability"] = std::move(soft);
        // Recomputed from the split budgets; narrative round-offs are not matched.
        summary["epsilon_bar_global_recomputed"] = global_eps_bar;
    }
    return summary;
}

int cmd_bounds(double eps, double beta, int dim, int agents_count, int horizon) {
    json out = json::array();
    if (agents_count > 0) {
        const auto split = dsmpc::scenario::split_budget(eps, beta, agents_count);
        for (int i = 0; i < agents_count; ++i) {
            auto b = dsmpc::scenario::make_budget(split.epsilons[static_cast<std::size_t>(i)],
                                                  split.betas[static_cast<std::size_t>(i)],
                                                  std::max(1, dim * horizon));
            json rec = budget_record(b);
            rec["agent"] = i;
            rec["explicit_sample_count"] = dsmpc::scenario::explicit_sample_count(
                b.epsilon, b.beta, b.dimension);
            out.push_back(std::move(rec));
        }
    } else {
        auto b = dsmpc::scenario::make_budget(eps, beta, dim);
        json rec = budget_record(b);
        rec["explicit_sample_count"] =
            dsmpc::scenario::explicit_sample_count(eps, beta, dim);
        out.push_back(std::move(rec));
    }
    std::cout << out.dump(2) << "\n";
    return kExitOk;
}

int cmd_run(const dsmpc::config::ExperimentConfig& cfg) {
    const auto trace =
        dsmpc::mpc::run_mode(cfg.network, cfg.mode, cfg.x0, cfg.sim_steps, cfg.seed, cfg.options);
    const fs::path dir(cfg.out_dir);
    write_file(dir / "trace.csv", trace.to_csv());
    write_file(dir / "summary.json", trace_summary(cfg, trace).dump(2) + "\n");
    std::cout << "wrote " << (dir / "trace.csv").string() << " and summary.json (fingerprint "
              << cfg.fingerprint << ")\n";
    return kExitOk;
}

int cmd_validate(const dsmpc::config::ExperimentConfig& cfg, int draws) {
    using dsmpc::mpc::ControllerKind;
    std::vector<dsmpc::mpc::ControllerMode> modes;
    modes.push_back({ControllerKind::Decoupled, {}});
    modes.push_back({ControllerKind::Centralized, {}});
    modes.push_back({ControllerKind::Distributed, {}});
    dsmpc::mpc::ControllerMode soft85 = cfg.mode;
    soft85.kind = ControllerKind::SoftComm;
    soft85.soft.alpha_target = 0.85;
    dsmpc::mpc::ControllerMode soft50 = soft85;
    soft50.soft.alpha_target = 0.50;
    modes.push_back(soft85);
    modes.push_back(soft50);

    std::vector<std::uint64_t> seeds;
    for (int s = 0; s < 5; ++s) seeds.push_back(cfg.seed + static_cast<std::uint64_t>(s));
    const auto rows =
        dsmpc::validation::compare_modes(cfg.network, modes, cfg.sim_steps, seeds, cfg.options);

    const fs::path dir(cfg.out_dir);
    write_file(dir / "comparison.csv", dsmpc::validation::summaries_to_csv(rows));

    // One-shot certified violation for the configured mode.
    const auto step =
        dsmpc::mpc::solve_single_step(cfg.network, cfg.mode, cfg.x0, cfg.seed, cfg.options);
    const auto report = dsmpc::validation::estimate_violation(cfg.network, cfg.x0,
                                                              step.v_stacked, draws, cfg.seed);
    json rep{{"mode", cfg.mode.name()},
             {"draws", report.draws},
             {"global_rate", report.global_rate},
             {"global_interval", {report.global_interval.lower, report.global_interval.upper}},
             {"target_epsilon", report.target_epsilon},
             {"agent_rates", report.agent_rates},
             {"fingerprint", cfg.fingerprint},
             {"seed", cfg.seed}};
    write_file(dir / "violation.json", rep.dump(2) + "\n");

    std::cout << dsmpc::validation::summaries_to_csv(rows);
    std::cout << "one-shot global violation " << report.global_rate << " (target eps "
              << report.target_epsilon << ")\n";
    return kExitOk;
}

int cmd_plugdemo(const dsmpc::config::ExperimentConfig& cfg, int plug_in_step,
                 int plug_out_step) {
    using dsmpc::casestudy::fourth_room;
    auto net = cfg.network;
    auto x0 = cfg.x0;
    json log = json::array();

    auto budgets_json = [](const dsmpc::mpc::Network& n) {
        json arr = json::array();
        double eps_sum = 0.0, beta_sum = 0.0;
        const auto split = n.split();
        for (std::size_t i = 0; i < split.epsilons.size(); ++i) {
            eps_sum += split.epsilons[i];
            beta_sum += split.betas[i];
            arr.push_back(json{{"agent", i},
                               {"epsilon_i", split.epsilons[i]},
                               {"beta_i", split.betas[i]}});
        }
        return json{{"per_agent", arr}, {"epsilon_sum", eps_sum}, {"beta_sum", beta_sum}};
    };

    std::vector<Eigen::VectorXd> states = x0;
    dsmpc::mpc::ClosedLoopTrace combined;
    combined.mode = "DSMPC+PnP";
    combined.seed = cfg.seed;

    auto run_segment = [&](int from, int to) {
        if (to <= from) return;
        auto trace =
            dsmpc::mpc::run_dsmpc(net, states, to - from, cfg.seed + static_cast<std::uint64_t>(from), cfg.options);
        for (auto& rec : trace.steps) {
            rec.step += from;
            combined.steps.push_back(rec);
        }
        states = trace.final_states;
    };

    log.push_back(json{{"event", "start"}, {"agents", net.agent_count()},
                       {"budgets", budgets_json(net)}});
    run_segment(0, plug_in_step);

    const auto extra = fourth_room();
    net = dsmpc::mpc::plug_in(net, extra.block, extra.couplings_to_new,
                              extra.couplings_from_new);
    states.push_back(extra.block.x0);
    log.push_back(json{{"event", "plug_in"}, {"step", plug_in_step},
                       {"agents", net.agent_count()}, {"budgets", budgets_json(net)}});
    run_segment(plug_in_step, plug_out_step);

    net = dsmpc::mpc::plug_out(net, net.agent_count() - 1);
    states.pop_back();
    log.push_back(json{{"event", "plug_out"}, {"step", plug_out_step},
                       {"agents", net.agent_count()}, {"budgets", budgets_json(net)}});
    run_segment(plug_out_step, cfg.sim_steps);

    combined.final_states = states;
    const fs::path dir(cfg.out_dir);
    write_file(dir / "plugdemo_trace.csv", combined.to_csv());
    write_file(dir / "plugdemo_log.json", log.dump(2) + "\n");
    std::cout << "plug-and-play demo complete; budgets conserved at every change\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distributed scenario MPC toolkit"};
    app.require_subcommand(1);

    // bounds
    double eps = 0.1, beta = 0.01;
    int dim = 1, agents_count = 0, horizon = 1;
    auto* bounds = app.add_subcommand("bounds", "Print scenario sample budgets");
    bounds->add_option("--eps", eps, "violation level in (0,1)");
    bounds->add_option("--beta", beta, "confidence level in (0,1)");
    bounds->add_option("--dim", dim, "decision dimension");
    bounds->add_option("--agents", agents_count, "split the budget over N agents");
    bounds->add_option("--horizon", horizon, "multiply per-agent dimension by the horizon");

    // shared run/validate/plugdemo flags
    std::string config_path, mode_override, out_override;
    std::uint64_t seed_override = 0;
    bool seed_set = false;
    int mc_override = 0, retries_override = -1;
    auto add_common = [&](CLI::App* cmd, bool config_required) {
        auto* opt = cmd->add_option("--config", config_path, "experiment config JSON");
        if (config_required) opt->required();
        cmd->add_option("--mode", mode_override,
                        "centralized|distributed|softcomm|decoupled");
        cmd->add_option("--seed", seed_override, "RNG seed")->each([&](const std::string&) {
            seed_set = true;
        });
        cmd->add_option("--out", out_override, "output directory");
        cmd->add_option("--max-retries", retries_override, "scenario redraw cap");
    };

    auto* run = app.add_subcommand("run", "Closed-loop run; writes trace CSV + summary JSON");
    add_common(run, true);
    auto* validate = app.add_subcommand("validate", "Monte Carlo validation + mode comparison");
    add_common(validate, true);
    validate->add_option("--mc", mc_override, "Monte Carlo draws");
    int plug_in_step = 8, plug_out_step = 16;
    auto* plugdemo = app.add_subcommand("plugdemo", "Plug-and-play demo on the preset");
    add_common(plugdemo, false);
    plugdemo->add_option("--in-at", plug_in_step, "plug-in step");
    plugdemo->add_option("--out-at", plug_out_step, "plug-out step");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (bounds->parsed()) {
            if (!(eps > 0 && eps < 1) || !(beta > 0 && beta < 1) || dim < 1) {
                std::cerr << "bounds: eps and beta must lie in (0,1), dim >= 1\n";
                return kExitUsage;
            }
            return cmd_bounds(eps, beta, dim, agents_count, horizon);
        }

        dsmpc::config::ExperimentConfig cfg;
        if (!config_path.empty()) {
            cfg = dsmpc::config::load_config(config_path);
        } else {
            // plugdemo without a config uses the preset.
            dsmpc::config::json doc;
            doc["system"] = {{"preset", "three-room"}};
            cfg = dsmpc::config::parse_config(doc);
        }
        if (!mode_override.empty()) {
            using dsmpc::mpc::ControllerKind;
            if (mode_override == "centralized") cfg.mode.kind = ControllerKind::Centralized;
            else if (mode_override == "distributed") cfg.mode.kind = ControllerKind::Distributed;
            else if (mode_override == "softcomm") cfg.mode.kind = ControllerKind::SoftComm;
            else if (mode_override == "decoupled") cfg.mode.kind = ControllerKind::Decoupled;
            else {
                std::cerr << "unknown mode: " << mode_override << "\n";
                return kExitUsage;
            }
        }
        if (seed_set) cfg.seed = seed_override;
        if (!out_override.empty()) cfg.out_dir = out_override;
        if (retries_override >= 0) cfg.options.max_retries = retries_override;
        if (mc_override > 0) cfg.mc_draws = mc_override;

        if (run->parsed()) return cmd_run(cfg);
        if (validate->parsed()) return cmd_validate(cfg, cfg.mc_draws);
        if (plugdemo->parsed()) return cmd_plugdemo(cfg, plug_in_step, plug_out_step);
        return kExitUsage;
    } catch (const dsmpc::mpc::InfeasibleAfterRetries& e) {
        nlohmann::json diag{{"error", "infeasible_after_retries"}, {"detail", e.what()}};
        std::cerr << diag.dump(2) << "\n";
        return kExitInfeasible;
    } catch (const dsmpc::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const dsmpc::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumerical;
    }
}

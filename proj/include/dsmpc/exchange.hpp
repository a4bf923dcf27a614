#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <memory>
#include <vector>

#include "dsmpc/model.hpp"
#include "dsmpc/program.hpp"
#include "dsmpc/scenario.hpp"

namespace dsmpc::exchange {

enum class MessageKind : std::uint8_t {
    ScenarioSetBroadcast = 1,
    EstimateBroadcast = 2,
    MultiplierBroadcast = 3,
};

/// One broadcast between neighboring agents: a list of equally sized
/// trajectories tagged with the iteration that produced them.
struct ExchangeMessage {
    MessageKind kind = MessageKind::ScenarioSetBroadcast;
    std::uint16_t sender = 0;
    std::uint16_t receiver = 0;
    std::uint32_t iteration = 0;
    std::vector<Eigen::VectorXd> payload;

    bool operator==(const ExchangeMessage& other) const;
};

/// Wire layout, little-endian: kind(u8), sender(u16), receiver(u16),
/// iteration(u32), count(u32), dim(u32), then count*dim IEEE-754 doubles.
std::vector<std::uint8_t> encode_message(const ExchangeMessage& msg);
ExchangeMessage decode_message(const std::vector<std::uint8_t>& bytes);

/// Reliable, iteration-ordered message delivery between agents. Every
/// message is consumed exactly once by (receiver, kind, iteration).
class Transport {
  public:
    virtual ~Transport() = default;
    virtual void send(ExchangeMessage msg) = 0;
    virtual std::vector<ExchangeMessage> receive(int receiver, MessageKind kind,
                                                 std::uint32_t iteration) = 0;
    virtual std::size_t messages_sent() const = 0;
    /// Number of queued messages never consumed (0 when the exchange is done).
    virtual std::size_t undelivered() const = 0;
};

/// Default synchronous in-process transport.
class InProcessTransport : public Transport {
  public:
    void send(ExchangeMessage msg) override;
    std::vector<ExchangeMessage> receive(int receiver, MessageKind kind,
                                         std::uint32_t iteration) override;
    std::size_t messages_sent() const override { return sent_; }
    std::size_t undelivered() const override { return queue_.size(); }

  private:
    std::vector<ExchangeMessage> queue_;
    std::size_t sent_ = 0;
};

/// Routes every message through the binary codec; exercises the wire path.
class SerializingTransport : public Transport {
  public:
    void send(ExchangeMessage msg) override;
    std::vector<ExchangeMessage> receive(int receiver, MessageKind kind,
                                         std::uint32_t iteration) override;
    std::size_t messages_sent() const override { return inner_.messages_sent(); }
    std::size_t undelivered() const override { return inner_.undelivered(); }

  private:
    InProcessTransport inner_;
};

struct ExchangeConfig {
    double mu = 1.0;
    double default_tolerance = 1e-4;
    std::vector<double> tolerances;  // per-agent overrides; empty = default
    int max_iterations = 500;
    /// Agent processing order inside each phase; empty = index order. The
    /// outcome is order-invariant (asserted by tests).
    std::vector<int> evaluation_order;
    qp::QpSettings qp_settings;

    double tolerance_for(int agent) const {
        return tolerances.empty() ? default_tolerance
                                  : tolerances[static_cast<std::size_t>(agent)];
    }
};

/// Per-agent ADMM state after the exchange.
struct ExchangeAgentState {
    Eigen::VectorXd v;
    program::NeighborTrajectories z;        // own estimates z_ij^s
    program::NeighborTrajectories lambda;   // multipliers Lambda_ij^s
    std::vector<Eigen::VectorXd> own_trajectories;  // x_i^s after the last SUS
    std::vector<double> residual_history;   // eta_i per iteration
};

enum class ExchangeStatus { Converged, MaxIterationsExceeded };

struct ExchangeResult {
    ExchangeStatus status = ExchangeStatus::MaxIterationsExceeded;
    std::vector<Eigen::VectorXd> v;  // per-agent optimizers
    std::vector<ExchangeAgentState> states;
    std::vector<double> total_residual_history;
    int iterations = 0;
    bool residual_increased = false;  // soft diagnostic, warn-only
    std::size_t messages_sent = 0;
};

/// --- Algorithm building blocks (also used standalone in tests) ---

/// Solves the local primal program for one agent.
Eigen::VectorXd primal_update(const program::AgentCondensation& cond,
                              const program::NeighborTrajectories& own_estimates,
                              const std::map<int, program::IncomingPenalty>& incoming,
                              double mu, const qp::QpSettings& settings = {});

/// Scenario updating steps: re-rolls the agent's state scenarios under
/// u = K x + v with the neighbor estimates held fixed. Simple recursion,
/// no optimization.
std::vector<Eigen::VectorXd> sus_update(const model::AgentModel& agent,
                                        const Eigen::VectorXd& x0, const Eigen::VectorXd& v,
                                        const std::vector<scenario::Scenario>& scens,
                                        const program::NeighborTrajectories& estimates,
                                        const std::map<int, Eigen::VectorXd>& neighbor_x0);

/// Projects the neighbor estimates onto the agent's feasibility set.
program::NeighborTrajectories projection_update(
    const program::AgentCondensation& cond, const Eigen::VectorXd& v_fixed,
    const program::NeighborTrajectories& neighbor_trajectories,
    const program::NeighborTrajectories& multipliers, double mu,
    const qp::QpSettings& settings = {});

/// Lambda += mu (z - x), elementwise over neighbors and scenarios.
program::NeighborTrajectories dual_update(const program::NeighborTrajectories& lambda,
                                          const program::NeighborTrajectories& z,
                                          const program::NeighborTrajectories& neighbor_traj,
                                          double mu);

/// eta_i = sum_j sum_s (mu/2) ||z_ij^s - x_j^s||^2.
double residual(const program::NeighborTrajectories& z,
                const program::NeighborTrajectories& neighbor_traj, double mu);

/// Runs the full distributed scenario exchange until every agent's residual
/// is at or below its tolerance or the iteration cap is hit. All agents must
/// carry the same scenario count (the drivers draw max_i S_i everywhere,
/// which preserves every per-agent certificate).
ExchangeResult run_exchange(const std::vector<model::AgentModel>& agents,
                            const std::vector<Eigen::VectorXd>& x0s,
                            const std::vector<std::vector<scenario::Scenario>>& constraint_scens,
                            const std::vector<std::vector<scenario::Scenario>>& cost_scens,
                            const ExchangeConfig& config, Transport& transport);

}  // namespace dsmpc::exchange

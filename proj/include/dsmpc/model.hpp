#pragma once

#include <Eigen/Dense>
#include <functional>
#include <map>
#include <vector>

namespace dsmpc::model {

/// Polytope { x : A x <= b }.
struct Polytope {
    Eigen::MatrixXd A;
    Eigen::VectorXd b;

    int rows() const { return static_cast<int>(A.rows()); }
    int dim() const { return static_cast<int>(A.cols()); }
    bool contains(const Eigen::VectorXd& x, double tol = 0.0) const {
        return rows() == 0 || ((A * x - b).array() <= tol).all();
    }
};

struct SystemMatrices {
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;
    Eigen::MatrixXd C;
};

/// Produces (A(delta), B(delta), C(delta)) from a realization. The entry
/// layout of delta is one scalar channel per prospective agent block; the
/// map's row-block i may depend only on delta(i) (verified when partitioning).
using UncertaintyMap = std::function<SystemMatrices(const Eigen::VectorXd& delta)>;

/// Uncertain linear system x+ = A(d) x + B(d) u + C(d) w with polytopic
/// state/input constraints, quadratic cost weights, and a pre-stabilizing
/// feedback gain. Immutable after construction; safe to share across threads.
struct UncertainSystem {
    int n = 0, m = 0, p = 0;
    int delta_dim = 0;
    Eigen::MatrixXd A_nom, B_nom, C_nom;
    UncertaintyMap uncertainty_map;
    Polytope state_polytope;  // (G, g)
    Polytope input_polytope;  // (H, h)
    Eigen::MatrixXd Q, R, P, K;
    int horizon = 0;

    SystemMatrices at(const Eigen::VectorXd& delta) const { return uncertainty_map(delta); }

    /// Checks field consistency, Q/R definiteness, nonempty polytope
    /// interiors, and that the map at delta = 0 returns the nominal matrices.
    void validate() const;
};

/// Additive map used by the case study: delta(i) is added to every
/// structurally nonzero entry of row-block i of A and of the i-th diagonal
/// blocks of B and C. Structurally-zero entries stay zero for every delta,
/// so decoupled blocks stay decoupled.
UncertaintyMap additive_uncertainty_map(const Eigen::MatrixXd& A_nom,
                                        const Eigen::MatrixXd& B_nom,
                                        const Eigen::MatrixXd& C_nom,
                                        const std::vector<int>& state_block_sizes);

struct BlockSizes {
    int n = 0, m = 0, p = 0;
};

struct Partition {
    std::vector<BlockSizes> blocks;
    std::vector<std::vector<int>> neighbor_sets;  // N_i, sorted

    int agent_count() const { return static_cast<int>(blocks.size()); }
    int state_offset(int i) const;
    int input_offset(int i) const;
    int disturbance_offset(int i) const;
};

/// One subsystem after partitioning. Matrix-valued maps take the agent's own
/// scalar uncertainty channel.
struct AgentModel {
    int index = 0;
    int n = 0, m = 0, p = 0;
    int horizon = 0;
    std::vector<int> neighbors;  // N_i

    std::function<Eigen::MatrixXd(double)> A_ii;
    std::function<Eigen::MatrixXd(double)> B_i;
    std::function<Eigen::MatrixXd(double)> C_i;
    /// Coupling block A_ij for j in N_i.
    std::function<Eigen::MatrixXd(int j, double)> A_ij;

    Eigen::MatrixXd K, Q, R, P;
    Polytope state_polytope;
    Polytope input_polytope;

    Eigen::MatrixXd closed_loop(double delta) const {
        return A_ii(delta) + B_i(delta) * K;
    }
    bool has_neighbor(int j) const;
};

struct PartitionOptions {
    int probe_count = 8;        // random delta probes for neighbor detection
    double probe_scale = 1.0;   // probes drawn uniformly from [-scale, scale]
    std::uint64_t probe_seed = 0x5eedULL;
    double block_tol = 1e-12;   // absolute tolerance for "this block is zero"
};

/// Splits the system into agents along the given per-agent (n_i, m_i, p_i)
/// blocks. Verifies that B, C, G, H, Q, R, K, P are block-structured (at
/// delta = 0 and at the probe draws) and computes neighbor sets from the
/// off-diagonal blocks of A. Throws DimensionMismatch or
/// NotBlockDecomposable (naming the offending matrix and block).
std::pair<std::vector<AgentModel>, Partition> partition_system(
    const UncertainSystem& system, const std::vector<BlockSizes>& block_sizes,
    const PartitionOptions& options = {});

/// x+ = A_ii(d) x_i + B_i(d) u_i + sum_j A_ij(d) x_j + C_i(d) w_i.
/// neighbor_states must cover every j in N_i (extra entries are ignored).
Eigen::VectorXd step_agent(const AgentModel& agent, const Eigen::VectorXd& x_i,
                           const Eigen::VectorXd& u_i,
                           const std::map<int, Eigen::VectorXd>& neighbor_states,
                           const Eigen::VectorXd& w_i, double delta_i);

Eigen::VectorXd step_global(const UncertainSystem& system, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                            const Eigen::VectorXd& delta);

struct LyapunovCheck {
    bool ok = false;
    double worst_eigenvalue = 0.0;
};

/// Checks E[A_cl(d)' P A_cl(d)] + Q + K'RK - P <= tol * I with the
/// expectation replaced by the mean over delta_samples.
LyapunovCheck check_lyapunov(const UncertainSystem& system, const Eigen::MatrixXd& K,
                             const Eigen::MatrixXd& P,
                             const std::vector<Eigen::VectorXd>& delta_samples,
                             double tol);

}  // namespace dsmpc::model

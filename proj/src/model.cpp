#include "dsmpc/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "dsmpc/errors.hpp"
#include "dsmpc/rng.hpp"

namespace dsmpc::model {

namespace {

bool block_is_zero(const Eigen::MatrixXd& M, int r0, int c0, int rows, int cols, double tol) {
    return M.block(r0, c0, rows, cols).cwiseAbs().maxCoeff() <= tol;
}

void require_block_diagonal(const Eigen::MatrixXd& M, const std::vector<int>& row_blocks,
                            const std::vector<int>& col_blocks, double tol, const char* name) {
    int r0 = 0;
    for (std::size_t i = 0; i < row_blocks.size(); ++i) {
        int c0 = 0;
        for (std::size_t j = 0; j < col_blocks.size(); ++j) {
            if (i != j && row_blocks[i] > 0 && col_blocks[j] > 0 &&
                !block_is_zero(M, r0, c0, row_blocks[i], col_blocks[j], tol)) {
                throw NotBlockDecomposable(std::string(name) + " has a nonzero off-diagonal block (" +
                                           std::to_string(i) + "," + std::to_string(j) + ")");
            }
            c0 += col_blocks[j];
        }
        r0 += row_blocks[i];
    }
}

}  // namespace

void UncertainSystem::validate() const {
    if (A_nom.rows() != n || A_nom.cols() != n) throw DimensionMismatch("A shape");
    if (B_nom.rows() != n || B_nom.cols() != m) throw DimensionMismatch("B shape");
    if (C_nom.rows() != n || C_nom.cols() != p) throw DimensionMismatch("C shape");
    if (Q.rows() != n || Q.cols() != n) throw DimensionMismatch("Q shape");
    if (R.rows() != m || R.cols() != m) throw DimensionMismatch("R shape");
    if (P.rows() != n || P.cols() != n) throw DimensionMismatch("P shape");
    if (K.rows() != m || K.cols() != n) throw DimensionMismatch("K shape");
    if (state_polytope.rows() > 0 && state_polytope.dim() != n) {
        throw DimensionMismatch("state polytope dimension");
    }
    if (input_polytope.rows() > 0 && input_polytope.dim() != m) {
        throw DimensionMismatch("input polytope dimension");
    }
    if (horizon < 1) throw Error("horizon must be positive");
    if (delta_dim < 1) throw Error("delta_dim must be positive");

    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw Error("Q not symmetric");
    if ((R - R.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw Error("R not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> qs(0.5 * (Q + Q.transpose()));
    if (qs.eigenvalues().minCoeff() < -1e-10) throw Error("Q not positive semidefinite");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> rs(0.5 * (R + R.transpose()));
    if (rs.eigenvalues().minCoeff() <= 0.0) throw Error("R not positive definite");

    SystemMatrices nominal = uncertainty_map(Eigen::VectorXd::Zero(delta_dim));
    if ((nominal.A - A_nom).cwiseAbs().maxCoeff() > 1e-12 ||
        (nominal.B - B_nom).cwiseAbs().maxCoeff() > 1e-12 ||
        (nominal.C - C_nom).cwiseAbs().maxCoeff() > 1e-12) {
        throw Error("uncertainty map at delta = 0 does not return the nominal matrices");
    }
}

UncertaintyMap additive_uncertainty_map(const Eigen::MatrixXd& A_nom,
                                        const Eigen::MatrixXd& B_nom,
                                        const Eigen::MatrixXd& C_nom,
                                        const std::vector<int>& state_block_sizes) {
    // Masks of structurally nonzero entries; delta perturbs only these.
    const Eigen::MatrixXd mask_a = (A_nom.array() != 0.0).cast<double>();
    const Eigen::MatrixXd mask_b = (B_nom.array() != 0.0).cast<double>();
    const Eigen::MatrixXd mask_c = (C_nom.array() != 0.0).cast<double>();

    std::vector<int> row_block(static_cast<std::size_t>(A_nom.rows()));
    int r = 0;
    for (std::size_t i = 0; i < state_block_sizes.size(); ++i) {
        for (int k = 0; k < state_block_sizes[i]; ++k) row_block[static_cast<std::size_t>(r++)] = static_cast<int>(i);
    }
    if (r != A_nom.rows()) throw DimensionMismatch("state block sizes do not sum to n");

    return [=](const Eigen::VectorXd& delta) {
        SystemMatrices out{A_nom, B_nom, C_nom};
        for (int row = 0; row < out.A.rows(); ++row) {
            const double d = delta(row_block[static_cast<std::size_t>(row)]);
            out.A.row(row) += d * mask_a.row(row);
            out.B.row(row) += d * mask_b.row(row);
            out.C.row(row) += d * mask_c.row(row);
        }
        return out;
    };
}

int Partition::state_offset(int i) const {
    int off = 0;
    for (int k = 0; k < i; ++k) off += blocks[static_cast<std::size_t>(k)].n;
    return off;
}

int Partition::input_offset(int i) const {
    int off = 0;
    for (int k = 0; k < i; ++k) off += blocks[static_cast<std::size_t>(k)].m;
    return off;
}

int Partition::disturbance_offset(int i) const {
    int off = 0;
    for (int k = 0; k < i; ++k) off += blocks[static_cast<std::size_t>(k)].p;
    return off;
}

bool AgentModel::has_neighbor(int j) const {
    return std::find(neighbors.begin(), neighbors.end(), j) != neighbors.end();
}

std::pair<std::vector<AgentModel>, Partition> partition_system(
    const UncertainSystem& system, const std::vector<BlockSizes>& block_sizes,
    const PartitionOptions& options) {
    system.validate();
    const int N = static_cast<int>(block_sizes.size());
    if (N < 1) throw DimensionMismatch("no blocks given");

    int sum_n = 0, sum_m = 0, sum_p = 0;
    std::vector<int> ns, ms, ps;
    for (const auto& b : block_sizes) {
        if (b.n < 1 || b.m < 0 || b.p < 0) throw DimensionMismatch("invalid block sizes");
        sum_n += b.n;
        sum_m += b.m;
        sum_p += b.p;
        ns.push_back(b.n);
        ms.push_back(b.m);
        ps.push_back(b.p);
    }
    if (sum_n != system.n || sum_m != system.m || sum_p != system.p) {
        throw DimensionMismatch("block sizes do not sum to global dimensions");
    }
    if (system.delta_dim != N) {
        throw DimensionMismatch("delta_dim must equal the number of agent blocks");
    }

    const double tol = options.block_tol;
    require_block_diagonal(system.B_nom, ns, ms, tol, "B");
    require_block_diagonal(system.C_nom, ns, ps, tol, "C");
    require_block_diagonal(system.Q, ns, ns, tol, "Q");
    require_block_diagonal(system.R, ms, ms, tol, "R");
    require_block_diagonal(system.P, ns, ns, tol, "P");
    require_block_diagonal(system.K, ms, ns, tol, "K");

    Partition part;
    part.blocks = block_sizes;

    // Constraint polytopes must split row-wise per agent: every row of G may
    // touch only one agent's state block.
    auto split_polytope = [&](const Polytope& poly, const std::vector<int>& col_blocks,
                              const char* name) {
        std::vector<Polytope> out(static_cast<std::size_t>(N));
        std::vector<std::vector<int>> row_idx(static_cast<std::size_t>(N));
        for (int r = 0; r < poly.rows(); ++r) {
            int owner = -1;
            int c0 = 0;
            for (int i = 0; i < N; ++i) {
                const int w = col_blocks[static_cast<std::size_t>(i)];
                if (w > 0 && poly.A.row(r).segment(c0, w).cwiseAbs().maxCoeff() > tol) {
                    if (owner >= 0) {
                        throw NotBlockDecomposable(std::string(name) + " row " + std::to_string(r) +
                                                   " couples agents " + std::to_string(owner) +
                                                   " and " + std::to_string(i));
                    }
                    owner = i;
                }
                c0 += w;
            }
            if (owner >= 0) row_idx[static_cast<std::size_t>(owner)].push_back(r);
        }
        int c0 = 0;
        for (int i = 0; i < N; ++i) {
            const int w = col_blocks[static_cast<std::size_t>(i)];
            const auto& rows = row_idx[static_cast<std::size_t>(i)];
            out[static_cast<std::size_t>(i)].A.resize(static_cast<int>(rows.size()), w);
            out[static_cast<std::size_t>(i)].b.resize(static_cast<int>(rows.size()));
            for (std::size_t k = 0; k < rows.size(); ++k) {
                out[static_cast<std::size_t>(i)].A.row(static_cast<int>(k)) =
                    poly.A.row(rows[k]).segment(c0, w);
                out[static_cast<std::size_t>(i)].b(static_cast<int>(k)) = poly.b(rows[k]);
            }
            c0 += w;
        }
        return out;
    };
    const auto state_polys = split_polytope(system.state_polytope, ns, "G");
    const auto input_polys = split_polytope(system.input_polytope, ms, "H");

    // Probe deltas for neighbor detection and Assumption-2 verification.
    std::vector<Eigen::VectorXd> probes;
    probes.push_back(Eigen::VectorXd::Zero(N));
    rng::Engine eng = rng::engine(rng::derive(options.probe_seed, rng::Role::Probe, {}));
    std::uniform_real_distribution<double> dist(-options.probe_scale, options.probe_scale);
    for (int k = 0; k < options.probe_count; ++k) {
        Eigen::VectorXd d(N);
        for (int i = 0; i < N; ++i) d(i) = dist(eng);
        probes.push_back(d);
    }

    std::vector<std::vector<int>> neighbor_sets(static_cast<std::size_t>(N));
    for (const auto& d : probes) {
        const SystemMatrices mats = system.at(d);
        require_block_diagonal(mats.B, ns, ms, tol, "B(delta)");
        require_block_diagonal(mats.C, ns, ps, tol, "C(delta)");
        int r0 = 0;
        for (int i = 0; i < N; ++i) {
            int c0 = 0;
            for (int j = 0; j < N; ++j) {
                if (j != i &&
                    !block_is_zero(mats.A, r0, c0, ns[static_cast<std::size_t>(i)],
                                   ns[static_cast<std::size_t>(j)], tol)) {
                    auto& set = neighbor_sets[static_cast<std::size_t>(i)];
                    if (std::find(set.begin(), set.end(), j) == set.end()) set.push_back(j);
                }
                c0 += ns[static_cast<std::size_t>(j)];
            }
            r0 += ns[static_cast<std::size_t>(i)];
        }
    }
    for (auto& set : neighbor_sets) std::sort(set.begin(), set.end());
    part.neighbor_sets = neighbor_sets;

    // Row-block i of A(delta), and diagonal blocks i of B, C, may depend only
    // on delta(i); otherwise the per-agent scalar maps below would be wrong.
    for (const auto& d : probes) {
        int r0 = 0;
        for (int i = 0; i < N; ++i) {
            Eigen::VectorXd masked = Eigen::VectorXd::Zero(N);
            masked(i) = d(i);
            const SystemMatrices full = system.at(d);
            const SystemMatrices own = system.at(masked);
            const int ni = ns[static_cast<std::size_t>(i)];
            if ((full.A.middleRows(r0, ni) - own.A.middleRows(r0, ni)).cwiseAbs().maxCoeff() >
                    tol ||
                (full.B.middleRows(r0, ni) - own.B.middleRows(r0, ni)).cwiseAbs().maxCoeff() >
                    tol ||
                (full.C.middleRows(r0, ni) - own.C.middleRows(r0, ni)).cwiseAbs().maxCoeff() >
                    tol) {
                throw NotBlockDecomposable("row block " + std::to_string(i) +
                                           " depends on another agent's delta channel");
            }
            r0 += ni;
        }
    }

    std::vector<AgentModel> agents;
    agents.reserve(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) {
        AgentModel a;
        a.index = i;
        a.n = ns[static_cast<std::size_t>(i)];
        a.m = ms[static_cast<std::size_t>(i)];
        a.p = ps[static_cast<std::size_t>(i)];
        a.horizon = system.horizon;
        a.neighbors = neighbor_sets[static_cast<std::size_t>(i)];

        const int n_off = part.state_offset(i);
        const int m_off = part.input_offset(i);
        const int p_off = part.disturbance_offset(i);
        const auto map = system.uncertainty_map;
        const int n_i = a.n, m_i = a.m, p_i = a.p;
        const int Nn = N;

        auto eval = [map, Nn, i](double delta_i) {
            Eigen::VectorXd d = Eigen::VectorXd::Zero(Nn);
            d(i) = delta_i;
            return map(d);
        };
        a.A_ii = [eval, n_off, n_i](double d) -> Eigen::MatrixXd {
            return eval(d).A.block(n_off, n_off, n_i, n_i);
        };
        a.B_i = [eval, n_off, m_off, n_i, m_i](double d) -> Eigen::MatrixXd {
            return eval(d).B.block(n_off, m_off, n_i, m_i);
        };
        a.C_i = [eval, n_off, p_off, n_i, p_i](double d) -> Eigen::MatrixXd {
            return eval(d).C.block(n_off, p_off, n_i, p_i);
        };
        Partition part_copy = part;
        a.A_ij = [eval, part_copy, n_off, n_i](int j, double d) -> Eigen::MatrixXd {
            const int c0 = part_copy.state_offset(j);
            const int nj = part_copy.blocks[static_cast<std::size_t>(j)].n;
            return eval(d).A.block(n_off, c0, n_i, nj);
        };

        a.K = system.K.block(m_off, n_off, a.m, a.n);
        a.Q = system.Q.block(n_off, n_off, a.n, a.n);
        a.R = system.R.block(m_off, m_off, a.m, a.m);
        a.P = system.P.block(n_off, n_off, a.n, a.n);
        a.state_polytope = state_polys[static_cast<std::size_t>(i)];
        a.input_polytope = input_polys[static_cast<std::size_t>(i)];
        agents.push_back(std::move(a));
    }
    return {agents, part};
}

Eigen::VectorXd step_agent(const AgentModel& agent, const Eigen::VectorXd& x_i,
                           const Eigen::VectorXd& u_i,
                           const std::map<int, Eigen::VectorXd>& neighbor_states,
                           const Eigen::VectorXd& w_i, double delta_i) {
    if (x_i.size() != agent.n) throw DimensionMismatch("agent state length");
    if (u_i.size() != agent.m) throw DimensionMismatch("agent input length");
    if (w_i.size() != agent.p) throw DimensionMismatch("agent disturbance length");

    Eigen::VectorXd next = agent.A_ii(delta_i) * x_i + agent.B_i(delta_i) * u_i +
                           agent.C_i(delta_i) * w_i;
    for (int j : agent.neighbors) {
        auto it = neighbor_states.find(j);
        if (it == neighbor_states.end()) throw MissingNeighborState(j);
        next += agent.A_ij(j, delta_i) * it->second;
    }
    return next;
}

Eigen::VectorXd step_global(const UncertainSystem& system, const Eigen::VectorXd& x,
                            const Eigen::VectorXd& u, const Eigen::VectorXd& w,
                            const Eigen::VectorXd& delta) {
    if (x.size() != system.n || u.size() != system.m || w.size() != system.p ||
        delta.size() != system.delta_dim) {
        throw DimensionMismatch("global step arguments");
    }
    const SystemMatrices mats = system.at(delta);
    return mats.A * x + mats.B * u + mats.C * w;
}

LyapunovCheck check_lyapunov(const UncertainSystem& system, const Eigen::MatrixXd& K,
                             const Eigen::MatrixXd& P,
                             const std::vector<Eigen::VectorXd>& delta_samples,
                             double tol) {
    if (delta_samples.empty()) throw Error("delta_samples must be nonempty");
    if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw Error("P not symmetric");

    Eigen::MatrixXd mean = Eigen::MatrixXd::Zero(system.n, system.n);
    for (const auto& d : delta_samples) {
        const SystemMatrices mats = system.at(d);
        const Eigen::MatrixXd a_cl = mats.A + mats.B * K;
        mean += a_cl.transpose() * P * a_cl;
    }
    mean /= static_cast<double>(delta_samples.size());

    Eigen::MatrixXd m = mean + system.Q + K.transpose() * system.R * K - P;
    m = 0.5 * (m + m.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);

    LyapunovCheck out;
    out.worst_eigenvalue = es.eigenvalues().maxCoeff();
    out.ok = out.worst_eigenvalue <= tol;
    return out;
}

}  // namespace dsmpc::model

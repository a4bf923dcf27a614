#pragma once

#include <Eigen/Dense>
#include <optional>

namespace dsmpc::qp {

/// Convex QP in standard form:
///   min 0.5 x'Hx + f'x
///   s.t. A_in x <= b_in,  A_eq x = b_eq,  lb <= x <= ub (bounds optional).
struct QuadraticProgram {
    Eigen::MatrixXd H;
    Eigen::VectorXd f;
    Eigen::MatrixXd A_in;
    Eigen::VectorXd b_in;
    Eigen::MatrixXd A_eq;
    Eigen::VectorXd b_eq;
    Eigen::VectorXd lb;  // size 0 or dim()
    Eigen::VectorXd ub;

    int dim() const { return static_cast<int>(f.size()); }

    /// Throws DimensionMismatch / Error on inconsistent shapes or an
    /// asymmetric Hessian (tolerance 1e-10).
    void validate() const;
};

enum class QpStatus { Optimal, Infeasible, MaxIterations };

struct QpSolution {
    QpStatus status = QpStatus::MaxIterations;
    Eigen::VectorXd x;
    double objective = 0.0;
    double primal_residual = 0.0;
    double dual_residual = 0.0;
    int iterations = 0;
    Eigen::VectorXd dual_in;      // multipliers for A_in rows (>= 0 at optimum)
    Eigen::VectorXd dual_eq;      // multipliers for A_eq rows
    Eigen::VectorXd dual_bounds;  // multipliers for the box rows, if any
    double certificate_norm = 0.0;  // infeasibility certificate magnitude
};

struct QpSettings {
    double abs_tol = 1e-6;
    double rel_tol = 1e-6;
    int max_iterations = 20000;
    double over_relaxation = 1.6;
    double sigma = 1e-6;
    double rho0 = 0.1;
    bool adaptive_rho = true;
    double infeasibility_tol = 1e-8;
    int check_interval = 10;
};

/// Operator-splitting solver with a persistent workspace. The constraint
/// matrix and Hessian are fixed at setup; the linear cost and right-hand
/// sides may be updated between solves, which keeps the cached KKT
/// factorization and warm-starts from the previous solution. This is the
/// path the ADMM exchange hits once per iteration.
class Solver {
  public:
    Solver() = default;

    void setup(const QuadraticProgram& problem, const QpSettings& settings = {});
    bool is_setup() const { return setup_done_; }

    void update_linear_cost(const Eigen::VectorXd& f);
    void update_rhs(const std::optional<Eigen::VectorXd>& b_in,
                    const std::optional<Eigen::VectorXd>& b_eq);

    QpSolution solve();

    /// Drops the warm-start state (next solve starts cold).
    void reset_warm_start();

  private:
    void factorize();
    void compute_residuals(double& primal, double& dual, double& primal_rel_den,
                           double& dual_rel_den) const;
    bool polish(QpSolution& sol) const;

    QpSettings settings_;
    double cost_scale_ = 1.0;
    int dim_ = 0;
    int rows_in_ = 0;
    int rows_eq_ = 0;
    int rows_bound_ = 0;
    bool setup_done_ = false;

    Eigen::MatrixXd H_;
    Eigen::VectorXd f_;
    // Stacked constraint rows [A_in; A_eq; I_bounds], row-equilibrated.
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> A_;
    Eigen::VectorXd row_scale_;  // E: A_ = E * A_original
    Eigen::VectorXd lower_;      // scaled bounds on A_ x
    Eigen::VectorXd upper_;
    Eigen::MatrixXd gram_in_;  // A_in' A_in + bounds part (scaled)
    Eigen::MatrixXd gram_eq_;  // A_eq' A_eq (scaled)

    double rho_ = 0.1;
    double rho_eq_factor_ = 1e3;
    Eigen::LDLT<Eigen::MatrixXd> kkt_;

    Eigen::VectorXd x_, z_, y_;  // iterates (z_, y_ live in scaled row space)
    bool warm_ = false;
};

QpSolution solve(const QuadraticProgram& problem, const QpSettings& settings = {});
QpSolution solve(const QuadraticProgram& problem, double abs_tol, double rel_tol,
                 int max_iterations);

}  // namespace dsmpc::qp

#include "dsmpc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dsmpc/errors.hpp"

namespace dsmpc::qp {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double inf_norm(const Eigen::VectorXd& v) {
    return v.size() == 0 ? 0.0 : v.cwiseAbs().maxCoeff();
}

}  // namespace

void QuadraticProgram::validate() const {
    const int d = dim();
    if (H.rows() != d || H.cols() != d) throw DimensionMismatch("Hessian shape");
    if ((H - H.transpose()).cwiseAbs().maxCoeff() > 1e-10) {
        throw Error("Hessian is not symmetric");
    }
    if (A_in.rows() != b_in.size()) throw DimensionMismatch("inequality rows vs rhs");
    if (A_in.rows() > 0 && A_in.cols() != d) throw DimensionMismatch("inequality columns");
    if (A_eq.rows() != b_eq.size()) throw DimensionMismatch("equality rows vs rhs");
    if (A_eq.rows() > 0 && A_eq.cols() != d) throw DimensionMismatch("equality columns");
    if (lb.size() != 0 && lb.size() != d) throw DimensionMismatch("lower bound length");
    if (ub.size() != 0 && ub.size() != d) throw DimensionMismatch("upper bound length");
}

void Solver::setup(const QuadraticProgram& problem, const QpSettings& settings) {
    problem.validate();
    settings_ = settings;
    dim_ = problem.dim();
    rows_in_ = static_cast<int>(problem.A_in.rows());
    rows_eq_ = static_cast<int>(problem.A_eq.rows());
    rows_bound_ = (problem.lb.size() > 0 || problem.ub.size() > 0) ? dim_ : 0;
    const int rows = rows_in_ + rows_eq_ + rows_bound_;

    // Objective scaling balances a small Hessian against unit-normalized
    // constraint rows; iterates run on (c H, c f).
    const double h_norm = problem.H.size() ? problem.H.cwiseAbs().maxCoeff() : 0.0;
    const double f_norm = inf_norm(problem.f);
    cost_scale_ = 1.0 / std::clamp(std::max(h_norm, 0.1 * f_norm), 1e-8, 1e8);
    H_ = cost_scale_ * problem.H;
    f_ = cost_scale_ * problem.f;

    A_.resize(rows, dim_);
    lower_.resize(rows);
    upper_.resize(rows);
    row_scale_.resize(rows);
    if (rows_in_ > 0) A_.topRows(rows_in_) = problem.A_in;
    if (rows_eq_ > 0) A_.middleRows(rows_in_, rows_eq_) = problem.A_eq;
    if (rows_bound_ > 0) A_.bottomRows(rows_bound_).setIdentity();

    for (int r = 0; r < rows; ++r) {
        double norm = A_.row(r).cwiseAbs().maxCoeff();
        row_scale_(r) = norm > 1e-12 ? 1.0 / norm : 1.0;
        A_.row(r) *= row_scale_(r);
    }

    for (int r = 0; r < rows_in_; ++r) {
        lower_(r) = -kInf;
        upper_(r) = problem.b_in(r) * row_scale_(r);
    }
    for (int r = 0; r < rows_eq_; ++r) {
        const int rr = rows_in_ + r;
        lower_(rr) = upper_(rr) = problem.b_eq(r) * row_scale_(rr);
    }
    for (int r = 0; r < rows_bound_; ++r) {
        const int rr = rows_in_ + rows_eq_ + r;
        lower_(rr) = problem.lb.size() ? problem.lb(r) * row_scale_(rr) : -kInf;
        upper_(rr) = problem.ub.size() ? problem.ub(r) * row_scale_(rr) : kInf;
    }

    // Cached Gram blocks: the KKT matrix is H + sigma I + rho gram_in + rho_eq gram_eq.
    gram_in_.setZero(dim_, dim_);
    if (rows_in_ > 0) {
        gram_in_ += A_.topRows(rows_in_).transpose() * A_.topRows(rows_in_);
    }
    if (rows_bound_ > 0) {
        gram_in_ += A_.bottomRows(rows_bound_).transpose() * A_.bottomRows(rows_bound_);
    }
    gram_eq_.setZero(dim_, dim_);
    if (rows_eq_ > 0) {
        gram_eq_ += A_.middleRows(rows_in_, rows_eq_).transpose() *
                    A_.middleRows(rows_in_, rows_eq_);
    }

    rho_ = settings_.rho0;
    factorize();

    x_.setZero(dim_);
    z_.setZero(rows);
    y_.setZero(rows);
    warm_ = false;
    setup_done_ = true;
}

void Solver::factorize() {
    Eigen::MatrixXd kkt = H_;
    kkt.diagonal().array() += settings_.sigma;
    kkt += rho_ * gram_in_ + (rho_ * rho_eq_factor_) * gram_eq_;
    kkt_.compute(kkt);
}

void Solver::update_linear_cost(const Eigen::VectorXd& f) {
    if (f.size() != dim_) throw DimensionMismatch("linear cost length");
    f_ = cost_scale_ * f;
}

void Solver::update_rhs(const std::optional<Eigen::VectorXd>& b_in,
                        const std::optional<Eigen::VectorXd>& b_eq) {
    if (b_in) {
        if (b_in->size() != rows_in_) throw DimensionMismatch("inequality rhs length");
        for (int r = 0; r < rows_in_; ++r) upper_(r) = (*b_in)(r)*row_scale_(r);
    }
    if (b_eq) {
        if (b_eq->size() != rows_eq_) throw DimensionMismatch("equality rhs length");
        for (int r = 0; r < rows_eq_; ++r) {
            const int rr = rows_in_ + r;
            lower_(rr) = upper_(rr) = (*b_eq)(r)*row_scale_(rr);
        }
    }
}

void Solver::reset_warm_start() {
    x_.setZero();
    z_.setZero();
    y_.setZero();
    warm_ = false;
}

void Solver::compute_residuals(double& primal, double& dual, double& primal_rel_den,
                               double& dual_rel_den) const {
    const Eigen::VectorXd ax = A_ * x_;
    // All quantities in the original (unscaled) problem. With A_ = E A and
    // y = E y_scaled / c, the stationarity term A'y equals A_' y_scaled / c.
    primal = inf_norm((ax - z_).cwiseQuotient(row_scale_));
    const Eigen::VectorXd hx = (H_ * x_) / cost_scale_;
    const Eigen::VectorXd f0 = f_ / cost_scale_;
    const Eigen::VectorXd aty = (A_.transpose() * y_) / cost_scale_;
    dual = inf_norm(hx + f0 + aty);
    primal_rel_den = std::max(inf_norm(ax.cwiseQuotient(row_scale_)),
                              inf_norm(z_.cwiseQuotient(row_scale_)));
    dual_rel_den = std::max({inf_norm(hx), inf_norm(f0), inf_norm(aty)});
}

bool Solver::polish(QpSolution& sol) const {
    // Equality-KKT refinement on the active rows detected from the ADMM
    // iterate; accepted only if it stays feasible with valid multipliers.
    const int rows = static_cast<int>(A_.rows());
    std::vector<int> active;
    std::vector<bool> at_upper;
    const double slack_tol =
        100.0 * (settings_.abs_tol + settings_.rel_tol * std::max(1.0, inf_norm(z_)));
    for (int r = 0; r < rows; ++r) {
        const bool is_eq = std::isfinite(lower_(r)) && std::isfinite(upper_(r)) &&
                           lower_(r) == upper_(r);
        if (is_eq || (std::isfinite(upper_(r)) &&
                      (upper_(r) - z_(r) <= slack_tol || y_(r) > 1e-9))) {
            active.push_back(r);
            at_upper.push_back(true);
        } else if (std::isfinite(lower_(r)) &&
                   (z_(r) - lower_(r) <= slack_tol || y_(r) < -1e-9)) {
            active.push_back(r);
            at_upper.push_back(false);
        }
    }
    const int na = static_cast<int>(active.size());
    if (na > 256) return false;  // unusually large active set; keep the iterate

    // KKT system in the original problem space.
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(dim_ + na, dim_ + na);
    kkt.topLeftCorner(dim_, dim_) = H_ / cost_scale_;
    Eigen::VectorXd rhs(dim_ + na);
    rhs.head(dim_) = -f_ / cost_scale_;
    Eigen::MatrixXd rows_orig(na, dim_);
    for (int a = 0; a < na; ++a) {
        const int r = active[static_cast<std::size_t>(a)];
        rows_orig.row(a) = A_.row(r) / row_scale_(r);
        kkt.block(dim_ + a, 0, 1, dim_) = rows_orig.row(a);
        kkt.block(0, dim_ + a, dim_, 1) = rows_orig.row(a).transpose();
        const double bound = at_upper[static_cast<std::size_t>(a)] ? upper_(r) : lower_(r);
        rhs(dim_ + a) = bound / row_scale_(r);
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
    if (!lu.isInvertible()) return false;
    const Eigen::VectorXd solution = lu.solve(rhs);
    const Eigen::VectorXd x = solution.head(dim_);
    const Eigen::VectorXd nu = solution.tail(na);

    // Multiplier signs on active inequalities.
    for (int a = 0; a < na; ++a) {
        const int r = active[static_cast<std::size_t>(a)];
        const bool is_eq = std::isfinite(lower_(r)) && std::isfinite(upper_(r)) &&
                           lower_(r) == upper_(r);
        if (is_eq) continue;
        if (at_upper[static_cast<std::size_t>(a)] ? nu(a) < -1e-8 : nu(a) > 1e-8) return false;
    }

    // Primal feasibility on every row (original units).
    const Eigen::VectorXd ax = A_ * x;
    double worst = 0.0;
    for (int r = 0; r < rows; ++r) {
        const double violation =
            std::max(ax(r) - upper_(r), lower_(r) - ax(r)) / row_scale_(r);
        worst = std::max(worst, violation);
    }
    if (worst > settings_.abs_tol) return false;

    // Stationarity in original units.
    const Eigen::VectorXd stat =
        (H_ * x + f_) / cost_scale_ + rows_orig.transpose() * nu;
    const double dual_res = inf_norm(stat);
    if (dual_res > std::max(sol.dual_residual, 10.0 * settings_.abs_tol)) return false;

    sol.x = x;
    sol.primal_residual = std::max(worst, 0.0);
    sol.dual_residual = dual_res;
    sol.dual_in = Eigen::VectorXd::Zero(rows_in_);
    sol.dual_eq = Eigen::VectorXd::Zero(rows_eq_);
    sol.dual_bounds = Eigen::VectorXd::Zero(rows_bound_);
    for (int a = 0; a < na; ++a) {
        const int r = active[static_cast<std::size_t>(a)];
        if (r < rows_in_) sol.dual_in(r) = nu(a);
        else if (r < rows_in_ + rows_eq_) sol.dual_eq(r - rows_in_) = nu(a);
        else sol.dual_bounds(r - rows_in_ - rows_eq_) = nu(a);
    }
    return true;
}

QpSolution Solver::solve() {
    QpSolution sol;
    const int rows = static_cast<int>(A_.rows());
    const double alpha = settings_.over_relaxation;

    if (rows == 0) {
        Eigen::MatrixXd reg = H_;
        reg.diagonal().array() += settings_.sigma;
        sol.x = Eigen::LDLT<Eigen::MatrixXd>(reg).solve(-f_);
        sol.status = QpStatus::Optimal;
        sol.objective = (0.5 * sol.x.dot(H_ * sol.x) + f_.dot(sol.x)) / cost_scale_;
        sol.iterations = 1;
        x_ = sol.x;
        warm_ = true;
        return sol;
    }

    Eigen::VectorXd rho_vec(rows);
    auto fill_rho = [&]() {
        for (int r = 0; r < rows; ++r) {
            const bool is_eq = std::isfinite(lower_(r)) && std::isfinite(upper_(r)) &&
                               lower_(r) == upper_(r);
            rho_vec(r) = is_eq ? rho_ * rho_eq_factor_ : rho_;
        }
    };
    fill_rho();

    if (!warm_) {
        z_ = (A_ * x_).cwiseMax(lower_).cwiseMin(upper_);
        y_.setZero();
    }

    Eigen::VectorXd y_prev = y_;
    Eigen::VectorXd x_prev = x_;
    int iter = 0;
    for (iter = 1; iter <= settings_.max_iterations; ++iter) {
        y_prev = y_;
        x_prev = x_;

        // x-step: (H + sigma I + A' diag(rho) A) xt = sigma x - f + A'(rho z - y)
        Eigen::VectorXd rhs = settings_.sigma * x_ - f_ +
                              A_.transpose() * (rho_vec.cwiseProduct(z_) - y_);
        const Eigen::VectorXd xt = kkt_.solve(rhs);
        const Eigen::VectorXd zt = A_ * xt;

        x_ = alpha * xt + (1.0 - alpha) * x_;
        const Eigen::VectorXd z_nom = alpha * zt + (1.0 - alpha) * z_;
        const Eigen::VectorXd z_step = z_nom + y_.cwiseQuotient(rho_vec);
        z_ = z_step.cwiseMax(lower_).cwiseMin(upper_);
        y_ += rho_vec.cwiseProduct(z_nom - z_);

        if (iter % settings_.check_interval == 0 || iter == settings_.max_iterations) {
            double rp, rd, rp_den, rd_den;
            compute_residuals(rp, rd, rp_den, rd_den);
            const double eps_p = settings_.abs_tol + settings_.rel_tol * rp_den;
            const double eps_d = settings_.abs_tol + settings_.rel_tol * rd_den;
            if (rp <= eps_p && rd <= eps_d) {
                sol.status = QpStatus::Optimal;
                sol.primal_residual = rp;
                sol.dual_residual = rd;
                break;
            }

            // Primal infeasibility: the dual update direction stabilizes to a
            // separating certificate.
            const Eigen::VectorXd dy = y_ - y_prev;
            const double dy_norm = inf_norm(dy);
            if (dy_norm > 1e-14) {
                const Eigen::VectorXd v = dy / dy_norm;
                const double atv = inf_norm(A_.transpose() * v);
                double support = 0.0;
                bool bounded = true;
                for (int r = 0; r < rows && bounded; ++r) {
                    if (v(r) > settings_.infeasibility_tol) {
                        if (!std::isfinite(upper_(r))) bounded = false;
                        else support += upper_(r) * v(r);
                    } else if (v(r) < -settings_.infeasibility_tol) {
                        if (!std::isfinite(lower_(r))) bounded = false;
                        else support += lower_(r) * v(r);
                    }
                }
                if (bounded && atv <= settings_.infeasibility_tol &&
                    support < -settings_.infeasibility_tol) {
                    sol.status = QpStatus::Infeasible;
                    sol.certificate_norm = dy_norm;
                    sol.primal_residual = rp;
                    sol.dual_residual = rd;
                    break;
                }
            }

            if (settings_.adaptive_rho && rp_den > 0 && rd_den > 0) {
                const double scaled_p = rp / std::max(rp_den, 1e-12);
                const double scaled_d = rd / std::max(rd_den, 1e-12);
                const double ratio = std::sqrt(scaled_p / std::max(scaled_d, 1e-12));
                if (ratio > 5.0 || ratio < 0.2) {
                    rho_ = std::clamp(rho_ * ratio, 1e-6, 1e6);
                    fill_rho();
                    factorize();
                }
            }
        }
    }

    if (sol.status == QpStatus::MaxIterations) {
        double rp, rd, rp_den, rd_den;
        compute_residuals(rp, rd, rp_den, rd_den);
        sol.primal_residual = rp;
        sol.dual_residual = rd;
        sol.iterations = settings_.max_iterations;
    } else {
        sol.iterations = iter;
    }

    sol.x = x_;
    const Eigen::VectorXd y_unscaled = y_.cwiseProduct(row_scale_) / cost_scale_;
    sol.dual_in = y_unscaled.head(rows_in_);
    sol.dual_eq = y_unscaled.segment(rows_in_, rows_eq_);
    sol.dual_bounds = y_unscaled.tail(rows_bound_);
    warm_ = (sol.status == QpStatus::Optimal);

    if (sol.status == QpStatus::Optimal) {
        polish(sol);
    }
    sol.objective = (0.5 * sol.x.dot(H_ * sol.x) + f_.dot(sol.x)) / cost_scale_;
    return sol;
}

QpSolution solve(const QuadraticProgram& problem, const QpSettings& settings) {
    Solver solver;
    solver.setup(problem, settings);
    return solver.solve();
}

QpSolution solve(const QuadraticProgram& problem, double abs_tol, double rel_tol,
                 int max_iterations) {
    QpSettings s;
    s.abs_tol = abs_tol;
    s.rel_tol = rel_tol;
    s.max_iterations = max_iterations;
    return solve(problem, s);
}

}  // namespace dsmpc::qp

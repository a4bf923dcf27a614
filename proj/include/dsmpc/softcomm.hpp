#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

namespace dsmpc::softcomm {

/// Axis-aligned box [c - b, c + b] communicated instead of a scenario set,
/// together with its reliability certificate: a fresh trajectory draw lands
/// inside with probability >= alpha_tilde, with confidence 1 - beta_tilde
/// over the fitting samples.
struct ReliabilityBox {
    Eigen::VectorXd center;
    Eigen::VectorXd half_width;
    int sample_count = 0;
    double beta_tilde = 0.0;
    double alpha_tilde = 0.0;

    int dim() const { return static_cast<int>(center.size()); }
    bool contains(const Eigen::VectorXd& x, double tol = 0.0) const {
        return ((x - center).cwiseAbs().array() <= half_width.array() + tol).all();
    }
};

enum class BoxCentering {
    /// Paper-literal [-b, b]: b_d = max_l |x_d^l|, the exact minimizer of
    /// ||b||_1 over symmetric boxes containing all samples.
    OriginSymmetric,
    /// Per-coordinate midrange center with half-range widths.
    SampleMeanCentered,
};

/// Certificate dimension: the communicated object is a horizon trajectory,
/// so the support dimension defaults to T*n_j; the paper's binomial
/// coefficient uses n_j, kept available as an override.
enum class BoxDimension { FullTrajectory, PaperLiteralState };

struct BoxFit {
    Eigen::VectorXd center;
    Eigen::VectorXd half_width;
};

/// Minimal-volume axis-aligned box containing all samples.
BoxFit fit_box(const std::vector<Eigen::VectorXd>& samples, BoxCentering centering);

/// alpha_tilde for a box fitted to sample_count draws in the given support
/// dimension (delegates to scenario::reliability_level).
double certify_box(int sample_count, int dimension, double beta_tilde);

ReliabilityBox fit_and_certify(const std::vector<Eigen::VectorXd>& samples,
                               BoxCentering centering, double beta_tilde,
                               int certificate_dimension);

/// Support-function tightening of constraint rows against an axis-aligned
/// box: offset_r = sum_d |row_coeffs(r, d)| * half_width(d), the exact
/// worst vertex of the box for each row. The center contribution belongs in
/// the affine term and is not part of the offset.
Eigen::VectorXd tighten_offsets(const Eigen::MatrixXd& row_coeffs,
                                const Eigen::VectorXd& half_width);

/// Wire codec, little-endian: D(u32), S(u32), beta(f64), alpha(f64),
/// center (D f64), half_width (D f64).
std::vector<std::uint8_t> encode_box(const ReliabilityBox& box);
ReliabilityBox decode_box(const std::vector<std::uint8_t>& bytes);

}  // namespace dsmpc::softcomm

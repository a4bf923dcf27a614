#include "dsmpc/softcomm.hpp"

#include <cstring>

#include "dsmpc/errors.hpp"
#include "dsmpc/scenario.hpp"

namespace dsmpc::softcomm {

BoxFit fit_box(const std::vector<Eigen::VectorXd>& samples, BoxCentering centering) {
    if (samples.empty()) throw EmptySampleSet("fit_box needs at least one sample");
    const int d = static_cast<int>(samples.front().size());
    for (const auto& s : samples) {
        if (s.size() != d) throw DimensionMismatch("samples have mixed dimensions");
    }

    BoxFit fit;
    if (centering == BoxCentering::OriginSymmetric) {
        fit.center = Eigen::VectorXd::Zero(d);
        fit.half_width = samples.front().cwiseAbs();
        for (const auto& s : samples) {
            fit.half_width = fit.half_width.cwiseMax(s.cwiseAbs());
        }
    } else {
        Eigen::VectorXd lo = samples.front();
        Eigen::VectorXd hi = samples.front();
        for (const auto& s : samples) {
            lo = lo.cwiseMin(s);
            hi = hi.cwiseMax(s);
        }
        fit.center = 0.5 * (lo + hi);
        fit.half_width = 0.5 * (hi - lo);
    }
    return fit;
}

double certify_box(int sample_count, int dimension, double beta_tilde) {
    return scenario::reliability_level(beta_tilde, sample_count, dimension);
}

ReliabilityBox fit_and_certify(const std::vector<Eigen::VectorXd>& samples,
                               BoxCentering centering, double beta_tilde,
                               int certificate_dimension) {
    const BoxFit fit = fit_box(samples, centering);
    ReliabilityBox box;
    box.center = fit.center;
    box.half_width = fit.half_width;
    box.sample_count = static_cast<int>(samples.size());
    box.beta_tilde = beta_tilde;
    box.alpha_tilde = certify_box(box.sample_count, certificate_dimension, beta_tilde);
    return box;
}

Eigen::VectorXd tighten_offsets(const Eigen::MatrixXd& row_coeffs,
                                const Eigen::VectorXd& half_width) {
    if (row_coeffs.cols() != half_width.size()) {
        throw DimensionMismatch("row coefficients vs box dimension");
    }
    return row_coeffs.cwiseAbs() * half_width;
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
    // Little-endian store (the build targets are little-endian; memcpy keeps
    // this alias-safe).
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    out.insert(out.end(), buf, buf + sizeof(T));
}

template <typename T>
T get(const std::vector<std::uint8_t>& in, std::size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw Error("box payload truncated");
    T value;
    std::memcpy(&value, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return value;
}

}  // namespace

std::vector<std::uint8_t> encode_box(const ReliabilityBox& box) {
    std::vector<std::uint8_t> out;
    const auto d = static_cast<std::uint32_t>(box.dim());
    out.reserve(24 + 16 * d);
    put<std::uint32_t>(out, d);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(box.sample_count));
    put<double>(out, box.beta_tilde);
    put<double>(out, box.alpha_tilde);
    for (int i = 0; i < box.dim(); ++i) put<double>(out, box.center(i));
    for (int i = 0; i < box.dim(); ++i) put<double>(out, box.half_width(i));
    return out;
}

ReliabilityBox decode_box(const std::vector<std::uint8_t>& bytes) {
    std::size_t pos = 0;
    ReliabilityBox box;
    const auto d = get<std::uint32_t>(bytes, pos);
    box.sample_count = static_cast<int>(get<std::uint32_t>(bytes, pos));
    box.beta_tilde = get<double>(bytes, pos);
    box.alpha_tilde = get<double>(bytes, pos);
    box.center.resize(d);
    box.half_width.resize(d);
    for (std::uint32_t i = 0; i < d; ++i) box.center(i) = get<double>(bytes, pos);
    for (std::uint32_t i = 0; i < d; ++i) box.half_width(i) = get<double>(bytes, pos);
    if (pos != bytes.size()) throw Error("box payload has trailing bytes");
    return box;
}

}  // namespace dsmpc::softcomm

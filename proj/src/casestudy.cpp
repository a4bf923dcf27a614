#include "dsmpc/casestudy.hpp"

namespace dsmpc::casestudy {

namespace {

Eigen::MatrixXd scalar(double v) {
    Eigen::MatrixXd m(1, 1);
    m(0, 0) = v;
    return m;
}

mpc::AgentBlock room(double a_ii, double lower, double upper, double x0,
                     const ThreeRoomOptions& options) {
    mpc::AgentBlock blk;
    blk.A_ii = scalar(a_ii);
    blk.B = scalar(options.input_gain);
    blk.C = scalar(0.02);
    blk.state_polytope.A.resize(2, 1);
    blk.state_polytope.A << 1.0, -1.0;
    blk.state_polytope.b.resize(2);
    blk.state_polytope.b << upper, -lower;
    blk.input_polytope.A.resize(2, 1);
    blk.input_polytope.A << 1.0, -1.0;
    blk.input_polytope.b.resize(2);
    blk.input_polytope.b << 1.5, 1.5;
    blk.K = scalar(0.0);
    // Minimum-effort objective: the comfort band does the shaping, inputs are
    // penalized, a small terminal weight keeps the Lyapunov condition strict.
    blk.Q = scalar(0.0);
    blk.R = scalar(1.0);
    blk.P = scalar(0.01);
    blk.x0 = Eigen::VectorXd::Constant(1, x0);

    blk.process.w_band_fraction = options.w_band_fraction;
    blk.process.delta_mean = 0.0;
    blk.process.delta_stddev = options.delta_stddev;
    blk.process.delta_cap = options.delta_cap;
    return blk;
}

/// Nominal heat-influx profile: the autonomous plant (u = 0) settles
/// `equilibrium_drift` below the band centers, so the controller has to hold
/// the rooms in-band actively. C w* = (I - A)(x_center - drift).
void set_equilibrium_profile(mpc::Network& net, int horizon, double drift) {
    const int N = net.agent_count();
    for (int i = 0; i < N; ++i) {
        auto& blk = net.blocks[static_cast<std::size_t>(i)];
        const double center = 0.5 * (blk.state_polytope.b(0) - blk.state_polytope.b(1));
        double coupled = blk.A_ii(0, 0) * (center - drift);
        for (const auto& [j, mat] : blk.couplings) {
            const auto& other = net.blocks[static_cast<std::size_t>(j)];
            const double center_j =
                0.5 * (other.state_polytope.b(0) - other.state_polytope.b(1));
            coupled += mat(0, 0) * (center_j - drift);
        }
        const double w_star = ((center - drift) - coupled) / blk.C(0, 0);
        blk.process.w_nominal = Eigen::MatrixXd::Constant(horizon, 1, w_star);
    }
}

}  // namespace

mpc::Network three_room(const ThreeRoomOptions& options) {
    mpc::Network net;
    net.horizon = options.horizon;
    net.epsilon = options.epsilon;
    net.beta = options.beta;

    net.blocks.push_back(room(0.2, 20.5, 21.5, 21.0, options));
    net.blocks.push_back(room(0.1, 18.5, 19.5, 19.0, options));
    net.blocks.push_back(room(0.4, 22.5, 23.5, 23.0, options));

    // Coupling pattern of the A matrix:
    //   [0.2 0.3 0  ]
    //   [0.2 0.1 0.1]
    //   [0.2 0   0.4]
    net.blocks[0].couplings[1] = scalar(0.3);
    net.blocks[1].couplings[0] = scalar(0.2);
    net.blocks[1].couplings[2] = scalar(0.1);
    net.blocks[2].couplings[0] = scalar(0.2);

    set_equilibrium_profile(net, options.horizon, options.equilibrium_drift);
    return net;
}

FourthRoom fourth_room(const ThreeRoomOptions& options) {
    FourthRoom out;
    out.block = room(0.3, 19.5, 20.5, 20.0, options);
    // Room 4 feels room 3; the existing rooms are unaffected (directed
    // coupling; neighbor symmetry is not assumed anywhere).
    out.couplings_to_new[2] = scalar(0.2);

    // Matching equilibrium: x4 - d = 0.3 (x4 - d) + 0.2 (x3 - d) + 0.02 w4.
    const double d = options.equilibrium_drift;
    const double w_star = ((20.0 - d) - 0.3 * (20.0 - d) - 0.2 * (23.0 - d)) / 0.02;
    out.block.process.w_nominal = Eigen::MatrixXd::Constant(options.horizon, 1, w_star);
    return out;
}

}  // namespace dsmpc::casestudy

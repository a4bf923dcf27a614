#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace dsmpc::rng {

/// Labels for the independent substreams. Keeping the controller's scenario
/// draws, the cost-averaging draws, the box-fitting draws, and the true-plant
/// realizations on disjoint streams is what makes the a-posteriori validation
/// out-of-sample.
enum class Role : std::uint64_t {
    Constraint = 1,
    CostAveraging = 2,
    BoxFit = 3,
    Plant = 4,
    Validation = 5,
    Probe = 6,
};

/// Derives a stream key from a seed and a list of labels (agent index, MPC
/// step, scenario index, ...). splitmix64 mixing; collisions across distinct
/// label tuples are not a practical concern at these scales.
std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> labels);

inline std::uint64_t derive(std::uint64_t seed, Role role,
                            std::initializer_list<std::uint64_t> labels) {
    std::uint64_t key = derive(seed, {static_cast<std::uint64_t>(role)});
    return derive(key, labels);
}

/// One generator per substream; never shared across streams.
using Engine = std::mt19937_64;

inline Engine engine(std::uint64_t stream_key) { return Engine(stream_key); }

}  // namespace dsmpc::rng

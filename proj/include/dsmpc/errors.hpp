#pragma once

#include <stdexcept>
#include <string>

namespace dsmpc {

/// Base class for all toolkit errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionMismatch : Error {
    using Error::Error;
};

/// A matrix that must be block-diagonal w.r.t. the partition is not.
struct NotBlockDecomposable : Error {
    using Error::Error;
};

struct MissingNeighborState : Error {
    explicit MissingNeighborState(int neighbor)
        : Error("missing state for neighbor " + std::to_string(neighbor)),
          neighbor_index(neighbor) {}
    int neighbor_index;
};

struct InvalidBudget : Error {
    using Error::Error;
};

struct WeightsDontSum : Error {
    using Error::Error;
};

struct InsufficientSamples : Error {
    using Error::Error;
};

struct EmptySampleSet : Error {
    using Error::Error;
};

/// Box tightening removed all feasible states from a constraint row.
struct EmptyTightenedSet : Error {
    using Error::Error;
};

struct SubproblemInfeasible : Error {
    explicit SubproblemInfeasible(int agent, const std::string& what)
        : Error("agent " + std::to_string(agent) + ": " + what), agent_index(agent) {}
    int agent_index;
};

struct UnknownAgent : Error {
    using Error::Error;
};

struct DisconnectedCouplingSpec : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace dsmpc

#pragma once

#include <cstdint>
#include <functional>

namespace dsmpc::parallel {

/// Execution backend for the data-parallel kernels. Serial is the reference
/// path; OpenMp runs the same loop bodies across threads. Every parallel loop
/// in the toolkit writes disjoint outputs (or reduces in a fixed order), so
/// both backends produce bit-identical results.
enum class Backend { Serial, OpenMp };

Backend backend();
void set_backend(Backend b);

/// Number of worker threads the OpenMp backend will use.
int max_threads();
void set_max_threads(int n);

/// Runs fn(i) for i in [0, n). Chunking is static so the iteration->thread
/// mapping is reproducible.
void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn);

/// RAII guard to switch backend within a scope (used by tests and benchmarks).
struct BackendGuard {
    explicit BackendGuard(Backend b) : saved_(backend()) { set_backend(b); }
    ~BackendGuard() { set_backend(saved_); }
    BackendGuard(const BackendGuard&) = delete;
    BackendGuard& operator=(const BackendGuard&) = delete;

  private:
    Backend saved_;
};

}  // namespace dsmpc::parallel

#include "dsmpc/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dsmpc::parallel {

namespace {

std::atomic<Backend> g_backend{Backend::OpenMp};
std::atomic<int> g_max_threads{0};  // 0 = library default

int default_threads() {
#ifdef _OPENMP
    if (const char* env = std::getenv("DSMPC_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace

Backend backend() { return g_backend.load(); }

void set_backend(Backend b) { g_backend.store(b); }

int max_threads() {
    int n = g_max_threads.load();
    return n > 0 ? n : default_threads();
}

void set_max_threads(int n) { g_max_threads.store(n); }

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
#ifdef _OPENMP
    if (backend() == Backend::OpenMp && n > 1) {
        const int threads = std::min<std::int64_t>(max_threads(), n);
#pragma omp parallel for schedule(static) num_threads(threads)
        for (std::int64_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
#endif
    for (std::int64_t i = 0; i < n; ++i) {
        fn(i);
    }
}

}  // namespace dsmpc::parallel

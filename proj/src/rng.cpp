#include "dsmpc/rng.hpp"

namespace dsmpc::rng {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> labels) {
    std::uint64_t key = splitmix64(seed);
    for (std::uint64_t label : labels) {
        key = splitmix64(key ^ splitmix64(label + 0x632be59bd9b4e019ULL));
    }
    return key;
}

}  // namespace dsmpc::rng

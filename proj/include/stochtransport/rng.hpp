#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace stochtransport {

/// splitmix64 finaliser; used only to derive independent seeds.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed of the sub-stream addressed by (master, i0, i1, ...). Every path
/// through the tuple gives a distinct, schedule-independent generator.
inline std::uint64_t derive_seed(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    std::uint64_t s = mix64(master);
    for (auto p : path) s = mix64(s ^ mix64(p + 0x632be59bd9b4e019ULL));
    return s;
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
    return Engine(derive_seed(master, path));
}

}  // namespace stochtransport

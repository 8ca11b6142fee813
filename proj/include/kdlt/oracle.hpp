#pragma once

// Randomized self-checks of the sequence-level revision against brute force.
// Brute force here walks every raw path by recursion and shares no code with
// the enumerator or the beam.

#include <cstdint>
#include <string>

namespace kdlt::seq {

struct OracleResult {
    std::string name;
    int trials = 0;
    int failures = 0;
    double max_deviation = 0.0;

    bool passed() const { return failures == 0; }
};

// Exhaustive K with any alpha reproduces the input rows (T <= 4, |A| <= 4); tolerance 1e-9.
OracleResult check_exhaustive_identity(int trials, std::uint64_t seed);

// Beam top-K equals brute-force top-K (T <= 5, |A| <= 6, K <= 8). Paths whose
// likelihood ties the K-th one may be exchanged.
OracleResult check_beam_topk(int trials, std::uint64_t seed);

// Fallback fires exactly when the best path likelihood is below r, and then
// returns the word-level rows unchanged.
OracleResult check_threshold_fallback(int trials, std::uint64_t seed);

}  // namespace kdlt::seq

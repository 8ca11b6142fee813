#pragma once

// Sequence-level revision of a teacher's per-step distributions.
//
// A decoding path picks one symbol per step; its likelihood is the product of
// the chosen per-step probabilities. The sequence-level distribution at (t, k)
// is the likelihood mass of the retained paths passing through symbol k at
// step t, divided by the mass of all retained paths. It is mixed with the
// per-step (word-level) distribution by a weight alpha.

#include <cstddef>
#include <span>
#include <vector>

#include "kdlt/errors.hpp"
#include "kdlt/ndgrad.hpp"

namespace kdlt::seq {

// Row-major [steps x alphabet] probability rows, held in double.
class StepDistributions {
public:
    StepDistributions() = default;
    // Validates rows: entries >= 0 and each row sums to 1 within 1e-6.
    StepDistributions(int steps, int alphabet, std::vector<double> probs);

    // Softmax of rows[t] / temperature for the first `steps` rows of a [T x A] logit block.
    static StepDistributions from_logits(std::span<const float> logits, int steps, int alphabet,
                                         double temperature = 1.0);

    int steps() const { return steps_; }
    int alphabet() const { return alphabet_; }
    double at(int t, int k) const { return probs_[static_cast<std::size_t>(t) * alphabet_ + k]; }
    std::span<const double> row(int t) const {
        return std::span<const double>(probs_).subspan(static_cast<std::size_t>(t) * alphabet_, alphabet_);
    }
    const std::vector<double>& values() const { return probs_; }

    nd::Tensor to_tensor() const;

private:
    int steps_ = 0;
    int alphabet_ = 0;
    std::vector<double> probs_;
};

struct Path {
    std::vector<int> symbols;
    double likelihood = 0.0;
};

// Paths sorted by likelihood descending, ties by lexicographic symbol order.
struct PathSet {
    std::vector<Path> paths;
    double total_mass = 0.0;

    double max_likelihood() const { return paths.empty() ? 0.0 : paths.front().likelihood; }
};

// Ordering used everywhere: higher likelihood first, then lexicographically smaller.
bool path_precedes(const Path& a, const Path& b);

inline constexpr std::size_t kMaxEnumeratedPaths = 1'000'000;

// Number of raw paths alphabet^steps, saturating at SIZE_MAX.
std::size_t path_count(int steps, int alphabet);

// Every path with nonzero likelihood (zero-likelihood paths are omitted).
// Throws CapacityError when alphabet^steps exceeds kMaxEnumeratedPaths.
PathSet enumerate_paths_exact(const StepDistributions& p);

// The k highest-ranked paths, found with a beam of width k. Exact for
// per-step factorized likelihoods. Returns every path when k >= alphabet^steps.
PathSet beam_search_topk(const StepDistributions& p, int k);

// Per-step vote of a path set: mass through (t, k) over total mass.
StepDistributions sequence_vote(const PathSet& paths, int steps, int alphabet);

struct SeqSoftLabel {
    StepDistributions revised;
    double alpha = 0.5;
    int k_beam = 6;
    double threshold = 0.1;
    bool used_fallback = false;
    double max_path_likelihood = 0.0;
};

// Paths are ranked on `path_probs`; the word-level term comes from
// `word_probs` (the same rows at another temperature, or identical).
// Falls back to `word_probs` unchanged when the best path is below `threshold`
// or the retained mass is zero.
SeqSoftLabel revise_distribution(const StepDistributions& path_probs, const StepDistributions& word_probs,
                                 double alpha, int k, double threshold);

inline SeqSoftLabel revise_distribution(const StepDistributions& p, double alpha, int k, double threshold) {
    return revise_distribution(p, p, alpha, k, threshold);
}

}  // namespace kdlt::seq

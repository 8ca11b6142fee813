#include "kdlt/seqlabel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace kdlt::seq {

StepDistributions::StepDistributions(int steps, int alphabet, std::vector<double> probs)
    : steps_(steps), alphabet_(alphabet), probs_(std::move(probs)) {
    if (steps <= 0 || alphabet <= 0) throw ContractError("step distributions need positive extents");
    if (probs_.size() != static_cast<std::size_t>(steps) * alphabet) {
        throw DimensionError("step distributions: expected " + std::to_string(steps * alphabet) + " values");
    }
    for (int t = 0; t < steps; ++t) {
        double total = 0.0;
        for (double v : row(t)) {
            if (!(v >= 0.0)) throw ContractError("step distributions: negative or NaN probability");
            total += v;
        }
        if (std::abs(total - 1.0) > 1e-6) {
            throw ContractError("step distributions: row " + std::to_string(t) + " sums to " +
                                std::to_string(total));
        }
    }
}

StepDistributions StepDistributions::from_logits(std::span<const float> logits, int steps, int alphabet,
                                                 double temperature) {
    if (temperature <= 0.0) throw ContractError("temperature must be positive");
    if (logits.size() < static_cast<std::size_t>(steps) * alphabet) {
        throw DimensionError("from_logits: not enough logits for requested steps");
    }
    std::vector<double> probs(static_cast<std::size_t>(steps) * alphabet);
    for (int t = 0; t < steps; ++t) {
        const float* row = logits.data() + static_cast<std::size_t>(t) * alphabet;
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < alphabet; ++k) mx = std::max(mx, row[k] / temperature);
        double z = 0.0;
        for (int k = 0; k < alphabet; ++k) {
            const double e = std::exp(row[k] / temperature - mx);
            probs[static_cast<std::size_t>(t) * alphabet + k] = e;
            z += e;
        }
        for (int k = 0; k < alphabet; ++k) probs[static_cast<std::size_t>(t) * alphabet + k] /= z;
    }
    return StepDistributions(steps, alphabet, std::move(probs));
}

nd::Tensor StepDistributions::to_tensor() const {
    std::vector<float> v(probs_.begin(), probs_.end());
    return nd::Tensor({steps_, alphabet_}, std::move(v));
}

bool path_precedes(const Path& a, const Path& b) {
    if (a.likelihood != b.likelihood) return a.likelihood > b.likelihood;
    return a.symbols < b.symbols;
}

std::size_t path_count(int steps, int alphabet) {
    std::size_t count = 1;
    for (int t = 0; t < steps; ++t) {
        if (count > std::numeric_limits<std::size_t>::max() / static_cast<std::size_t>(alphabet)) {
            return std::numeric_limits<std::size_t>::max();
        }
        count *= static_cast<std::size_t>(alphabet);
    }
    return count;
}

namespace {

double total_of(const std::vector<Path>& paths) {
    double total = 0.0;
    for (const Path& p : paths) total += p.likelihood;
    return total;
}

}  // namespace

PathSet enumerate_paths_exact(const StepDistributions& p) {
    const int T = p.steps(), A = p.alphabet();
    const std::size_t count = path_count(T, A);
    if (count > kMaxEnumeratedPaths) {
        throw CapacityError("enumerate_paths_exact: " + std::to_string(A) + "^" + std::to_string(T) +
                            " paths exceed the guard of " + std::to_string(kMaxEnumeratedPaths));
    }
    PathSet out;
    std::vector<int> symbols(static_cast<std::size_t>(T), 0);
    for (std::size_t n = 0; n < count; ++n) {
        double likelihood = 1.0;
        for (int t = 0; t < T; ++t) likelihood *= p.at(t, symbols[t]);
        if (likelihood > 0.0) out.paths.push_back(Path{symbols, likelihood});
        // odometer, last step fastest
        for (int t = T - 1; t >= 0; --t) {
            if (++symbols[t] < A) break;
            symbols[t] = 0;
        }
    }
    std::sort(out.paths.begin(), out.paths.end(), path_precedes);
    out.total_mass = total_of(out.paths);
    return out;
}

PathSet beam_search_topk(const StepDistributions& p, int k) {
    if (k < 1) throw ContractError("beam_search_topk: K must be at least 1");
    const int T = p.steps(), A = p.alphabet();
    std::vector<Path> beam{Path{{}, 1.0}};
    std::vector<Path> candidates;
    for (int t = 0; t < T; ++t) {
        candidates.clear();
        candidates.reserve(beam.size() * static_cast<std::size_t>(A));
        for (const Path& prefix : beam) {
            for (int s = 0; s < A; ++s) {
                Path next{prefix.symbols, prefix.likelihood * p.at(t, s)};
                next.symbols.push_back(s);
                candidates.push_back(std::move(next));
            }
        }
        const std::size_t keep = std::min(candidates.size(), static_cast<std::size_t>(k));
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                          candidates.end(), path_precedes);
        candidates.resize(keep);
        beam.swap(candidates);
    }
    PathSet out;
    out.paths = std::move(beam);
    out.total_mass = total_of(out.paths);
    return out;
}

StepDistributions sequence_vote(const PathSet& paths, int steps, int alphabet) {
    if (paths.total_mass <= 0.0) throw ContractError("sequence_vote: path set carries no mass");
    std::vector<double> votes(static_cast<std::size_t>(steps) * alphabet, 0.0);
    for (const Path& path : paths.paths) {
        if (path.symbols.size() != static_cast<std::size_t>(steps)) {
            throw DimensionError("sequence_vote: path length differs from step count");
        }
        for (int t = 0; t < steps; ++t) votes[static_cast<std::size_t>(t) * alphabet + path.symbols[t]] += path.likelihood;
    }
    for (double& v : votes) v /= paths.total_mass;
    return StepDistributions(steps, alphabet, std::move(votes));
}

SeqSoftLabel revise_distribution(const StepDistributions& path_probs, const StepDistributions& word_probs,
                                 double alpha, int k, double threshold) {
    if (alpha < 0.0 || alpha > 1.0) throw ContractError("alpha must lie in [0, 1]");
    if (threshold < 0.0 || threshold > 1.0) throw ContractError("threshold must lie in [0, 1]");
    if (k < 1) throw ContractError("beam K must be at least 1");
    if (path_probs.steps() != word_probs.steps() || path_probs.alphabet() != word_probs.alphabet()) {
        throw DimensionError("revise_distribution: path and word distributions differ in shape");
    }

    SeqSoftLabel label;
    label.alpha = alpha;
    label.k_beam = k;
    label.threshold = threshold;

    const PathSet top = beam_search_topk(path_probs, k);
    label.max_path_likelihood = top.max_likelihood();
    if (top.total_mass <= 0.0 || label.max_path_likelihood < threshold) {
        label.used_fallback = true;
        label.revised = word_probs;
        return label;
    }

    const int T = word_probs.steps(), A = word_probs.alphabet();
    const StepDistributions vote = sequence_vote(top, T, A);
    std::vector<double> mixed(static_cast<std::size_t>(T) * A);
    for (int t = 0; t < T; ++t) {
        double total = 0.0;
        for (int s = 0; s < A; ++s) {
            const double v = (1.0 - alpha) * word_probs.at(t, s) + alpha * vote.at(t, s);
            mixed[static_cast<std::size_t>(t) * A + s] = v;
            total += v;
        }
        for (int s = 0; s < A; ++s) mixed[static_cast<std::size_t>(t) * A + s] /= total;
    }
    label.revised = StepDistributions(T, A, std::move(mixed));
    return label;
}

}  // namespace kdlt::seq

#include "kdlt/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "kdlt/rng.hpp"
#include "kdlt/seqlabel.hpp"

namespace kdlt::seq {

namespace {

// Smooth rows most of the time; every fourth instance uses coarse integer
// weights so that exact ties and zero entries show up.
StepDistributions random_rows(SplitMix64& rng, int steps, int alphabet) {
    const bool coarse = rng.below(4) == 0;
    const double sharpness = 1.0 + 4.0 * rng.uniform();
    std::vector<double> v(static_cast<std::size_t>(steps) * alphabet);
    for (int t = 0; t < steps; ++t) {
        double total = 0.0;
        for (int k = 0; k < alphabet; ++k) {
            double& x = v[t * alphabet + k];
            x = coarse ? static_cast<double>(rng.below(4)) : std::pow(rng.uniform(0.01, 1.0), sharpness);
            total += x;
        }
        if (total == 0.0) {
            v[t * alphabet + static_cast<int>(rng.below(alphabet))] = 1.0;
            total = 1.0;
        }
        for (int k = 0; k < alphabet; ++k) v[t * alphabet + k] /= total;
    }
    return StepDistributions(steps, alphabet, std::move(v));
}

std::vector<Path> all_paths(const StepDistributions& p) {
    std::vector<Path> out;
    std::vector<int> symbols;
    std::function<void(double)> walk = [&](double acc) {
        const int t = static_cast<int>(symbols.size());
        if (t == p.steps()) {
            out.push_back({symbols, acc});
            return;
        }
        for (int k = 0; k < p.alphabet(); ++k) {
            symbols.push_back(k);
            walk(acc * p.at(t, k));
            symbols.pop_back();
        }
    };
    walk(1.0);
    return out;
}

double product_of(const StepDistributions& p, const std::vector<int>& symbols) {
    double acc = 1.0;
    for (int t = 0; t < p.steps(); ++t) acc *= p.at(t, symbols[t]);
    return acc;
}

bool near(double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(1.0, std::abs(a)); }

}  // namespace

OracleResult check_exhaustive_identity(int trials, std::uint64_t seed) {
    OracleResult r{"exhaustive identity", trials, 0, 0.0};
    for (int i = 0; i < trials; ++i) {
        SplitMix64 rng(derive_seed(seed, i));
        const int steps = 1 + static_cast<int>(rng.below(4));
        const int alphabet = 1 + static_cast<int>(rng.below(4));
        const StepDistributions p = random_rows(rng, steps, alphabet);
        const double alpha = rng.uniform();
        const int k = static_cast<int>(path_count(steps, alphabet));
        const SeqSoftLabel label = revise_distribution(p, alpha, k, 0.0);
        double worst = 0.0;
        for (std::size_t j = 0; j < p.values().size(); ++j)
            worst = std::max(worst, std::abs(label.revised.values()[j] - p.values()[j]));
        r.max_deviation = std::max(r.max_deviation, worst);
        r.failures += worst > 1e-9;
    }
    return r;
}

OracleResult check_beam_topk(int trials, std::uint64_t seed) {
    OracleResult r{"beam vs brute-force top-K", trials, 0, 0.0};
    for (int i = 0; i < trials; ++i) {
        SplitMix64 rng(derive_seed(seed, i));
        const int steps = 1 + static_cast<int>(rng.below(5));
        const int alphabet = 1 + static_cast<int>(rng.below(6));
        const int k = 1 + static_cast<int>(rng.below(8));
        const StepDistributions p = random_rows(rng, steps, alphabet);

        std::vector<Path> brute = all_paths(p);
        std::stable_sort(brute.begin(), brute.end(),
                         [](const Path& a, const Path& b) { return a.likelihood > b.likelihood; });
        const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), brute.size());
        const PathSet beam = beam_search_topk(p, k);

        bool ok = beam.paths.size() == keep;
        for (std::size_t j = 0; ok && j < keep; ++j) {
            const Path& got = beam.paths[j];
            const double dev = std::abs(got.likelihood - brute[j].likelihood);
            r.max_deviation = std::max(r.max_deviation, dev);
            ok = near(got.likelihood, brute[j].likelihood) && near(got.likelihood, product_of(p, got.symbols));
            // A differing path is fine only when it ties with the brute-force entry.
            if (ok && got.symbols != brute[j].symbols) {
                ok = std::any_of(brute.begin(), brute.end(), [&](const Path& b) {
                    return b.symbols == got.symbols && near(b.likelihood, brute[j].likelihood);
                });
            }
        }
        for (std::size_t a = 0; ok && a < keep; ++a)
            for (std::size_t b = a + 1; ok && b < keep; ++b) ok = beam.paths[a].symbols != beam.paths[b].symbols;
        r.failures += !ok;
    }
    return r;
}

OracleResult check_threshold_fallback(int trials, std::uint64_t seed) {
    OracleResult r{"threshold fallback", trials, 0, 0.0};
    for (int i = 0; i < trials; ++i) {
        SplitMix64 rng(derive_seed(seed, i));
        const int steps = 1 + static_cast<int>(rng.below(4));
        const int alphabet = 2 + static_cast<int>(rng.below(5));
        const StepDistributions p = random_rows(rng, steps, alphabet);
        double best = 1.0;
        for (int t = 0; t < steps; ++t) {
            const auto row = p.row(t);
            best *= *std::max_element(row.begin(), row.end());
        }
        // Thresholds straddle the best path, including exact equality.
        const double choices[] = {best * 0.5, best, std::min(1.0, std::nextafter(best, 2.0)), rng.uniform()};
        const double threshold = choices[rng.below(4)];
        const SeqSoftLabel label = revise_distribution(p, rng.uniform(), 1 + static_cast<int>(rng.below(8)), threshold);
        bool ok = label.used_fallback == (best < threshold);
        if (label.used_fallback) ok = ok && label.revised.values() == p.values();
        r.max_deviation = std::max(r.max_deviation, std::abs(label.max_path_likelihood - best));
        r.failures += !ok;
    }
    return r;
}

}  // namespace kdlt::seq

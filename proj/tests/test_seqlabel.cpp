#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "kdlt/rng.hpp"
#include "kdlt/seqlabel.hpp"

using namespace kdlt;
using namespace kdlt::seq;

namespace {

StepDistributions rows(std::vector<std::vector<double>> r) {
    std::vector<double> flat;
    for (auto& row : r) flat.insert(flat.end(), row.begin(), row.end());
    return StepDistributions(static_cast<int>(r.size()), static_cast<int>(r.front().size()), flat);
}

// Positive random rows; `sharpness` > 1 concentrates mass.
StepDistributions random_rows(SplitMix64& rng, int T, int A, double sharpness = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(T) * A);
    for (int t = 0; t < T; ++t) {
        double total = 0.0;
        for (int k = 0; k < A; ++k) {
            const double x = std::pow(rng.uniform(0.01, 1.0), sharpness);
            v[t * A + k] = x;
            total += x;
        }
        for (int k = 0; k < A; ++k) v[t * A + k] /= total;
    }
    return StepDistributions(T, A, v);
}

// Independent oracle: marginal mass through (t, k) over all raw paths, by nested recursion.
double brute_marginal(const StepDistributions& p, int t_fix, int k_fix) {
    double total = 0.0;
    std::function<void(int, double)> walk = [&](int t, double acc) {
        if (t == p.steps()) {
            total += acc;
            return;
        }
        for (int k = 0; k < p.alphabet(); ++k) {
            if (t == t_fix && k != k_fix) continue;
            walk(t + 1, acc * p.at(t, k));
        }
    };
    walk(0, 1.0);
    return total;
}

}  // namespace

TEST_CASE("enumerate_paths_exact examples") {
    const auto p = rows({{0.6, 0.4}, {0.7, 0.3}});
    const PathSet all = enumerate_paths_exact(p);
    REQUIRE(all.paths.size() == 4);
    CHECK(all.total_mass == doctest::Approx(1.0).epsilon(1e-12));
    const std::vector<std::pair<std::vector<int>, double>> expected{
        {{0, 0}, 0.42}, {{1, 0}, 0.28}, {{0, 1}, 0.18}, {{1, 1}, 0.12}};
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(all.paths[i].symbols == expected[i].first);
        CHECK(all.paths[i].likelihood == doctest::Approx(expected[i].second).epsilon(1e-12));
    }

    const PathSet hot = enumerate_paths_exact(rows({{0, 1, 0}, {1, 0, 0}, {0, 0, 1}}));
    REQUIRE(hot.paths.size() == 1);
    CHECK(hot.paths[0].symbols == std::vector<int>{1, 0, 2});
    CHECK(hot.paths[0].likelihood == 1.0);
}

TEST_CASE("enumeration refuses oversized path spaces") {
    std::vector<double> v(37 * 5, 1.0 / 37);
    CHECK_THROWS_AS(enumerate_paths_exact(StepDistributions(5, 37, v)), CapacityError);
    std::vector<double> w(10 * 6, 0.1);
    CHECK_NOTHROW(enumerate_paths_exact(StepDistributions(6, 10, w)));  // exactly 10^6
}

TEST_CASE("enumerated marginals match the brute-force oracle") {
    SplitMix64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const auto p = random_rows(rng, 3, 4);
        const PathSet all = enumerate_paths_exact(p);
        const StepDistributions vote = sequence_vote(all, 3, 4);
        for (int t = 0; t < 3; ++t)
            for (int k = 0; k < 4; ++k) CHECK(std::abs(vote.at(t, k) - brute_marginal(p, t, k)) < 1e-12);
    }
}

TEST_CASE("beam_search_topk examples") {
    const auto p = rows({{0.6, 0.4}, {0.7, 0.3}});
    const PathSet top2 = beam_search_topk(p, 2);
    REQUIRE(top2.paths.size() == 2);
    CHECK(top2.paths[0].symbols == std::vector<int>{0, 0});
    CHECK(top2.paths[0].likelihood == doctest::Approx(0.42));
    CHECK(top2.paths[1].symbols == std::vector<int>{1, 0});
    CHECK(top2.paths[1].likelihood == doctest::Approx(0.28));

    // One-hot rows: the runner-up is the lexicographically smallest zero-likelihood path.
    const auto hot = rows({{1, 0, 0}, {1, 0, 0}});
    const PathSet h2 = beam_search_topk(hot, 2);
    REQUIRE(h2.paths.size() == 2);
    CHECK(h2.paths[0].likelihood == 1.0);
    CHECK(h2.paths[0].symbols == std::vector<int>{0, 0});
    CHECK(h2.paths[1].symbols == std::vector<int>{0, 1});
    CHECK(h2.paths[1].likelihood == 0.0);

    // Exhaustive K reproduces the enumeration.
    const PathSet all = enumerate_paths_exact(p);
    const PathSet beam_all = beam_search_topk(p, 4);
    REQUIRE(beam_all.paths.size() == all.paths.size());
    for (std::size_t i = 0; i < all.paths.size(); ++i) {
        CHECK(beam_all.paths[i].symbols == all.paths[i].symbols);
        CHECK(beam_all.paths[i].likelihood == all.paths[i].likelihood);
    }
    CHECK(beam_search_topk(p, 100).paths.size() == 4);
    CHECK_THROWS_AS(beam_search_topk(p, 0), ContractError);
}

TEST_CASE("beam search equals brute-force top-K on random instances") {
    SplitMix64 rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const int T = 1 + static_cast<int>(rng.below(5));
        const int A = 1 + static_cast<int>(rng.below(6));
        const int K = 1 + static_cast<int>(rng.below(8));
        const auto p = random_rows(rng, T, A, 1.0 + 3.0 * rng.uniform());
        const PathSet exact = enumerate_paths_exact(p);
        const PathSet beam = beam_search_topk(p, K);
        const std::size_t expect = std::min<std::size_t>(K, exact.paths.size());
        REQUIRE(beam.paths.size() == expect);
        for (std::size_t i = 0; i < expect; ++i) {
            CHECK(beam.paths[i].symbols == exact.paths[i].symbols);
            CHECK(beam.paths[i].likelihood == exact.paths[i].likelihood);
        }
    }
}

TEST_CASE("revise_distribution worked example") {
    const auto p = rows({{0.6, 0.4}, {0.7, 0.3}});
    const PathSet top = beam_search_topk(p, 2);
    const StepDistributions vote = sequence_vote(top, 2, 2);
    CHECK(vote.at(0, 0) == doctest::Approx(0.6));
    CHECK(vote.at(0, 1) == doctest::Approx(0.4));
    CHECK(vote.at(1, 0) == doctest::Approx(1.0));
    CHECK(vote.at(1, 1) == doctest::Approx(0.0));

    const SeqSoftLabel label = revise_distribution(p, 0.5, 2, 0.1);
    CHECK_FALSE(label.used_fallback);
    CHECK(std::abs(label.revised.at(0, 0) - 0.6) < 1e-12);
    CHECK(std::abs(label.revised.at(0, 1) - 0.4) < 1e-12);
    CHECK(std::abs(label.revised.at(1, 0) - 0.85) < 1e-12);
    CHECK(std::abs(label.revised.at(1, 1) - 0.15) < 1e-12);

    for (double alpha : {0.0, 0.3, 1.0}) {
        const SeqSoftLabel full = revise_distribution(p, alpha, 4, 0.1);
        for (int t = 0; t < 2; ++t)
            for (int k = 0; k < 2; ++k) CHECK(std::abs(full.revised.at(t, k) - p.at(t, k)) < 1e-12);
    }
}

TEST_CASE("threshold fallback") {
    // Best path 0.25 * 0.2 = 0.05 < 0.1
    const auto tiny = rows({{0.2, 0.2, 0.2, 0.2, 0.2}, {0.25, 0.25, 0.25, 0.25, 0.0}});
    CHECK(revise_distribution(tiny, 0.5, 6, 0.1).used_fallback);
    const auto flat = rows({{0.25, 0.25, 0.25, 0.25}, {0.2, 0.2, 0.2, 0.4}});
    // max path = 0.25 * 0.4 = 0.1 -> not below threshold 0.1
    CHECK_FALSE(revise_distribution(flat, 0.5, 6, 0.1).used_fallback);
    const auto low = rows({{0.25, 0.25, 0.25, 0.25}, {0.3, 0.3, 0.2, 0.2}});
    // max path = 0.075 < 0.1
    const SeqSoftLabel fb = revise_distribution(low, 0.5, 6, 0.1);
    CHECK(fb.used_fallback);
    CHECK(fb.revised.values() == low.values());
    CHECK(fb.max_path_likelihood == doctest::Approx(0.075));
}

TEST_CASE("revision properties") {
    SplitMix64 rng(99);
    for (int trial = 0; trial < 200; ++trial) {
        const int T = 1 + static_cast<int>(rng.below(4));
        const int A = 2 + static_cast<int>(rng.below(4));
        const auto p = random_rows(rng, T, A, 1.0 + 4.0 * rng.uniform());
        const double alpha = rng.uniform();
        const int K = 1 + static_cast<int>(rng.below(8));
        const double r = rng.uniform(0.0, 0.5);

        const SeqSoftLabel label = revise_distribution(p, alpha, K, r);
        for (int t = 0; t < T; ++t) {
            double total = 0.0;
            for (double v : label.revised.row(t)) total += v;
            CHECK(std::abs(total - 1.0) < 1e-6);
        }
        CHECK(label.used_fallback == (beam_search_topk(p, K).max_likelihood() < r));

        const SeqSoftLabel none = revise_distribution(p, 0.0, K, 0.0);
        for (std::size_t i = 0; i < p.values().size(); ++i)
            CHECK(std::abs(none.revised.values()[i] - p.values()[i]) < 1e-12);

        const SeqSoftLabel greedy = revise_distribution(p, 1.0, 1, 0.0);
        for (int t = 0; t < T; ++t) {
            int best = 0;
            for (int k = 1; k < A; ++k)
                if (p.at(t, k) > p.at(t, best)) best = k;
            for (int k = 0; k < A; ++k) CHECK(greedy.revised.at(t, k) == (k == best ? 1.0 : 0.0));
        }
    }
}

TEST_CASE("step distribution validation") {
    CHECK_THROWS_AS(StepDistributions(1, 2, {0.5, 0.6}), ContractError);
    CHECK_THROWS_AS(StepDistributions(1, 2, {1.5, -0.5}), ContractError);
    CHECK_THROWS_AS(StepDistributions(2, 2, {0.5, 0.5}), DimensionError);
    const std::vector<float> logits{0.0f, 0.0f, 1.0f, 0.0f};
    const auto p = StepDistributions::from_logits(logits, 2, 2);
    CHECK(p.at(0, 0) == doctest::Approx(0.5));
    CHECK(p.at(1, 0) == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)));
    const auto warm = StepDistributions::from_logits(logits, 2, 2, 4.0);
    CHECK(warm.at(1, 0) == doctest::Approx(std::exp(0.25) / (std::exp(0.25) + 1.0)));
}

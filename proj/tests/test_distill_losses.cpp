#include "doctest.h"

#include <cmath>
#include <vector>

#include "kdlt/distill_losses.hpp"
#include "test_util.hpp"

using namespace kdlt;
using namespace kdlt::distill;
using kdlt::testing::random_tensor;

namespace {

// Plain double oracle for the contrastive objective, written from its definition.
double contrastive_oracle(const nd::Tensor& tea, const nd::Tensor& stu, const std::vector<int>& lengths, double tau) {
    const int N = stu.dim(0), T = stu.dim(1), C = stu.dim(2);
    std::vector<std::vector<double>> t_rows, s_rows;
    auto unit = [&](const nd::Tensor& x, int n, int t) {
        std::vector<double> v(static_cast<std::size_t>(C));
        double norm = 0.0;
        for (int c = 0; c < C; ++c) {
            v[c] = x.at((static_cast<std::size_t>(n) * T + t) * C + c);
            norm += v[c] * v[c];
        }
        norm = std::sqrt(norm);
        for (double& e : v) e = norm > 0 ? e / norm : 0.0;
        return v;
    };
    for (int n = 0; n < N; ++n)
        for (int t = 0; t < std::min(lengths[n], T); ++t) {
            t_rows.push_back(unit(tea, n, t));
            s_rows.push_back(unit(stu, n, t));
        }
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
        return s;
    };
    const std::size_t L = s_rows.size();
    double total = 0.0;
    for (std::size_t i = 0; i < L; ++i) {
        const double pos = std::exp(dot(s_rows[i], t_rows[i]) / tau);
        double denom = 0.0;
        for (std::size_t j = 0; j < L; ++j) {
            denom += std::exp(dot(s_rows[i], t_rows[j]) / tau);
            if (j != i) denom += std::exp(dot(s_rows[i], s_rows[j]) / tau);
        }
        total += -std::log(pos / denom);
    }
    return total / static_cast<double>(L);
}

seq::StepDistributions rows(int T, int A, std::vector<double> v) { return seq::StepDistributions(T, A, std::move(v)); }

}  // namespace

TEST_CASE("default weights") {
    const DistillWeights w;
    CHECK(w.lambda1 == 4.0);
    CHECK(w.lambda2 == 2.0);
    CHECK(w.lambda3 == 0.025);
    CHECK(w.lambda4 == 20.0);
    CHECK(w.tau_semantic == 0.1);
    CHECK(w.tau_logits == 4.0);
    CHECK(w.beam_k == 6);
    CHECK(w.threshold_r == 0.1);
    CHECK_NOTHROW(w.validate());
    DistillWeights bad;
    bad.lambda3 = -1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = DistillWeights{};
    bad.tau_logits = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("normalize_features examples") {
    const nd::Tensor x({1, 1, 1, 2}, {1.0f, 3.0f});
    const nd::Tensor y = normalize_features(x);
    CHECK(y.at(0) == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y.at(1) == doctest::Approx(1.0).epsilon(1e-6));

    const nd::Tensor flat = normalize_features(nd::Tensor::full({1, 2, 2, 2}, 5.0f));
    for (float v : flat.data()) CHECK(v == 0.0f);

    const nd::Tensor r = random_tensor({2, 3, 4, 5}, 8, -2.0, 3.0);
    const nd::Tensor once = normalize_features(r);
    const nd::Tensor twice = normalize_features(once);
    for (std::size_t i = 0; i < once.numel(); ++i) CHECK(std::abs(once.at(i) - twice.at(i)) < 1e-6);

    for (int nc = 0; nc < 6; ++nc) {
        double mean = 0.0, sq = 0.0;
        for (int s = 0; s < 20; ++s) mean += once.at(nc * 20 + s);
        mean /= 20;
        for (int s = 0; s < 20; ++s) sq += (once.at(nc * 20 + s) - mean) * (once.at(nc * 20 + s) - mean);
        CHECK(std::abs(mean) < 1e-4);
        CHECK(std::abs(std::sqrt(sq / 20) - 1.0) < 1e-4);
    }
}

TEST_CASE("teacher_mask examples") {
    nd::Tensor one_hot({1, 1, 2, 2}, {0, 0, 1, 0});
    CHECK(teacher_mask(one_hot, {1}).data()[2] == 1.0f);
    CHECK(teacher_mask(one_hot, {1}).data()[0] == 0.0f);

    nd::Tensor two({1, 2, 1, 3}, {1, 0, 0, 0, 0, 1});
    const nd::Tensor m = teacher_mask(two, {2});
    CHECK(std::vector<float>(m.data().begin(), m.data().end()) == std::vector<float>{1, 0, 1});
    // Steps past the valid length are ignored.
    const nd::Tensor m1 = teacher_mask(two, {1});
    CHECK(std::vector<float>(m1.data().begin(), m1.data().end()) == std::vector<float>{1, 0, 0});

    const nd::Tensor uniform = teacher_mask(nd::Tensor::full({2, 3, 2, 2}, 0.25f), {3, 2});
    for (float v : uniform.data()) CHECK(v == doctest::Approx(1.0f));
    const nd::Tensor none = teacher_mask(two, {0});
    for (float v : none.data()) CHECK(v == 1.0f);
}

TEST_CASE("visual_focus_loss examples") {
    const nd::Tensor f = normalize_features(random_tensor({2, 3, 2, 4}, 5));
    const nd::Tensor mask = random_tensor({2, 2, 4}, 6, 0.1, 1.0);
    CHECK(std::abs(visual_focus_loss(f, f, mask).item()) < 1e-6);
    CHECK(std::abs(visual_focus_loss(f, nd::neg(f), mask).item() - 2.0) < 1e-6);

    // Mask of ones reduces to the unmasked cosine loss, computed here directly.
    const nd::Tensor g = normalize_features(random_tensor({2, 3, 2, 4}, 7));
    double cos_sum = 0.0;
    for (int nc = 0; nc < 6; ++nc) {
        double ab = 0, aa = 0, bb = 0;
        for (int s = 0; s < 8; ++s) {
            const double a = f.at(nc * 8 + s), b = g.at(nc * 8 + s);
            ab += a * b;
            aa += a * a;
            bb += b * b;
        }
        cos_sum += ab / std::sqrt(aa * bb);
    }
    CHECK(visual_focus_loss(f, g, nd::Tensor::full({2, 2, 4}, 1.0f)).item() ==
          doctest::Approx(1.0 - cos_sum / 6).epsilon(1e-6));

    // A zero masked vector contributes similarity 0.
    CHECK(visual_focus_loss(f, f, nd::Tensor::zeros({2, 2, 4})).item() == doctest::Approx(1.0));
    CHECK_THROWS_AS(visual_focus_loss(f, f, nd::Tensor::zeros({2, 4, 2})), DimensionError);
}

TEST_CASE("visual_focus_loss stays in [0, 2]") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const nd::Tensor a = normalize_features(random_tensor({2, 4, 3, 3}, 100 + seed));
        const nd::Tensor b = normalize_features(random_tensor({2, 4, 3, 3}, 200 + seed));
        const nd::Tensor m = random_tensor({2, 3, 3}, 300 + seed, 0.0, 1.0);
        const float v = visual_focus_loss(a, b, m).item();
        CHECK(v >= -1e-6f);
        CHECK(v <= 2.0f + 1e-6f);
    }
}

TEST_CASE("info_nce examples") {
    // Positive cosine 1, one negative cosine 0, tau 1.
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    CHECK(info_nce(nd::Tensor({1, 2}, {1.0f, 0.0f})).item() == doctest::Approx(0.3133).epsilon(1e-4));
    CHECK(std::abs(info_nce(nd::Tensor({1, 2}, {1.0f, 0.0f})).item() - expected) < 1e-6);
    for (int m : {1, 3, 10}) {
        const nd::Tensor equal = nd::Tensor::full({2, m + 1}, 0.4f);
        CHECK(std::abs(info_nce(equal).item() - std::log(m + 1.0)) < 1e-5);
    }
    CHECK(std::abs(info_nce(nd::Tensor({1, 2}, {1.0f, 0.0f})).item() - 0.6931) > 0.1);
}

TEST_CASE("semantic_contrastive_loss matches the oracle") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const nd::Tensor tea = random_tensor({3, 4, 5}, 10 + seed);
        const nd::Tensor stu = random_tensor({3, 4, 5}, 50 + seed);
        const std::vector<int> lengths{4, 1, 3};
        for (double tau : {0.1, 1.0}) {
            const double expect = contrastive_oracle(tea, stu, lengths, tau);
            CHECK(semantic_contrastive_loss(tea, stu, lengths, tau).item() == doctest::Approx(expect).epsilon(1e-5));
        }
    }
}

TEST_CASE("semantic_contrastive_loss special cases") {
    // All vectors identical: 2L-1 candidates at equal similarity.
    const nd::Tensor same = nd::Tensor::full({2, 3, 4}, 0.7f);
    CHECK(std::abs(semantic_contrastive_loss(same, same, {2, 1}, 1.0).item() - std::log(5.0)) < 1e-5);

    // Single valid character: only the positive remains.
    const nd::Tensor tea = random_tensor({1, 3, 4}, 1);
    const nd::Tensor stu = random_tensor({1, 3, 4}, 2);
    CHECK(semantic_contrastive_loss(tea, stu, {1}, 0.1).item() == doctest::Approx(0.0).epsilon(1e-7));
    CHECK_THROWS_AS(semantic_contrastive_loss(tea, stu, {0}, 0.1), ContractError);

    // Small temperature, positive cosine 1 and every other similarity 0.
    const nd::Tensor t2({1, 2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    const nd::Tensor s2({1, 2, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
    CHECK(semantic_contrastive_loss(t2, s2, {2}, 0.01).item() < 1e-6);
}

TEST_CASE("semantic loss decreases as the positive aligns") {
    // Anchor e0 with positive rotating toward it in the e0-e1 plane; the second
    // pair sits on e2, so every other similarity stays fixed.
    double previous = 1e9;
    for (int step = 0; step <= 10; ++step) {
        const double angle = (1.0 - step / 10.0) * 2.5;
        const nd::Tensor tea({2, 1, 3}, {static_cast<float>(std::cos(angle)), static_cast<float>(std::sin(angle)), 0.0f,
                                         0.0f, 0.0f, 1.0f});
        const nd::Tensor stu({2, 1, 3}, {1.0f, 0.0f, 0.0f, 0.0f, 0.0f, 1.0f});
        const double loss = semantic_contrastive_loss(tea, stu, {1, 1}, 0.5).item();
        CHECK(loss < previous);
        previous = loss;
    }
}

TEST_CASE("soft_logits_loss examples") {
    // q = (0.5, 0.5) from equal logits at any temperature.
    const auto p = rows(1, 2, {0.8, 0.2});
    const float v = soft_logits_loss(p, nd::Tensor({1, 2}, {0.3f, 0.3f}), 4.0).item();
    CHECK(v == doctest::Approx(0.1927).epsilon(1e-4));
    CHECK(std::abs(v - (0.8 * std::log(1.6) + 0.2 * std::log(0.4))) < 1e-6);

    std::vector<double> hot(37, 0.0);
    hot[5] = 1.0;
    CHECK(std::abs(soft_logits_loss(rows(1, 37, hot), nd::Tensor::zeros({1, 37}), 4.0).item() - std::log(37.0)) < 1e-5);

    // p equal to q gives 0.
    const std::vector<float> logits{0.4f, -1.0f, 2.0f, 0.0f, 0.5f, 0.5f};
    const auto q = seq::StepDistributions::from_logits(logits, 2, 3, 4.0);
    CHECK(std::abs(soft_logits_loss(q, nd::Tensor({2, 3}, logits), 4.0).item()) < 1e-6);
}

TEST_CASE("soft_logits_loss is non-negative") {
    SplitMix64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(3 * 5);
        for (int t = 0; t < 3; ++t) {
            double total = 0;
            for (int k = 0; k < 5; ++k) total += v[t * 5 + k] = rng.uniform(0.0, 1.0);
            for (int k = 0; k < 5; ++k) v[t * 5 + k] /= total;
        }
        const nd::Tensor logits = random_tensor({3, 5}, 500 + trial, -3.0, 3.0);
        CHECK(soft_logits_loss(rows(3, 5, v), logits, 4.0).item() >= -1e-6f);
    }
}

TEST_CASE("batched soft logits is the mean of per-sample losses") {
    const nd::Tensor logits = random_tensor({2, 3, 4}, 9, -2.0, 2.0);
    const auto labels = teacher_soft_labels(random_tensor({2, 3, 4}, 10, -2.0, 2.0), DistillWeights{});
    const std::vector<seq::StepDistributions> p{labels[0].revised, labels[1].revised};
    const float batched = soft_logits_loss(p, logits, 4.0).item();
    const auto d = logits.data();
    const float a = soft_logits_loss(p[0], nd::Tensor({3, 4}, std::vector<float>(d.begin(), d.begin() + 12)), 4.0).item();
    const float b = soft_logits_loss(p[1], nd::Tensor({3, 4}, std::vector<float>(d.begin() + 12, d.end())), 4.0).item();
    CHECK(batched == doctest::Approx((a + b) / 2).epsilon(1e-5));
}

TEST_CASE("teacher_soft_labels ranks paths at tau 1 and mixes the warm word term") {
    const std::vector<float> logits{2.0f, 0.0f, 1.0f, 0.5f, 0.0f, 3.0f};
    DistillWeights w;
    w.alpha = 0.5;
    w.beam_k = 2;
    w.threshold_r = 0.0;
    const auto labels = teacher_soft_labels(nd::Tensor({1, 2, 3}, logits), w);
    const auto path = seq::StepDistributions::from_logits(logits, 2, 3, 1.0);
    const auto word = seq::StepDistributions::from_logits(logits, 2, 3, 4.0);
    const auto expect = seq::revise_distribution(path, word, 0.5, 2, 0.0);
    for (std::size_t i = 0; i < 6; ++i) CHECK(labels[0].revised.values()[i] == expect.revised.values()[i]);
    // alpha = 0 keeps the warm word-level rows.
    w.alpha = 0.0;
    const auto plain = teacher_soft_labels(nd::Tensor({1, 2, 3}, logits), w);
    for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(plain[0].revised.values()[i] - word.values()[i]) < 1e-12);
}

TEST_CASE("teacher_soft_labels stops paths at the valid length") {
    // Step 0 is confident, steps 1-2 are flat: over all three steps the best
    // path falls below r, over the first step alone it does not.
    const std::vector<float> logits{4.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f};
    DistillWeights w;
    w.threshold_r = 0.2;
    const nd::Tensor t({1, 3, 3}, logits);
    CHECK(teacher_soft_labels(t, w)[0].used_fallback);
    const auto cut = teacher_soft_labels(t, w, {1})[0];
    CHECK_FALSE(cut.used_fallback);
    const auto word = seq::StepDistributions::from_logits(logits, 3, 3, 4.0);
    for (int step = 1; step < 3; ++step)
        for (int k = 0; k < 3; ++k) CHECK(cut.revised.at(step, k) == word.at(step, k));
    const auto head = seq::revise_distribution(seq::StepDistributions::from_logits(logits, 1, 3, 1.0),
                                               seq::StepDistributions::from_logits(logits, 1, 3, 4.0), w.alpha,
                                               w.beam_k, w.threshold_r);
    for (int k = 0; k < 3; ++k) CHECK(cut.revised.at(0, k) == head.revised.at(0, k));
    CHECK(cut.max_path_likelihood == doctest::Approx(head.max_path_likelihood));

    // Full length matches the untruncated call; lengths beyond T are capped.
    CHECK(teacher_soft_labels(t, w, {3})[0].revised.values() == teacher_soft_labels(t, w)[0].revised.values());
    CHECK(teacher_soft_labels(t, w, {7})[0].revised.values() == teacher_soft_labels(t, w)[0].revised.values());
    CHECK_THROWS_AS(teacher_soft_labels(t, w, {1, 2}), DimensionError);
}

TEST_CASE("total_loss examples") {
    const DistillWeights w;
    CHECK(total_loss(0, 0, 0, 0, w) == 0.0);
    CHECK(total_loss(1, 1, 1, 1, w) == doctest::Approx(26.025).epsilon(1e-12));
    DistillWeights ce_only;
    ce_only.lambda2 = ce_only.lambda3 = ce_only.lambda4 = 0.0;
    CHECK(total_loss(0.7, 5, 6, 7, ce_only) == doctest::Approx(4 * 0.7));

    LossTerms terms{nd::Tensor::scalar(1), nd::Tensor::scalar(1), nd::Tensor::scalar(1), nd::Tensor::scalar(1)};
    CHECK(total_loss(terms, w).item() == doctest::Approx(26.025).epsilon(1e-6));
    LossTerms partial;
    partial.ce = nd::Tensor::scalar(0.5f);
    CHECK(total_loss(partial, w).item() == doctest::Approx(2.0));
}

TEST_CASE("loss gradients pass finite differences") {
    const nd::Tensor tea_f = normalize_features(random_tensor({2, 3, 2, 3}, 21));
    const nd::Tensor mask = random_tensor({2, 2, 3}, 22, 0.2, 1.0);
    auto visual = [&](const nd::Tensor& x) { return visual_focus_loss(tea_f, normalize_features(x), mask); };
    CHECK(nd::grad_check(visual, random_tensor({2, 3, 2, 3}, 23)) < 1e-3);

    const nd::Tensor tea_h = random_tensor({2, 3, 4}, 24);
    auto semantic = [&](const nd::Tensor& x) { return semantic_contrastive_loss(tea_h, x, {3, 2}, 0.5); };
    CHECK(nd::grad_check(semantic, random_tensor({2, 3, 4}, 25)) < 1e-3);

    const auto labels = teacher_soft_labels(random_tensor({2, 3, 5}, 26, -2.0, 2.0), DistillWeights{});
    const std::vector<seq::StepDistributions> p{labels[0].revised, labels[1].revised};
    auto logits = [&](const nd::Tensor& x) { return soft_logits_loss(p, x, 4.0); };
    CHECK(nd::grad_check(logits, random_tensor({2, 3, 5}, 27, -2.0, 2.0)) < 1e-3);

    auto info = [](const nd::Tensor& x) { return info_nce(x); };
    CHECK(nd::grad_check(info, random_tensor({3, 4}, 28)) < 1e-3);

    const DistillWeights w;
    auto total = [&](const nd::Tensor& x) {
        LossTerms t;
        t.visual = visual_focus_loss(tea_f, normalize_features(x), mask);
        t.ce = nd::mean(nd::mul(x, x));
        return total_loss(t, w);
    };
    CHECK(nd::grad_check(total, random_tensor({2, 3, 2, 3}, 29)) < 1e-3);
}

TEST_CASE("no gradient reaches the teacher side") {
    nd::Tensor tea_f = random_tensor({2, 3, 2, 3}, 31, -1.0, 1.0, true);
    nd::Tensor stu_f = random_tensor({2, 3, 2, 3}, 32, -1.0, 1.0, true);
    nd::Tensor tea_h = random_tensor({2, 3, 4}, 33, -1.0, 1.0, true);
    nd::Tensor stu_h = random_tensor({2, 3, 4}, 34, -1.0, 1.0, true);
    nd::Tensor stu_l = random_tensor({2, 3, 5}, 35, -1.0, 1.0, true);
    const auto labels = teacher_soft_labels(random_tensor({2, 3, 5}, 36), DistillWeights{});
    {
        nd::GradTape tape;
        LossTerms t;
        t.visual = visual_focus_loss(normalize_features(tea_f), normalize_features(stu_f),
                                     nd::Tensor::full({2, 2, 3}, 1.0f));
        t.semantic = semantic_contrastive_loss(tea_h, stu_h, {3, 1}, 0.1);
        t.logits = soft_logits_loss(std::vector<seq::StepDistributions>{labels[0].revised, labels[1].revised}, stu_l, 4.0);
        tape.backward(total_loss(t, DistillWeights{}));
    }
    CHECK_FALSE(tea_f.has_grad());
    CHECK_FALSE(tea_h.has_grad());
    CHECK(stu_f.has_grad());
    CHECK(stu_h.has_grad());
    CHECK(stu_l.has_grad());
}

TEST_CASE("valid_lengths counts the end-marker") {
    CHECK(valid_lengths({{3, 4, 0}, {0}}, 12) == std::vector<int>{3, 1});
    CHECK(valid_lengths({std::vector<int>(12, 1)}, 12) == std::vector<int>{12});
}

#include "kdlt/distill_losses.hpp"

#include <algorithm>
#include <cmath>

namespace kdlt::distill {

void DistillWeights::validate() const {
    for (double l : {lambda1, lambda2, lambda3, lambda4})
        if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("loss weights must be finite and non-negative");
    if (!(tau_semantic > 0.0) || !(tau_logits > 0.0)) throw ConfigError("temperatures must be positive");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
    if (beam_k < 1) throw ConfigError("beam_k must be at least 1");
    if (!(threshold_r >= 0.0 && threshold_r <= 1.0)) throw ConfigError("threshold_r must lie in [0, 1]");
}

nd::Tensor normalize_features(const nd::Tensor& features, float eps) {
    if (features.rank() != 4) throw DimensionError("normalize_features expects [N,C,h,w]");
    const auto& s = features.shape();
    const int plane = s[2] * s[3];
    const nd::Tensor x = nd::reshape(features, {s[0], s[1], plane});
    const nd::Tensor centered = nd::sub(x, nd::expand_last(nd::mean_last(x), plane));
    const nd::Tensor denom = nd::add_scalar(nd::std_last(x), eps);
    return nd::reshape(nd::div(centered, nd::expand_last(denom, plane)), s);
}

nd::Tensor teacher_mask(const nd::Tensor& attention, const std::vector<int>& valid_lengths) {
    if (attention.rank() != 4) throw DimensionError("teacher_mask expects [N,T,h,w] attention");
    const int N = attention.dim(0), T = attention.dim(1);
    const std::size_t plane = static_cast<std::size_t>(attention.dim(2)) * attention.dim(3);
    if (valid_lengths.size() != static_cast<std::size_t>(N)) throw DimensionError("one valid length per sample");
    const auto a = attention.data();
    std::vector<float> mask(static_cast<std::size_t>(N) * plane, 0.0f);
    for (int n = 0; n < N; ++n) {
        float* m = mask.data() + static_cast<std::size_t>(n) * plane;
        const int steps = std::clamp(valid_lengths[static_cast<std::size_t>(n)], 0, T);
        if (steps == 0) {
            std::fill(m, m + plane, 1.0f);
            continue;
        }
        for (int t = 0; t < steps; ++t) {
            const float* row = a.data() + (static_cast<std::size_t>(n) * T + t) * plane;
            for (std::size_t i = 0; i < plane; ++i) m[i] = std::max(m[i], row[i]);
        }
        const float peak = *std::max_element(m, m + plane);
        if (peak > 0.0f) {
            for (std::size_t i = 0; i < plane; ++i) m[i] /= peak;
        } else {
            std::fill(m, m + plane, 1.0f);
        }
    }
    return nd::Tensor({N, attention.dim(2), attention.dim(3)}, std::move(mask));
}

nd::Tensor visual_focus_loss(const nd::Tensor& teacher_features, const nd::Tensor& student_features,
                             const nd::Tensor& mask) {
    if (teacher_features.rank() != 4 || teacher_features.shape() != student_features.shape()) {
        throw DimensionError("visual_focus_loss expects equal [N,C,h,w] features");
    }
    const auto& s = student_features.shape();
    const int N = s[0], C = s[1], plane = s[2] * s[3];
    if (mask.shape() != nd::Shape{N, s[2], s[3]}) throw DimensionError("visual_focus_loss: mask must be [N,h,w]");

    // Broadcast the mask over channels as a constant.
    std::vector<float> wide(static_cast<std::size_t>(N) * C * plane);
    const auto m = mask.data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            std::copy_n(m.data() + static_cast<std::size_t>(n) * plane, plane,
                        wide.data() + (static_cast<std::size_t>(n) * C + c) * plane);
    const nd::Tensor w({N, C, plane}, std::move(wide));

    const nd::Tensor tea = nd::mul(nd::reshape(teacher_features.detach(), {N, C, plane}), w);
    const nd::Tensor stu = nd::mul(nd::reshape(student_features, {N, C, plane}), w);
    return nd::add_scalar(nd::neg(nd::mean(nd::cosine_last(tea, stu))), 1.0f);
}

nd::Tensor info_nce(const nd::Tensor& logits) {
    if (logits.rank() != 2) throw DimensionError("info_nce expects [R,M] logits");
    const std::vector<int> first(static_cast<std::size_t>(logits.dim(0)), 0);
    return nd::neg(nd::mean(nd::gather_last(nd::log_softmax(logits, 1), first, 1)));
}

nd::Tensor semantic_contrastive_loss(const nd::Tensor& teacher_semantics, const nd::Tensor& student_semantics,
                                     const std::vector<int>& valid_lengths, double tau) {
    if (teacher_semantics.rank() != 3 || teacher_semantics.shape() != student_semantics.shape()) {
        throw DimensionError("semantic_contrastive_loss expects equal [N,T,C] tensors");
    }
    if (!(tau > 0.0)) throw ContractError("semantic_contrastive_loss: tau must be positive");
    const int N = student_semantics.dim(0), T = student_semantics.dim(1), C = student_semantics.dim(2);
    if (valid_lengths.size() != static_cast<std::size_t>(N)) throw DimensionError("one valid length per sample");
    std::vector<int> rows;
    for (int n = 0; n < N; ++n)
        for (int t = 0; t < std::min(valid_lengths[static_cast<std::size_t>(n)], T); ++t) rows.push_back(n * T + t);
    const int L = static_cast<int>(rows.size());
    if (L == 0) throw ContractError("semantic_contrastive_loss: no valid characters in batch");

    const nd::Tensor tea = nd::l2_normalize_last(nd::select_rows(nd::reshape(teacher_semantics.detach(), {N * T, C}), rows));
    const nd::Tensor stu = nd::l2_normalize_last(nd::select_rows(nd::reshape(student_semantics, {N * T, C}), rows));
    // Columns 0..L-1 are teacher vectors, L..2L-1 student vectors.
    const nd::Tensor sims = nd::scale(nd::matmul(stu, nd::transpose_last2(nd::concat_rows(tea, stu))),
                                      static_cast<float>(1.0 / tau));
    const int per_row = 2 * L - 1;
    std::vector<int> index;
    index.reserve(static_cast<std::size_t>(L) * per_row);
    for (int i = 0; i < L; ++i) {
        index.push_back(i);
        for (int j = 0; j < 2 * L; ++j)
            if (j != i && j != L + i) index.push_back(j);
    }
    return info_nce(nd::gather_last(sims, index, per_row));
}

nd::Tensor soft_logits_loss(const seq::StepDistributions& p_tilde, const nd::Tensor& student_logits, double tau) {
    if (student_logits.rank() != 2) throw DimensionError("soft_logits_loss expects [T,A] logits");
    const nd::Tensor batched = nd::reshape(student_logits, {1, student_logits.dim(0), student_logits.dim(1)});
    return soft_logits_loss(std::vector<seq::StepDistributions>{p_tilde}, batched, tau);
}

nd::Tensor soft_logits_loss(const std::vector<seq::StepDistributions>& p_tilde, const nd::Tensor& student_logits,
                            double tau) {
    if (student_logits.rank() != 3) throw DimensionError("soft_logits_loss expects [N,T,A] logits");
    if (!(tau > 0.0)) throw ContractError("soft_logits_loss: tau must be positive");
    const int N = student_logits.dim(0), T = student_logits.dim(1), A = student_logits.dim(2);
    if (p_tilde.size() != static_cast<std::size_t>(N)) throw DimensionError("one soft label per sample");
    std::vector<float> p(static_cast<std::size_t>(N) * T * A);
    double entropy_term = 0.0;  // sum p log p, a constant
    for (int n = 0; n < N; ++n) {
        const auto& label = p_tilde[static_cast<std::size_t>(n)];
        if (label.steps() != T || label.alphabet() != A) throw DimensionError("soft label shape mismatch");
        const auto& v = label.values();
        for (std::size_t i = 0; i < v.size(); ++i) {
            p[static_cast<std::size_t>(n) * T * A + i] = static_cast<float>(v[i]);
            if (v[i] > 0.0) entropy_term += v[i] * std::log(v[i]);
        }
    }
    const nd::Tensor target({N * T, A}, std::move(p));
    const nd::Tensor logq = nd::log_softmax(nd::scale(nd::reshape(student_logits, {N * T, A}), static_cast<float>(1.0 / tau)), 1);
    const nd::Tensor cross = nd::sum(nd::mul(target, logq));
    const float inv = static_cast<float>(1.0 / (static_cast<double>(N) * T));
    return nd::scale(nd::add_scalar(nd::neg(cross), static_cast<float>(entropy_term)), inv);
}

std::vector<seq::SeqSoftLabel> teacher_soft_labels(const nd::Tensor& teacher_logits, const DistillWeights& w,
                                                   const std::vector<int>& valid_lengths) {
    if (teacher_logits.rank() != 3) throw DimensionError("teacher_soft_labels expects [N,T,A] logits");
    const int N = teacher_logits.dim(0), T = teacher_logits.dim(1), A = teacher_logits.dim(2);
    if (!valid_lengths.empty() && valid_lengths.size() != static_cast<std::size_t>(N)) {
        throw DimensionError("teacher_soft_labels: one valid length per sample required");
    }
    const auto data = teacher_logits.data();
    std::vector<seq::SeqSoftLabel> out;
    out.reserve(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const int L = valid_lengths.empty() ? T : std::clamp(valid_lengths[n], 1, T);
        const auto block = data.subspan(static_cast<std::size_t>(n) * T * A, static_cast<std::size_t>(T) * A);
        const auto word = seq::StepDistributions::from_logits(block, T, A, w.tau_logits);
        if (L == T) {
            out.push_back(seq::revise_distribution(seq::StepDistributions::from_logits(block, T, A, 1.0), word,
                                                   w.alpha, w.beam_k, w.threshold_r));
            continue;
        }
        const auto head_word = seq::StepDistributions::from_logits(block, L, A, w.tau_logits);
        seq::SeqSoftLabel label = seq::revise_distribution(seq::StepDistributions::from_logits(block, L, A, 1.0),
                                                           head_word, w.alpha, w.beam_k, w.threshold_r);
        std::vector<double> rows = label.revised.values();
        rows.insert(rows.end(), word.values().begin() + static_cast<std::ptrdiff_t>(L) * A, word.values().end());
        label.revised = seq::StepDistributions(T, A, std::move(rows));
        out.push_back(std::move(label));
    }
    return out;
}

nd::Tensor total_loss(const LossTerms& terms, const DistillWeights& w) {
    nd::Tensor total = nd::Tensor::scalar(0.0f);
    auto accumulate = [&](const nd::Tensor& term, double lambda) {
        if (term.defined() && lambda != 0.0) total = nd::add(total, nd::scale(term, static_cast<float>(lambda)));
    };
    accumulate(terms.ce, w.lambda1);
    accumulate(terms.visual, w.lambda2);
    accumulate(terms.semantic, w.lambda3);
    accumulate(terms.logits, w.lambda4);
    return total;
}

double total_loss(double ce, double visual, double semantic, double logits, const DistillWeights& w) {
    return w.lambda1 * ce + w.lambda2 * visual + w.lambda3 * semantic + w.lambda4 * logits;
}

std::vector<int> valid_lengths(const std::vector<std::vector<int>>& targets, int max_steps) {
    std::vector<int> out;
    out.reserve(targets.size());
    for (const auto& t : targets) out.push_back(std::min(static_cast<int>(t.size()), max_steps));
    return out;
}

}  // namespace kdlt::distill

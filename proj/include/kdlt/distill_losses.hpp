#pragma once

// Distillation objectives between a frozen teacher (HR input) and a student
// (LR input). Teacher-side tensors are always detached inside these functions.

#include <vector>

#include "kdlt/errors.hpp"
#include "kdlt/ndgrad.hpp"
#include "kdlt/seqlabel.hpp"

namespace kdlt::distill {

struct DistillWeights {
    double lambda1 = 4.0;      // cross-entropy
    double lambda2 = 2.0;      // visual focus
    double lambda3 = 0.025;    // semantic contrastive
    double lambda4 = 20.0;     // soft logits
    double tau_semantic = 0.1;
    double tau_logits = 4.0;
    double alpha = 0.5;        // weight of the sequence-level vote
    int beam_k = 6;
    double threshold_r = 0.1;

    void validate() const;  // throws ConfigError
    bool operator==(const DistillWeights&) const = default;
};

inline constexpr float kNormEps = 1e-7f;

// Per-(sample, channel) standardization over the spatial axes:
// (F - mean) / (population std + eps).
nd::Tensor normalize_features(const nd::Tensor& features, float eps = kNormEps);

// Soft spatial mask [N,h,w] from teacher attention [N,T,h,w]: max over the first
// valid_lengths[n] steps, rescaled so the largest entry is 1. Length 0 gives ones.
nd::Tensor teacher_mask(const nd::Tensor& attention, const std::vector<int>& valid_lengths);

// 1 - mean over (sample, channel) of the cosine between masked spatial vectors.
// A zero masked vector contributes similarity 0.
nd::Tensor visual_focus_loss(const nd::Tensor& teacher_features, const nd::Tensor& student_features,
                             const nd::Tensor& mask);

// Mean over rows of -log softmax(logits)[row, 0]; column 0 holds the positive.
nd::Tensor info_nce(const nd::Tensor& logits);

// NT-Xent with the valid student vectors as anchors. Positive: the teacher
// vector at the same (sample, step). Candidates: every valid teacher and student
// vector except the anchor. Throws ContractError when no step is valid.
nd::Tensor semantic_contrastive_loss(const nd::Tensor& teacher_semantics, const nd::Tensor& student_semantics,
                                     const std::vector<int>& valid_lengths, double tau);

// (1/T) sum_t KL(p_tilde_t || softmax(student_logits_t / tau)) for one sample [T,A].
nd::Tensor soft_logits_loss(const seq::StepDistributions& p_tilde, const nd::Tensor& student_logits, double tau);
// Mean of the above over a batch; student_logits [N,T,A].
nd::Tensor soft_logits_loss(const std::vector<seq::StepDistributions>& p_tilde, const nd::Tensor& student_logits,
                            double tau);

// Revised teacher rows for each sample of teacher_logits [N,T,A]. Paths are
// ranked on tau=1 probabilities; the word-level term uses tau_logits.
// Paths stop at valid_lengths[n] (label plus end-marker); later rows keep the
// word-level term. An empty valid_lengths means every step.
std::vector<seq::SeqSoftLabel> teacher_soft_labels(const nd::Tensor& teacher_logits, const DistillWeights& w,
                                                   const std::vector<int>& valid_lengths = {});

struct LossTerms {
    nd::Tensor ce, visual, semantic, logits;  // undefined terms count as 0
};

nd::Tensor total_loss(const LossTerms& terms, const DistillWeights& w);
double total_loss(double ce, double visual, double semantic, double logits, const DistillWeights& w);

// Valid steps per sample: label length plus the end-marker, capped at max_steps.
std::vector<int> valid_lengths(const std::vector<std::vector<int>>& targets, int max_steps);

}  // namespace kdlt::distill

#pragma once

// Training and evaluation loops: teacher pretraining on HR images, student
// distillation on LR images, word accuracy per subset and robustness sweeps.

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "kdlt/distill_losses.hpp"
#include "kdlt/recognizer.hpp"
#include "kdlt/synthdata.hpp"

namespace kdlt::harness {

struct LossFlags {
    bool visual = true;
    bool semantic = true;
    bool logits = true;
    bool operator==(const LossFlags&) const = default;
};

struct TrainConfig {
    int epochs = 30;
    int batch_size = 16;
    double learning_rate = 1e-3;
    double lr_decay = 0.1;
    int lr_decay_every = 25;  // epochs
    std::uint64_t seed = 1;
    bool student_from_teacher = false;  // else random init from the seed
    distill::DistillWeights weights;
    LossFlags enabled;

    // Learning rate in effect during `epoch` (0-based).
    double learning_rate_at(int epoch) const;
    void validate() const;  // throws ConfigError
    bool operator==(const TrainConfig&) const = default;
};

class Adam {
public:
    explicit Adam(std::vector<nd::Tensor> params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    // Applies one update from the accumulated gradients, then clears them.
    void step(double learning_rate);
    long steps() const { return t_; }

private:
    std::vector<nd::Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_, beta2_, eps_;
    long t_ = 0;
};

struct EpochMetrics {
    int epoch = 0;
    double total = 0.0, ce = 0.0, visual = 0.0, semantic = 0.0, logits = 0.0;
};

struct TrainResult {
    rec::Recognizer model;
    std::vector<EpochMetrics> history;
};

enum class Resolution { hr, lr };

TrainResult train_teacher(const std::vector<data::SamplePair>& train, const rec::RecognizerConfig& config,
                          const TrainConfig& tc, std::ostream* log = nullptr);

// Everything the frozen teacher contributes for one sample, computed once.
struct TeacherTargets {
    nd::Tensor features;   // normalized [1,C,h,w]
    nd::Tensor mask;       // [1,h,w]
    nd::Tensor semantics;  // [1,T,C]
    seq::StepDistributions soft_label;
};

std::vector<TeacherTargets> teacher_targets(const rec::Recognizer& teacher, const std::vector<data::SamplePair>& samples,
                                            const distill::DistillWeights& w, Resolution input = Resolution::hr);

// Loss terms for one batch: student on `student_images`, teacher targets for the same samples.
distill::LossTerms distill_terms(const rec::Recognizer& student, const nd::Tensor& student_images,
                                 const std::vector<const TeacherTargets*>& targets,
                                 const std::vector<std::vector<int>>& labels, const TrainConfig& tc);

// Student initialized from the teacher's weights with the student geometry.
// The teacher is never modified; this is checked after training.
TrainResult distill_student(const std::vector<data::SamplePair>& train, const rec::Recognizer& teacher,
                            const rec::RecognizerConfig& student_config, const TrainConfig& tc,
                            std::ostream* log = nullptr);

struct EvalReport {
    std::array<int, 3> correct{};
    std::array<int, 3> count{};
    std::size_t parameter_count = 0;

    int samples() const { return count[0] + count[1] + count[2]; }
    double accuracy(data::Subset s) const;
    double average() const;  // sum correct / sum count
};

EvalReport score_predictions(const std::vector<std::string>& predictions, const std::vector<data::SamplePair>& samples);
std::vector<std::string> predict_all(const rec::Recognizer& model, const std::vector<data::SamplePair>& samples,
                                     Resolution input);
EvalReport evaluate(const rec::Recognizer& model, const std::vector<data::SamplePair>& samples, Resolution input);

struct SweepRow {
    std::string axis;  // "blur" or "noise"
    double level = 0.0;
    double accuracy = 0.0;
};

// Re-degrades each held-out HR image at every grid level (the other axis at 0).
std::vector<SweepRow> robustness_sweep(const rec::Recognizer& model, const std::vector<data::SamplePair>& heldout,
                                       const std::vector<double>& blur_grid, const std::vector<double>& noise_grid,
                                       std::uint64_t seed);

std::string metrics_csv(const std::vector<EpochMetrics>& history);
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string report_text(const EvalReport& report);

}  // namespace kdlt::harness

#include "kdlt/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include "kdlt/parallel.hpp"
#include "kdlt/rng.hpp"

namespace kdlt::harness {

namespace {

constexpr int kEvalBatch = 64;

const std::vector<float>& image_of(const data::SamplePair& s, Resolution r) {
    return r == Resolution::hr ? s.hr.pixels : s.lr.pixels;
}

nd::Tensor batch_images(const std::vector<data::SamplePair>& samples, std::span<const std::size_t> idx, Resolution r) {
    std::vector<const std::vector<float>*> imgs;
    imgs.reserve(idx.size());
    for (std::size_t i : idx) imgs.push_back(&image_of(samples[i], r));
    const data::Image& first = r == Resolution::hr ? samples[idx[0]].hr : samples[idx[0]].lr;
    return rec::stack_images(imgs, first.height, first.width);
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    SplitMix64 rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

std::vector<nd::Tensor> trainable(rec::Recognizer& model) {
    model.set_trainable(true);
    std::vector<nd::Tensor> out;
    for (auto& p : model.parameters()) out.push_back(p.tensor);
    return out;
}

double value_or_zero(const nd::Tensor& t) { return t.defined() ? t.item() : 0.0; }

void check_finite(const distill::LossTerms& terms, const nd::Tensor& total, int epoch, std::size_t batch) {
    if (std::isfinite(total.item())) return;
    std::ostringstream os;
    os << "non-finite loss at epoch " << epoch << " batch " << batch << ": total=" << total.item()
       << " ce=" << value_or_zero(terms.ce) << " visual=" << value_or_zero(terms.visual)
       << " semantic=" << value_or_zero(terms.semantic) << " logits=" << value_or_zero(terms.logits);
    throw DivergenceError(os.str());
}

void log_epoch(std::ostream* log, const char* what, const EpochMetrics& m, double lr, double seconds) {
    if (!log) return;
    *log << what << " epoch " << m.epoch << " loss " << std::setprecision(5) << m.total << " (ce " << m.ce;
    if (m.visual != 0.0 || m.semantic != 0.0 || m.logits != 0.0)
        *log << ", visual " << m.visual << ", semantic " << m.semantic << ", logits " << m.logits;
    *log << ") lr " << lr << " " << std::setprecision(3) << seconds << "s\n";
}

std::vector<std::vector<int>> encode_labels(const std::vector<data::SamplePair>& samples,
                                            std::span<const std::size_t> idx) {
    std::vector<std::vector<int>> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(rec::alphabet::encode(samples[i].text));
    return out;
}

}  // namespace

// ===========================================================================
// Config and optimizer

double TrainConfig::learning_rate_at(int epoch) const {
    return learning_rate * std::pow(lr_decay, epoch / lr_decay_every);
}

void TrainConfig::validate() const {
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (enabled.semantic && weights.lambda3 > 0.0 && batch_size < 2) {
        throw ConfigError("the semantic loss needs batch_size >= 2 for negatives");
    }
    if (!(learning_rate > 0.0) || !(lr_decay > 0.0)) throw ConfigError("learning_rate and lr_decay must be positive");
    if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be positive");
    weights.validate();
}

Adam::Adam(std::vector<nd::Tensor> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
        m_.emplace_back(p.numel(), 0.0);
        v_.emplace_back(p.numel(), 0.0);
    }
}

void Adam::step(double learning_rate) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        nd::Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        const auto g = p.grad();
        auto w = p.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t j = 0; j < w.size(); ++j) {
            m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
            v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
            w[j] -= static_cast<float>(learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_));
        }
        p.zero_grad();
    }
}

// ===========================================================================
// Teacher

TrainResult train_teacher(const std::vector<data::SamplePair>& train, const rec::RecognizerConfig& config,
                          const TrainConfig& tc, std::ostream* log) {
    if (train.empty()) throw ContractError("train_teacher: empty dataset");
    tc.validate();
    TrainResult result{rec::Recognizer(config, derive_seed(tc.seed, 0)), {}};
    Adam opt(trainable(result.model));
    const auto bs = static_cast<std::size_t>(tc.batch_size);
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const double lr = tc.learning_rate_at(epoch);
        const auto order = shuffled(train.size(), derive_seed(tc.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        EpochMetrics m{epoch + 1};
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += bs, ++batches) {
            const std::span<const std::size_t> idx(order.data() + b, std::min(bs, order.size() - b));
            nd::GradTape tape;
            const nd::Tensor logits = result.model.forward(batch_images(train, idx, Resolution::hr)).logits;
            distill::LossTerms terms;
            terms.ce = rec::cross_entropy_loss(logits, encode_labels(train, idx));
            const nd::Tensor total = distill::total_loss(terms, tc.weights);
            check_finite(terms, total, epoch + 1, batches);
            tape.backward(total);
            opt.step(lr);
            m.total += total.item();
            m.ce += terms.ce.item();
        }
        m.total /= static_cast<double>(batches);
        m.ce /= static_cast<double>(batches);
        result.history.push_back(m);
        log_epoch(log, "teacher", m, lr,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    result.model.set_trainable(false);
    return result;
}

// ===========================================================================
// Distillation

std::vector<TeacherTargets> teacher_targets(const rec::Recognizer& teacher, const std::vector<data::SamplePair>& samples,
                                            const distill::DistillWeights& w, Resolution input) {
    std::vector<TeacherTargets> out(samples.size());
    const int T = teacher.config().max_seq_len;
    const std::size_t chunks = (samples.size() + kEvalBatch - 1) / kEvalBatch;
    parallel_for(chunks, [&](std::size_t c) {
        nd::NoGradGuard no_grad;
        std::vector<std::size_t> idx;
        for (std::size_t i = c * kEvalBatch; i < std::min(samples.size(), (c + 1) * kEvalBatch); ++i) idx.push_back(i);
        const rec::RecognizerOutputs o = teacher.forward(batch_images(samples, idx, input));
        const nd::Tensor feats = distill::normalize_features(o.features);
        const auto labels = encode_labels(samples, idx);
        const std::vector<int> lengths = distill::valid_lengths(labels, T);
        const nd::Tensor mask = distill::teacher_mask(o.attention, lengths);
        const auto soft = distill::teacher_soft_labels(o.logits, w, lengths);
        const int N = static_cast<int>(idx.size());
        auto slice = [&](const nd::Tensor& t, int n) {
            nd::Shape s = t.shape();
            const std::size_t per = t.numel() / static_cast<std::size_t>(N);
            s[0] = 1;
            const auto d = t.data().subspan(static_cast<std::size_t>(n) * per, per);
            return nd::Tensor(s, std::vector<float>(d.begin(), d.end()));
        };
        for (int n = 0; n < N; ++n) {
            TeacherTargets& tt = out[idx[static_cast<std::size_t>(n)]];
            tt.features = slice(feats, n);
            tt.mask = slice(mask, n);
            tt.semantics = slice(o.semantics, n);
            tt.soft_label = soft[static_cast<std::size_t>(n)].revised;
        }
    });
    return out;
}

namespace {

nd::Tensor stack_rows(const std::vector<const TeacherTargets*>& targets, nd::Tensor TeacherTargets::*field) {
    const nd::Tensor& first = (*targets.front()).*field;
    nd::Shape s = first.shape();
    s[0] = static_cast<int>(targets.size());
    std::vector<float> v;
    v.reserve(first.numel() * targets.size());
    for (const auto* t : targets) {
        const auto d = (t->*field).data();
        v.insert(v.end(), d.begin(), d.end());
    }
    return nd::Tensor(s, std::move(v));
}

}  // namespace

distill::LossTerms distill_terms(const rec::Recognizer& student, const nd::Tensor& student_images,
                                 const std::vector<const TeacherTargets*>& targets,
                                 const std::vector<std::vector<int>>& labels, const TrainConfig& tc) {
    const auto& w = tc.weights;
    const rec::RecognizerOutputs o = student.forward(student_images);
    distill::LossTerms terms;
    terms.ce = rec::cross_entropy_loss(o.logits, labels);
    if (tc.enabled.visual && w.lambda2 > 0.0) {
        terms.visual = distill::visual_focus_loss(stack_rows(targets, &TeacherTargets::features),
                                                  distill::normalize_features(o.features),
                                                  nd::reshape(stack_rows(targets, &TeacherTargets::mask),
                                                              {o.features.dim(0), o.features.dim(2), o.features.dim(3)}));
    }
    if (tc.enabled.semantic && w.lambda3 > 0.0) {
        terms.semantic = distill::semantic_contrastive_loss(stack_rows(targets, &TeacherTargets::semantics),
                                                            o.semantics,
                                                            distill::valid_lengths(labels, o.semantics.dim(1)),
                                                            w.tau_semantic);
    }
    if (tc.enabled.logits && w.lambda4 > 0.0) {
        std::vector<seq::StepDistributions> soft;
        soft.reserve(targets.size());
        for (const auto* t : targets) soft.push_back(t->soft_label);
        terms.logits = distill::soft_logits_loss(soft, o.logits, w.tau_logits);
    }
    return terms;
}

TrainResult distill_student(const std::vector<data::SamplePair>& train, const rec::Recognizer& teacher,
                            const rec::RecognizerConfig& student_config, const TrainConfig& tc, std::ostream* log) {
    if (train.empty()) throw ContractError("distill_student: empty dataset");
    tc.validate();
    rec::require_feature_parity(teacher.config(), student_config);

    std::vector<std::vector<float>> frozen;
    for (const auto& p : teacher.parameters()) frozen.emplace_back(p.tensor.data().begin(), p.tensor.data().end());

    // The teacher is frozen, so its per-sample outputs are computed once up front.
    const std::vector<TeacherTargets> cache = teacher_targets(teacher, train, tc.weights);

    TrainResult result{tc.student_from_teacher ? teacher.copy(student_config)
                                               : rec::Recognizer(student_config, derive_seed(tc.seed, 0)),
                       {}};
    Adam opt(trainable(result.model));
    const auto bs = static_cast<std::size_t>(tc.batch_size);
    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        const double lr = tc.learning_rate_at(epoch);
        const auto order = shuffled(train.size(), derive_seed(tc.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        EpochMetrics m{epoch + 1};
        std::size_t batches = 0;
        for (std::size_t b = 0; b < order.size(); b += bs, ++batches) {
            const std::span<const std::size_t> idx(order.data() + b, std::min(bs, order.size() - b));
            std::vector<const TeacherTargets*> targets;
            for (std::size_t i : idx) targets.push_back(&cache[i]);
            nd::GradTape tape;
            const distill::LossTerms terms = distill_terms(result.model, batch_images(train, idx, Resolution::lr),
                                                           targets, encode_labels(train, idx), tc);
            const nd::Tensor total = distill::total_loss(terms, tc.weights);
            check_finite(terms, total, epoch + 1, batches);
            tape.backward(total);
            opt.step(lr);
            m.total += total.item();
            m.ce += value_or_zero(terms.ce);
            m.visual += value_or_zero(terms.visual);
            m.semantic += value_or_zero(terms.semantic);
            m.logits += value_or_zero(terms.logits);
        }
        for (double* v : {&m.total, &m.ce, &m.visual, &m.semantic, &m.logits}) *v /= static_cast<double>(batches);
        result.history.push_back(m);
        log_epoch(log, "student", m, lr,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }
    result.model.set_trainable(false);

    for (std::size_t i = 0; i < frozen.size(); ++i) {
        const auto now = teacher.parameters()[i].tensor.data();
        if (!std::equal(now.begin(), now.end(), frozen[i].begin(), frozen[i].end())) {
            throw StateError("teacher weight '" + teacher.parameters()[i].name + "' changed during distillation");
        }
    }
    return result;
}

// ===========================================================================
// Evaluation

double EvalReport::accuracy(data::Subset s) const {
    const auto i = static_cast<std::size_t>(s);
    return count[i] == 0 ? 0.0 : static_cast<double>(correct[i]) / count[i];
}

double EvalReport::average() const {
    const int n = samples();
    return n == 0 ? 0.0 : static_cast<double>(correct[0] + correct[1] + correct[2]) / n;
}

namespace {
std::string lowercase(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}
}  // namespace

EvalReport score_predictions(const std::vector<std::string>& predictions, const std::vector<data::SamplePair>& samples) {
    if (samples.empty()) throw ContractError("evaluation split is empty");
    if (predictions.size() != samples.size()) throw DimensionError("one prediction per sample required");
    EvalReport r;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto s = static_cast<std::size_t>(samples[i].subset);
        ++r.count[s];
        if (lowercase(predictions[i]) == lowercase(samples[i].text)) ++r.correct[s];
    }
    return r;
}

std::vector<std::string> predict_all(const rec::Recognizer& model, const std::vector<data::SamplePair>& samples,
                                     Resolution input) {
    std::vector<std::string> out(samples.size());
    const std::size_t chunks = (samples.size() + kEvalBatch - 1) / kEvalBatch;
    parallel_for(chunks, [&](std::size_t c) {
        std::vector<std::size_t> idx;
        for (std::size_t i = c * kEvalBatch; i < std::min(samples.size(), (c + 1) * kEvalBatch); ++i) idx.push_back(i);
        const auto preds = model.predict(batch_images(samples, idx, input));
        for (std::size_t j = 0; j < idx.size(); ++j) out[idx[j]] = preds[j];
    });
    return out;
}

EvalReport evaluate(const rec::Recognizer& model, const std::vector<data::SamplePair>& samples, Resolution input) {
    if (samples.empty()) throw ContractError("evaluation split is empty");
    EvalReport r = score_predictions(predict_all(model, samples, input), samples);
    r.parameter_count = model.parameter_count();
    return r;
}

std::vector<SweepRow> robustness_sweep(const rec::Recognizer& model, const std::vector<data::SamplePair>& heldout,
                                       const std::vector<double>& blur_grid, const std::vector<double>& noise_grid,
                                       std::uint64_t seed) {
    if (heldout.empty()) throw ContractError("robustness_sweep: empty held-out set");
    for (const auto* grid : {&blur_grid, &noise_grid}) {
        if (grid->empty()) throw ContractError("robustness_sweep: grids must be nonempty");
        if (!std::is_sorted(grid->begin(), grid->end())) throw ContractError("robustness_sweep: grids must be nondecreasing");
        if (grid->front() < 0.0) throw ContractError("robustness_sweep: levels must be non-negative");
    }
    std::vector<SweepRow> rows;
    auto run = [&](const std::string& axis, double level) {
        std::vector<data::SamplePair> degraded = heldout;
        for (std::size_t i = 0; i < degraded.size(); ++i) {
            data::DegradationSpec spec;
            spec.blur_sigma = axis == "blur" ? static_cast<float>(level) : 0.0f;
            spec.noise_std = axis == "noise" ? static_cast<float>(level) : 0.0f;
            spec.seed = derive_seed(seed, i);
            degraded[i].lr = data::quantize(data::degrade(degraded[i].hr, spec));
            degraded[i].degradation = spec;
        }
        rows.push_back({axis, level, evaluate(model, degraded, Resolution::lr).average()});
    };
    for (double level : blur_grid) run("blur", level);
    for (double level : noise_grid) run("noise", level);
    return rows;
}

// ===========================================================================
// Reports

std::string metrics_csv(const std::vector<EpochMetrics>& history) {
    std::ostringstream os;
    os << "epoch,loss_total,loss_ce,loss_visual,loss_semantic,loss_logits\n" << std::setprecision(9);
    for (const auto& m : history)
        os << m.epoch << ',' << m.total << ',' << m.ce << ',' << m.visual << ',' << m.semantic << ',' << m.logits << '\n';
    return os.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "axis,level,accuracy\n" << std::setprecision(9);
    for (const auto& r : rows) os << r.axis << ',' << r.level << ',' << r.accuracy << '\n';
    return os.str();
}

std::string report_text(const EvalReport& r) {
    std::ostringstream os;
    os << std::setprecision(9);
    for (auto s : {data::Subset::easy, data::Subset::medium, data::Subset::hard}) {
        os << "accuracy_" << data::subset_name(s) << " = " << r.accuracy(s) << '\n';
        os << "count_" << data::subset_name(s) << " = " << r.count[static_cast<std::size_t>(s)] << '\n';
    }
    os << "accuracy_average = " << r.average() << '\n';
    os << "samples = " << r.samples() << '\n';
    os << "parameters = " << r.parameter_count << '\n';
    return os.str();
}

}  // namespace kdlt::harness

#include "kdlt/recognizer.hpp"

#include <algorithm>
#include <cmath>

#include "kdlt/rng.hpp"

namespace kdlt::rec {

// ===========================================================================
// Alphabet

namespace alphabet {

bool contains(char c) { return kSymbols.find(c) != std::string_view::npos; }

int index_of(char c) {
    const auto pos = kSymbols.find(c);
    if (pos == std::string_view::npos) throw ContractError(std::string("character outside alphabet: '") + c + "'");
    return static_cast<int>(pos) + 1;
}

char symbol_of(int index) {
    if (index <= 0 || index > static_cast<int>(kSymbols.size())) throw ContractError("symbol index out of range");
    return kSymbols[static_cast<std::size_t>(index - 1)];
}

std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size() + 1);
    for (char c : text) out.push_back(index_of(c));
    out.push_back(kEndMarker);
    return out;
}

std::string decode(std::span<const int> indices) {
    std::string out;
    for (int i : indices) {
        if (i == kEndMarker) break;
        out.push_back(symbol_of(i));
    }
    return out;
}

}  // namespace alphabet

// ===========================================================================
// Config

RecognizerConfig RecognizerConfig::teacher() { return RecognizerConfig{}; }

RecognizerConfig RecognizerConfig::student() {
    RecognizerConfig c;
    c.input_height = 16;
    c.input_width = 64;
    c.first_conv_stride = 1;
    return c;
}

nd::Shape RecognizerConfig::feature_shape() const {
    int h = nd::conv_out_extent(input_height, 3, first_conv_stride, 1);
    int w = nd::conv_out_extent(input_width, 3, first_conv_stride, 1);
    for (int i = 0; i < 2; ++i) {
        h = nd::conv_out_extent(h, 3, 2, 1);
        w = nd::conv_out_extent(w, 3, 2, 1);
    }
    return {channels, h, w};
}

void RecognizerConfig::validate() const {
    if (input_height <= 0 || input_width <= 0 || channels <= 0 || stem_channels1 <= 0 || stem_channels2 <= 0) {
        throw ConfigError("recognizer extents must be positive");
    }
    if (max_seq_len < 2) throw ConfigError("max_seq_len must leave room for the end-marker");
    if (alphabet_size < 2) throw ConfigError("alphabet needs the end-marker and at least one symbol");
    if (first_conv_stride < 1) throw ConfigError("first_conv_stride must be positive");
    if (refine_convs < 0) throw ConfigError("refine_convs must be non-negative");
    (void)feature_shape();
}

void require_feature_parity(const RecognizerConfig& teacher, const RecognizerConfig& student) {
    teacher.validate();
    student.validate();
    if (teacher.feature_shape() != student.feature_shape()) {
        throw ConfigError("teacher features " + nd::shape_str(teacher.feature_shape()) +
                          " differ from student features " + nd::shape_str(student.feature_shape()));
    }
    if (teacher.max_seq_len != student.max_seq_len || teacher.alphabet_size != student.alphabet_size ||
        teacher.stem_channels1 != student.stem_channels1 || teacher.stem_channels2 != student.stem_channels2 ||
        teacher.refine_convs != student.refine_convs) {
        throw ConfigError("teacher and student disagree on sequence length, alphabet or stem widths");
    }
}

std::vector<std::pair<std::string, nd::Shape>> parameter_layout(const RecognizerConfig& c) {
    const nd::Shape fs = c.feature_shape();
    const int C = c.channels, S = fs[1] * fs[2];
    std::vector<std::pair<std::string, nd::Shape>> layout{
        {"conv1.weight", {c.stem_channels1, 1, 3, 3}},
        {"conv1.bias", {c.stem_channels1}},
        {"conv2.weight", {c.stem_channels2, c.stem_channels1, 3, 3}},
        {"conv2.bias", {c.stem_channels2}},
        {"conv3.weight", {C, c.stem_channels2, 3, 3}},
        {"conv3.bias", {C}},
    };
    for (int i = 0; i < c.refine_convs; ++i) {
        const std::string prefix = "conv" + std::to_string(4 + i);
        layout.push_back({prefix + ".weight", {C, C, 3, 3}});
        layout.push_back({prefix + ".bias", {C}});
    }
    layout.insert(layout.end(), {
        {"pos_embed", {S, C}},
        {"key.weight", {C, C}},
        {"key.bias", {C}},
        {"value.weight", {C, C}},
        {"value.bias", {C}},
        {"query", {c.max_seq_len, C}},
        {"decoder.weight", {C, c.alphabet_size}},
        {"decoder.bias", {c.alphabet_size}},
    });
    return layout;
}

// ===========================================================================
// Recognizer

namespace {

nd::Tensor init_param(const std::string& name, const nd::Shape& shape, SplitMix64& rng) {
    std::vector<float> v(nd::shape_numel(shape), 0.0f);
    double stddev = 0.0;
    if (name.ends_with(".bias")) {
        stddev = 0.0;
    } else if (name.starts_with("conv")) {
        const int fan_in = shape[1] * shape[2] * shape[3];
        stddev = std::sqrt(2.0 / fan_in);
    } else if (name == "pos_embed" || name == "query") {
        stddev = 1.0;
    } else {
        stddev = 1.0 / std::sqrt(static_cast<double>(shape[0]));
    }
    if (stddev > 0.0)
        for (float& x : v) x = static_cast<float>(stddev * rng.normal());
    return nd::Tensor(shape, std::move(v), true);
}

}  // namespace

Recognizer::Recognizer(RecognizerConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    SplitMix64 rng(seed);
    for (auto& [name, shape] : parameter_layout(config_)) params_.push_back({name, init_param(name, shape, rng)});
}

Recognizer::Recognizer(RecognizerConfig config, std::vector<NamedTensor> weights) : config_(config) {
    config_.validate();
    const auto layout = parameter_layout(config_);
    if (weights.size() != layout.size()) {
        throw ConfigError("expected " + std::to_string(layout.size()) + " weight tensors, got " +
                          std::to_string(weights.size()));
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (weights[i].name != layout[i].first || weights[i].tensor.shape() != layout[i].second) {
            throw ConfigError("weight '" + weights[i].name + "' " + nd::shape_str(weights[i].tensor.shape()) +
                              " does not match expected '" + layout[i].first + "' " +
                              nd::shape_str(layout[i].second));
        }
    }
    params_ = std::move(weights);
}

const nd::Tensor& Recognizer::parameter(std::string_view name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw ContractError("no parameter named " + std::string(name));
}

nd::Tensor& Recognizer::parameter(std::string_view name) {
    return const_cast<nd::Tensor&>(std::as_const(*this).parameter(name));
}

std::size_t Recognizer::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void Recognizer::set_trainable(bool on) {
    for (auto& p : params_) p.tensor.set_requires_grad(on);
}

Recognizer Recognizer::copy(std::optional<RecognizerConfig> config_override) const {
    std::vector<NamedTensor> weights;
    for (const auto& p : params_) {
        nd::Tensor t = p.tensor.detach();
        t.set_requires_grad(p.tensor.requires_grad());
        weights.push_back({p.name, t});
    }
    return Recognizer(config_override.value_or(config_), std::move(weights));
}

nd::Tensor Recognizer::extract_features(const nd::Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != config_.input_height ||
        images.dim(3) != config_.input_width) {
        throw DimensionError("recognizer expects [N,1," + std::to_string(config_.input_height) + "," +
                             std::to_string(config_.input_width) + "] images, got " + nd::shape_str(images.shape()));
    }
    nd::Tensor x = nd::silu(nd::conv2d(images, parameter("conv1.weight"), parameter("conv1.bias"),
                                       config_.first_conv_stride, 1));
    x = nd::silu(nd::conv2d(x, parameter("conv2.weight"), parameter("conv2.bias"), 2, 1));
    x = nd::silu(nd::conv2d(x, parameter("conv3.weight"), parameter("conv3.bias"), 2, 1));
    for (int i = 0; i < config_.refine_convs; ++i) {
        const std::string prefix = "conv" + std::to_string(4 + i);
        x = nd::silu(nd::conv2d(x, parameter(prefix + ".weight"), parameter(prefix + ".bias"), 1, 1));
    }
    return x;
}

std::pair<nd::Tensor, nd::Tensor> Recognizer::attend_sequence(const nd::Tensor& features) const {
    if (features.rank() != 4) throw DimensionError("attend_sequence expects [N,C,h,w] features");
    const int N = features.dim(0), C = features.dim(1), h = features.dim(2), w = features.dim(3);
    const int S = h * w, T = config_.max_seq_len;
    if (C != config_.channels || nd::Shape{S, C} != parameter("pos_embed").shape()) {
        throw DimensionError("attend_sequence: features " + nd::shape_str(features.shape()) +
                             " do not match the recognizer's feature layout");
    }
    // [N,C,S] -> [N,S,C]
    const nd::Tensor tokens = nd::transpose_last2(nd::reshape(features, {N, C, S}));
    const nd::Tensor positioned = nd::add_broadcast(tokens, parameter("pos_embed"));
    const nd::Tensor keys = nd::add_broadcast(
        nd::matmul(nd::reshape(positioned, {N * S, C}), parameter("key.weight")), parameter("key.bias"));
    const nd::Tensor values = nd::add_broadcast(
        nd::matmul(nd::reshape(tokens, {N * S, C}), parameter("value.weight")), parameter("value.bias"));
    // scores [N*S,T] -> [N,T,S]
    const nd::Tensor scores = nd::transpose_last2(
        nd::reshape(nd::matmul(keys, nd::transpose_last2(parameter("query"))), {N, S, T}));
    const nd::Tensor attention = nd::softmax(nd::scale(scores, 1.0f / std::sqrt(static_cast<float>(C))), 2);
    const nd::Tensor semantics = nd::bmm(attention, nd::reshape(values, {N, S, C}));
    return {semantics, nd::reshape(attention, {N, T, h, w})};
}

nd::Tensor Recognizer::decode_logits(const nd::Tensor& semantics) const {
    if (semantics.rank() != 3 || semantics.dim(2) != config_.channels) {
        throw DimensionError("decode_logits expects [N,T,C] semantics");
    }
    const int N = semantics.dim(0), T = semantics.dim(1), C = semantics.dim(2);
    const nd::Tensor flat = nd::add_broadcast(
        nd::matmul(nd::reshape(semantics, {N * T, C}), parameter("decoder.weight")), parameter("decoder.bias"));
    return nd::reshape(flat, {N, T, config_.alphabet_size});
}

RecognizerOutputs Recognizer::forward(const nd::Tensor& images) const {
    RecognizerOutputs out;
    out.features = extract_features(images);
    std::tie(out.semantics, out.attention) = attend_sequence(out.features);
    out.logits = decode_logits(out.semantics);
    return out;
}

std::vector<std::string> Recognizer::predict(const nd::Tensor& images) const {
    nd::NoGradGuard no_grad;
    const nd::Tensor logits = forward(images).logits;
    const int N = logits.dim(0), T = logits.dim(1), A = logits.dim(2);
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(N));
    std::vector<int> best(static_cast<std::size_t>(T));
    for (int n = 0; n < N; ++n) {
        for (int t = 0; t < T; ++t) {
            const float* row = logits.data().data() + (static_cast<std::size_t>(n) * T + t) * A;
            best[t] = static_cast<int>(std::max_element(row, row + A) - row);
        }
        out.push_back(alphabet::decode(best));
    }
    return out;
}

// ===========================================================================
// Loss and batching

nd::Tensor cross_entropy_loss(const nd::Tensor& logits, const std::vector<std::vector<int>>& targets) {
    if (logits.rank() != 3) throw DimensionError("cross_entropy_loss expects [N,T,A] logits");
    const int N = logits.dim(0), T = logits.dim(1), A = logits.dim(2);
    if (targets.size() != static_cast<std::size_t>(N)) throw DimensionError("one target per sample required");
    std::vector<int> rows, labels;
    for (int n = 0; n < N; ++n) {
        const auto& tgt = targets[static_cast<std::size_t>(n)];
        if (tgt.empty()) throw ContractError("empty label sequence (fully masked sample)");
        if (tgt.size() > static_cast<std::size_t>(T)) throw ContractError("label longer than max_seq_len");
        if (tgt.back() != alphabet::kEndMarker) throw ContractError("label must end with the end-marker");
        for (std::size_t t = 0; t < tgt.size(); ++t) {
            if (tgt[t] < 0 || tgt[t] >= A) throw ContractError("label index outside the alphabet");
            rows.push_back(n * T + static_cast<int>(t));
            labels.push_back(tgt[t]);
        }
    }
    const nd::Tensor logp = nd::log_softmax(nd::select_rows(nd::reshape(logits, {N * T, A}), rows), 1);
    return nd::neg(nd::mean(nd::gather_last(logp, labels, 1)));
}

nd::Tensor stack_images(const std::vector<const std::vector<float>*>& images, int height, int width) {
    if (images.empty()) throw ContractError("stack_images: empty batch");
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    std::vector<float> v;
    v.reserve(images.size() * plane);
    for (const auto* img : images) {
        if (img->size() != plane) throw DimensionError("stack_images: image size mismatch");
        v.insert(v.end(), img->begin(), img->end());
    }
    return nd::Tensor({static_cast<int>(images.size()), 1, height, width}, std::move(v));
}

}  // namespace kdlt::rec

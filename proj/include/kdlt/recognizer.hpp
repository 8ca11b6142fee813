#pragma once

// Attention-based encoder-decoder text recognizer.
//
//   images [N,1,H,W]
//     -> three conv3x3 + SiLU blocks (strides s1, 2, 2)
//     -> refine_convs stride-1 conv3x3 + SiLU layers         features F [N,C,h,w]
//     -> keys (F + positional embedding) and values from F
//     -> H = softmax(Q K^T / sqrt(C)) V with learned position queries Q [T,C]
//     -> linear decoder                                      logits [N,T,|A|]
//
// The same architecture serves as HR teacher (32x128, first stride 2) and LR
// student (16x64, first stride 1); both produce identically shaped features.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "kdlt/errors.hpp"
#include "kdlt/ndgrad.hpp"

namespace kdlt::rec {

// Index 0 is the end-marker, 1..26 are 'a'..'z', 27..36 are '0'..'9'.
namespace alphabet {
inline constexpr int kEndMarker = 0;
inline constexpr int kSize = 37;
inline constexpr std::string_view kSymbols = "abcdefghijklmnopqrstuvwxyz0123456789";

bool contains(char c);
int index_of(char c);   // throws ContractError for characters outside the alphabet
char symbol_of(int index);
// Symbol indices followed by the end-marker.
std::vector<int> encode(std::string_view text);
// Symbols up to the first end-marker.
std::string decode(std::span<const int> indices);
}  // namespace alphabet

struct RecognizerConfig {
    int input_height = 32;
    int input_width = 128;
    int channels = 64;
    int max_seq_len = 12;
    int alphabet_size = alphabet::kSize;
    int first_conv_stride = 2;
    int stem_channels1 = 32;  // output channels of the first block
    int stem_channels2 = 64;  // output channels of the second block
    int refine_convs = 1;     // stride-1 conv3x3 + SiLU layers after the third block

    static RecognizerConfig teacher();
    static RecognizerConfig student();

    // [C, h, w] after the three blocks.
    nd::Shape feature_shape() const;
    void validate() const;

    bool operator==(const RecognizerConfig&) const = default;
};

// Throws ConfigError unless both configs produce the same feature, sequence and alphabet shapes.
void require_feature_parity(const RecognizerConfig& teacher, const RecognizerConfig& student);

struct RecognizerOutputs {
    nd::Tensor features;   // [N,C,h,w]
    nd::Tensor attention;  // [N,T,h,w]
    nd::Tensor semantics;  // [N,T,C]
    nd::Tensor logits;     // [N,T,|A|]
};

struct NamedTensor {
    std::string name;
    nd::Tensor tensor;
};

class Recognizer {
public:
    // Random initialization from `seed`.
    Recognizer(RecognizerConfig config, std::uint64_t seed);
    // Adopts existing weights; names and shapes must match the architecture.
    Recognizer(RecognizerConfig config, std::vector<NamedTensor> weights);

    const RecognizerConfig& config() const { return config_; }

    nd::Tensor extract_features(const nd::Tensor& images) const;
    // Returns (H [N,T,C], M [N,T,h,w]).
    std::pair<nd::Tensor, nd::Tensor> attend_sequence(const nd::Tensor& features) const;
    nd::Tensor decode_logits(const nd::Tensor& semantics) const;
    RecognizerOutputs forward(const nd::Tensor& images) const;

    // Greedy per-step argmax, cut at the first end-marker.
    std::vector<std::string> predict(const nd::Tensor& images) const;

    std::vector<NamedTensor>& parameters() { return params_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }
    const nd::Tensor& parameter(std::string_view name) const;
    nd::Tensor& parameter(std::string_view name);
    std::size_t parameter_count() const;
    void set_trainable(bool on);

    // Value copy with the same config; `config_override` may change input geometry and stride.
    Recognizer copy(std::optional<RecognizerConfig> config_override = std::nullopt) const;

private:
    RecognizerConfig config_;
    std::vector<NamedTensor> params_;
};

// Names and shapes every recognizer with `config` carries, in checkpoint order.
std::vector<std::pair<std::string, nd::Shape>> parameter_layout(const RecognizerConfig& config);

// Mean negative log-likelihood over unmasked steps. Each target holds symbol
// indices terminated by the end-marker; steps past it are ignored.
nd::Tensor cross_entropy_loss(const nd::Tensor& logits, const std::vector<std::vector<int>>& targets);

// Packs grayscale images (row-major, values in [0,1]) of equal size into [N,1,H,W].
nd::Tensor stack_images(const std::vector<const std::vector<float>*>& images, int height, int width);

}  // namespace kdlt::rec

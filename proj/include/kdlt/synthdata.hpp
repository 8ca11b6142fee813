#pragma once

// Synthetic paired HR/LR text images.
//
// HR images are 32x128 renderings of an embedded 8x16 bitmap font. LR images
// are derived from the (8-bit quantized) HR image by Gaussian blur,
// antialiased bicubic x1/2 downscale to 16x64, additive Gaussian noise and
// clamping. All randomness flows from SplitMix64 seeds recorded in the manifest.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "kdlt/errors.hpp"

namespace kdlt::data {

inline constexpr int kHrHeight = 32;
inline constexpr int kHrWidth = 128;
inline constexpr int kLrHeight = 16;
inline constexpr int kLrWidth = 64;
inline constexpr int kMaxTextLength = 10;
inline constexpr int kGlyphAdvance = 12;

struct Image {
    int height = 0;
    int width = 0;
    std::vector<float> pixels;  // row-major, values in [0, 1]

    float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
    bool operator==(const Image&) const = default;
};

namespace font {
inline constexpr int kGlyphWidth = 8;
inline constexpr int kGlyphHeight = 16;
// Rows top to bottom, most significant bit is the leftmost pixel.
const std::array<std::uint8_t, kGlyphHeight>& glyph(char c);
int ink_pixels(char c);
}  // namespace font

enum class Subset { easy, medium, hard };

std::string_view subset_name(Subset s);
Subset parse_subset(std::string_view name);

struct SeverityBand {
    float blur_lo, blur_hi, noise_lo, noise_hi;
};
SeverityBand severity_band(Subset s);

struct DegradationSpec {
    int downscale = 2;
    float blur_sigma = 0.0f;
    float noise_std = 0.0f;
    std::uint64_t seed = 0;
};

// Throws ContractError for empty text, text longer than kMaxTextLength, or
// characters outside the alphabet.
Image render_text(std::string_view text, std::uint64_t seed);

Image gaussian_blur(const Image& img, float sigma);
Image bicubic_downscale2(const Image& img);
Image degrade(const Image& hr, const DegradationSpec& spec);
// Snaps every pixel to the nearest of 256 levels, as stored in an 8-bit PNG.
Image quantize(const Image& img);

void write_png(const std::filesystem::path& path, const Image& img);
Image read_png(const std::filesystem::path& path);

struct SampleRecord {
    std::string hr_path;  // relative to the manifest's directory
    std::string lr_path;
    std::string text;
    Subset subset = Subset::easy;
    float blur_sigma = 0.0f;
    float noise_std = 0.0f;
    std::uint64_t seed = 0;

    DegradationSpec degradation() const;
};

struct SamplePair {
    Image hr;
    Image lr;
    std::string text;
    Subset subset = Subset::easy;
    DegradationSpec degradation;
};

struct Manifest {
    std::filesystem::path root;  // directory the record paths are relative to
    std::vector<SampleRecord> records;
};

// Largest-remainder split of n into subset counts; ties go to the earlier subset.
std::array<int, 3> stratify_counts(int n, const std::array<double, 3>& ratios);

// Sample `index` of the dataset rooted at `seed`; a pure function of its arguments.
SamplePair make_sample(std::uint64_t seed, int index, Subset subset, SampleRecord* record = nullptr);

// Writes <out>/manifest.tsv, <out>/hr/*.png, <out>/lr/*.png. Refuses to replace
// an existing manifest unless `force`.
Manifest generate_dataset(const std::filesystem::path& out_dir, int n, const std::array<double, 3>& ratios,
                          std::uint64_t seed, bool force = false);

std::string format_manifest_line(const SampleRecord& r);
Manifest load_manifest(const std::filesystem::path& path);
std::vector<SamplePair> load_samples(const Manifest& manifest);

}  // namespace kdlt::data

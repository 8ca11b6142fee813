#include "kdlt/synthdata.hpp"

#include <png.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kdlt/parallel.hpp"
#include "kdlt/recognizer.hpp"
#include "kdlt/rng.hpp"

namespace fs = std::filesystem;

namespace kdlt::data {

std::string_view subset_name(Subset s) {
    switch (s) {
        case Subset::easy: return "easy";
        case Subset::medium: return "medium";
        case Subset::hard: return "hard";
    }
    return "easy";
}

Subset parse_subset(std::string_view name) {
    if (name == "easy") return Subset::easy;
    if (name == "medium") return Subset::medium;
    if (name == "hard") return Subset::hard;
    throw ParseError("unknown subset '" + std::string(name) + "'");
}

SeverityBand severity_band(Subset s) {
    switch (s) {
        case Subset::easy: return {0.0f, 0.5f, 0.0f, 0.02f};
        case Subset::medium: return {0.5f, 1.2f, 0.02f, 0.05f};
        case Subset::hard: return {1.2f, 2.0f, 0.05f, 0.1f};
    }
    return {0.0f, 0.0f, 0.0f, 0.0f};
}

// ===========================================================================
// Rendering and degradation

Image render_text(std::string_view text, std::uint64_t seed) {
    if (text.empty()) throw ContractError("render_text: empty text");
    if (text.size() > static_cast<std::size_t>(kMaxTextLength)) {
        throw ContractError("render_text: '" + std::string(text) + "' exceeds " + std::to_string(kMaxTextLength) +
                            " characters");
    }
    for (char c : text)
        if (!rec::alphabet::contains(c)) throw ContractError(std::string("render_text: unsupported character '") + c + "'");

    SplitMix64 rng(seed);
    // Dark ink on a light background; both levels vary.
    const float ink = static_cast<float>(rng.uniform(0.05, 0.35));
    const float background = static_cast<float>(rng.uniform(0.65, 0.95));
    const int x0 = 4;
    const int y0 = 7 + static_cast<int>(rng.below(3));

    Image img{kHrHeight, kHrWidth, std::vector<float>(static_cast<std::size_t>(kHrHeight) * kHrWidth, background)};
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int dx = static_cast<int>(rng.below(3)) - 1;
        const int dy = static_cast<int>(rng.below(3)) - 1;
        const int gx = x0 + static_cast<int>(i) * kGlyphAdvance + dx;
        const int gy = y0 + dy;
        const auto& rows = font::glyph(text[i]);
        for (int r = 0; r < font::kGlyphHeight; ++r)
            for (int c = 0; c < font::kGlyphWidth; ++c)
                if (rows[static_cast<std::size_t>(r)] & (0x80u >> c))
                    img.pixels[static_cast<std::size_t>(gy + r) * kHrWidth + gx + c] = ink;
    }
    return img;
}

Image gaussian_blur(const Image& img, float sigma) {
    if (sigma <= 0.0f) return img;
    const int radius = static_cast<int>(std::ceil(3.0f * sigma));
    std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double w = std::exp(-0.5 * (i * i) / (static_cast<double>(sigma) * sigma));
        kernel[static_cast<std::size_t>(i + radius)] = w;
        total += w;
    }
    for (double& w : kernel) w /= total;

    const int H = img.height, W = img.width;
    auto clamp_idx = [](int v, int n) { return std::clamp(v, 0, n - 1); };
    std::vector<float> tmp(img.pixels.size());
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] * img.at(y, clamp_idx(x + i, W));
            tmp[static_cast<std::size_t>(y) * W + x] = static_cast<float>(acc);
        }
    Image out{H, W, std::vector<float>(img.pixels.size())};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i)
                acc += kernel[static_cast<std::size_t>(i + radius)] *
                       tmp[static_cast<std::size_t>(clamp_idx(y + i, H)) * W + x];
            out.pixels[static_cast<std::size_t>(y) * W + x] = static_cast<float>(acc);
        }
    return out;
}

Image bicubic_downscale2(const Image& img) {
    // Keys kernel (a = -0.5) stretched by the scale factor, so it also
    // low-passes: k(d / 2) / 2 at input offsets d = 0.5, 1.5, 2.5, 3.5.
    // Without the stretch, sharp glyph edges alias.
    constexpr std::array<double, 8> taps{-0.01171875, -0.03515625, 0.11328125, 0.43359375,
                                         0.43359375,  0.11328125,  -0.03515625, -0.01171875};
    const int H = img.height / 2, W = img.width / 2;
    Image out{H, W, std::vector<float>(static_cast<std::size_t>(H) * W)};
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            double acc = 0.0;
            for (int i = 0; i < 8; ++i) {
                const int sy = std::clamp(2 * y - 3 + i, 0, img.height - 1);
                double row = 0.0;
                for (int j = 0; j < 8; ++j) row += taps[static_cast<std::size_t>(j)] * img.at(sy, std::clamp(2 * x - 3 + j, 0, img.width - 1));
                acc += taps[static_cast<std::size_t>(i)] * row;
            }
            out.pixels[static_cast<std::size_t>(y) * W + x] = static_cast<float>(acc);
        }
    return out;
}

Image degrade(const Image& hr, const DegradationSpec& spec) {
    if (spec.downscale != 2) throw ContractError("degrade: only x2 downscaling is supported");
    if (hr.height != kHrHeight || hr.width != kHrWidth) throw DimensionError("degrade expects a 32x128 HR image");
    if (spec.blur_sigma < 0.0f || spec.noise_std < 0.0f) throw ContractError("degrade: negative blur or noise");
    Image lr = bicubic_downscale2(gaussian_blur(hr, spec.blur_sigma));
    SplitMix64 rng(spec.seed);
    for (float& v : lr.pixels) {
        if (spec.noise_std > 0.0f) v += static_cast<float>(spec.noise_std * rng.normal());
        v = std::clamp(v, 0.0f, 1.0f);
    }
    return lr;
}

Image quantize(const Image& img) {
    Image out = img;
    for (float& v : out.pixels) v = std::round(std::clamp(v, 0.0f, 1.0f) * 255.0f) / 255.0f;
    return out;
}

// ===========================================================================
// PNG

void write_png(const fs::path& path, const Image& img) {
    std::vector<std::uint8_t> bytes(img.pixels.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0f, 1.0f) * 255.0f));
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(img.width);
    image.height = static_cast<png_uint_32>(img.height);
    image.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&image, path.c_str(), 0, bytes.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot write PNG " + path.string() + ": " + msg);
    }
}

Image read_png(const fs::path& path) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, path.c_str())) {
        throw IoError("cannot read PNG " + path.string() + ": " + image.message);
    }
    image.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
        const std::string msg = image.message;
        png_image_free(&image);
        throw IoError("cannot decode PNG " + path.string() + ": " + msg);
    }
    Image out{static_cast<int>(image.height), static_cast<int>(image.width), std::vector<float>(bytes.size())};
    for (std::size_t i = 0; i < bytes.size(); ++i) out.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
    return out;
}

// ===========================================================================
// Datasets

DegradationSpec SampleRecord::degradation() const {
    return DegradationSpec{2, blur_sigma, noise_std, derive_seed(seed, 2)};
}

std::array<int, 3> stratify_counts(int n, const std::array<double, 3>& ratios) {
    double total = 0.0;
    for (double r : ratios) {
        if (!(r >= 0.0)) throw ContractError("subset ratios must be non-negative");
        total += r;
    }
    if (total <= 0.0) throw ContractError("subset ratios must not all be zero");
    std::array<int, 3> counts{};
    std::array<double, 3> remainder{};
    int assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double exact = n * ratios[i] / total;
        counts[i] = static_cast<int>(std::floor(exact));
        remainder[i] = exact - counts[i];
        assigned += counts[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t i = 0; assigned < n; ++i, ++assigned) ++counts[order[i % 3]];
    return counts;
}

SamplePair make_sample(std::uint64_t seed, int index, Subset subset, SampleRecord* record) {
    const std::uint64_t sample_seed = derive_seed(seed, static_cast<std::uint64_t>(index));
    SplitMix64 rng(sample_seed);
    const int length = 1 + static_cast<int>(rng.below(kMaxTextLength));
    std::string text;
    for (int i = 0; i < length; ++i) text.push_back(rec::alphabet::kSymbols[rng.below(rec::alphabet::kSymbols.size())]);
    const SeverityBand band = severity_band(subset);
    SampleRecord r;
    r.text = text;
    r.subset = subset;
    r.blur_sigma = static_cast<float>(rng.uniform(band.blur_lo, band.blur_hi));
    r.noise_std = static_cast<float>(rng.uniform(band.noise_lo, band.noise_hi));
    r.seed = sample_seed;

    SamplePair pair;
    pair.hr = quantize(render_text(text, derive_seed(sample_seed, 1)));
    pair.degradation = r.degradation();
    pair.lr = quantize(degrade(pair.hr, pair.degradation));
    pair.text = text;
    pair.subset = subset;
    if (record) *record = r;
    return pair;
}

namespace {

std::string float_text(float v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string image_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06d.png", index);
    return buf;
}

}  // namespace

std::string format_manifest_line(const SampleRecord& r) {
    std::ostringstream os;
    os << r.hr_path << '\t' << r.lr_path << '\t' << r.text << '\t' << subset_name(r.subset) << '\t'
       << float_text(r.blur_sigma) << '\t' << float_text(r.noise_std) << '\t' << r.seed;
    return os.str();
}

Manifest generate_dataset(const fs::path& out_dir, int n, const std::array<double, 3>& ratios, std::uint64_t seed,
                          bool force) {
    if (n < 1) throw ContractError("generate_dataset: n must be at least 1");
    const fs::path manifest_path = out_dir / "manifest.tsv";
    std::error_code ec;
    if (fs::exists(manifest_path, ec) && !force) {
        throw IoError("refusing to overwrite " + manifest_path.string() + " (use --force)");
    }
    fs::create_directories(out_dir / "hr", ec);
    if (!ec) fs::create_directories(out_dir / "lr", ec);
    if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

    const auto counts = stratify_counts(n, ratios);
    Manifest manifest{out_dir, std::vector<SampleRecord>(static_cast<std::size_t>(n))};
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
        const int index = static_cast<int>(i);
        const Subset subset = index < counts[0]               ? Subset::easy
                              : index < counts[0] + counts[1] ? Subset::medium
                                                              : Subset::hard;
        SampleRecord& r = manifest.records[i];
        const SamplePair pair = make_sample(seed, index, subset, &r);
        r.hr_path = "hr/" + image_name(index);
        r.lr_path = "lr/" + image_name(index);
        write_png(out_dir / r.hr_path, pair.hr);
        write_png(out_dir / r.lr_path, pair.lr);
    });

    std::ofstream out(manifest_path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + manifest_path.string());
    for (const auto& r : manifest.records) out << format_manifest_line(r) << '\n';
    if (!out) throw IoError("failed writing " + manifest_path.string());
    return manifest;
}

Manifest load_manifest(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest " + path.string());
    Manifest manifest{path.parent_path(), {}};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (std::size_t tab; (tab = line.find('\t', start)) != std::string::npos; start = tab + 1)
            fields.push_back(line.substr(start, tab - start));
        fields.push_back(line.substr(start));
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (fields.size() != 7) {
            throw ParseError(where + ": expected 7 tab-separated fields, found " + std::to_string(fields.size()));
        }
        SampleRecord r;
        r.hr_path = fields[0];
        r.lr_path = fields[1];
        r.text = fields[2];
        if (r.text.empty() || r.text.size() > static_cast<std::size_t>(kMaxTextLength) ||
            !std::all_of(r.text.begin(), r.text.end(), rec::alphabet::contains)) {
            throw ParseError(where + ": invalid text '" + r.text + "'");
        }
        try {
            r.subset = parse_subset(fields[3]);
        } catch (const ParseError& e) {
            throw ParseError(where + ": " + e.what());
        }
        auto parse_float = [&](const std::string& s, const char* what) {
            float v = 0.0f;
            auto res = std::from_chars(s.data(), s.data() + s.size(), v);
            if (res.ec != std::errc() || res.ptr != s.data() + s.size() || v < 0.0f) {
                throw ParseError(where + ": malformed " + what + " '" + s + "'");
            }
            return v;
        };
        r.blur_sigma = parse_float(fields[4], "blur_sigma");
        r.noise_std = parse_float(fields[5], "noise_std");
        auto res = std::from_chars(fields[6].data(), fields[6].data() + fields[6].size(), r.seed);
        if (res.ec != std::errc() || res.ptr != fields[6].data() + fields[6].size()) {
            throw ParseError(where + ": malformed seed '" + fields[6] + "'");
        }
        for (const auto& rel : {r.hr_path, r.lr_path}) {
            if (!fs::exists(manifest.root / rel)) {
                throw IoError(where + ": record '" + r.text + "' references missing image " +
                              (manifest.root / rel).string());
            }
        }
        manifest.records.push_back(std::move(r));
    }
    return manifest;
}

std::vector<SamplePair> load_samples(const Manifest& manifest) {
    std::vector<SamplePair> out(manifest.records.size());
    parallel_for(out.size(), [&](std::size_t i) {
        const SampleRecord& r = manifest.records[i];
        SamplePair& p = out[i];
        p.hr = read_png(manifest.root / r.hr_path);
        p.lr = read_png(manifest.root / r.lr_path);
        if (p.hr.height != kHrHeight || p.hr.width != kHrWidth || p.lr.height != kLrHeight || p.lr.width != kLrWidth) {
            throw IoError("record '" + r.text + "': unexpected image dimensions");
        }
        p.text = r.text;
        p.subset = r.subset;
        p.degradation = r.degradation();
    });
    return out;
}

}  // namespace kdlt::data

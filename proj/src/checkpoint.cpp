#include "kdlt/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace kdlt::io {

namespace {

constexpr char kMagic[4] = {'K', 'D', 'L', 'T'};

class Writer {
public:
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }
    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void i32(int v) { uint(static_cast<std::uint32_t>(v)); }
    void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
    std::vector<std::uint8_t>& data() { return out_; }

private:
    std::vector<std::uint8_t> out_;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
    template <typename U>
    U uint() {
        need(sizeof(U));
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    int i32() { return static_cast<int>(uint<std::uint32_t>()); }
    float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
    std::string str(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    std::size_t remaining() const { return in_.size() - pos_; }

private:
    void need(std::size_t n) const {
        if (in_.size() - pos_ < n) throw CorruptionError("checkpoint truncated");
    }
    std::span<const std::uint8_t> in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.uint<std::uint16_t>(kCheckpointVersion);
    const auto& c = ckpt.config;
    for (int v : {c.input_height, c.input_width, c.channels, c.max_seq_len, c.alphabet_size, c.first_conv_stride,
                  c.stem_channels1, c.stem_channels2, c.refine_convs})
        w.i32(v);
    w.uint<std::uint32_t>(static_cast<std::uint32_t>(ckpt.weights.size()));
    for (const auto& [name, tensor] : ckpt.weights) {
        w.uint<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        w.bytes(name.data(), name.size());
        w.uint<std::uint8_t>(static_cast<std::uint8_t>(tensor.rank()));
        for (int d : tensor.shape()) w.i32(d);
        for (float v : tensor.data()) w.f32(v);
    }
    const std::uint64_t sum = fnv1a64(w.data());
    w.uint(sum);
    return std::move(w.data());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < sizeof kMagic + 2) {
        if (bytes.size() >= sizeof kMagic && std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
            throw FormatError("not a checkpoint (bad magic)");
        }
        throw CorruptionError("checkpoint truncated");
    }
    if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) throw FormatError("not a checkpoint (bad magic)");
    const std::uint16_t version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
    if (version != kCheckpointVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    if (bytes.size() < sizeof kMagic + 2 + 8) throw CorruptionError("checkpoint truncated");
    const auto body = bytes.first(bytes.size() - 8);
    Reader tail(bytes.last(8));
    if (tail.uint<std::uint64_t>() != fnv1a64(body)) throw CorruptionError("checkpoint checksum mismatch");

    Reader r(body);
    r.str(sizeof kMagic);
    r.uint<std::uint16_t>();
    Checkpoint ckpt;
    auto& c = ckpt.config;
    for (int* f : {&c.input_height, &c.input_width, &c.channels, &c.max_seq_len, &c.alphabet_size,
                   &c.first_conv_stride, &c.stem_channels1, &c.stem_channels2, &c.refine_convs})
        *f = r.i32();
    const std::uint32_t count = r.uint<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str(r.uint<std::uint16_t>());
        const int rank = r.uint<std::uint8_t>();
        nd::Shape shape;
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            const int extent = r.i32();
            if (extent <= 0) throw CorruptionError("checkpoint entry '" + name + "' has a non-positive extent");
            shape.push_back(extent);
            numel *= static_cast<std::size_t>(extent);
        }
        if (numel * 4 > r.remaining()) throw CorruptionError("checkpoint entry '" + name + "' truncated");
        std::vector<float> values(numel);
        for (float& v : values) v = r.f32();
        ckpt.weights.push_back({std::move(name), nd::Tensor(std::move(shape), std::move(values))});
    }
    if (r.remaining() != 0) throw CorruptionError("checkpoint has trailing bytes");
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const rec::Recognizer& model) {
    Checkpoint ckpt{model.config(), {}};
    for (const auto& p : model.parameters()) ckpt.weights.push_back({p.name, p.tensor.detach()});
    const auto bytes = encode_checkpoint(ckpt);
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("failed writing " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move checkpoint into " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

rec::Recognizer load_recognizer(const std::filesystem::path& path) {
    Checkpoint ckpt = load_checkpoint(path);
    try {
        return rec::Recognizer(ckpt.config, std::move(ckpt.weights));
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

}  // namespace kdlt::io

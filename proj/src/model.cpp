#include "ntml/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "ntml/error.hpp"

namespace ntml {

void ArchSpec::validate() const {
    if (num_classes < 2) throw ConfigError("arch: at least two classes required");
    if (input_channels < 1) throw ConfigError("arch: input_channels must be positive");
    if (hidden_dense < 1) throw ConfigError("arch: hidden_dense must be positive");
    if (conv_filters.empty()) throw ConfigError("arch: at least one conv block required");
    for (int f : conv_filters)
        if (f < 1) throw ConfigError("arch: filter counts must be positive");
    int side = input_size;
    for (std::size_t i = 0; i < conv_filters.size(); ++i) {
        if (side < 2 || side % 2 != 0)
            throw ConfigError("arch: spatial size must divide by 2 at every pool");
        side /= 2;
    }
    if (side < 1) throw ConfigError("arch: input too small for the block stack");
}

std::size_t ArchSpec::param_count() const {
    std::size_t count = 0;
    int in_c = input_channels;
    for (int f : conv_filters) {
        count += static_cast<std::size_t>(f) * in_c * 9 + f;
        in_c = f;
    }
    count += flat_dim() * hidden_dense + hidden_dense;
    count += static_cast<std::size_t>(hidden_dense) * num_classes + num_classes;
    return count;
}

std::vector<std::string> ArchSpec::tap_names() const {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < conv_filters.size(); ++i)
        names.push_back("conv" + std::to_string(i + 1));
    names.push_back("penultimate");
    return names;
}

std::string stage_name(Stage s) {
    switch (s) {
        case Stage::init: return "init";
        case Stage::tt: return "tt";
        case Stage::nt: return "nt";
        case Stage::ml_teacher: return "ml-teacher";
        case Stage::ml_student: return "ml-student";
        case Stage::ft: return "ft";
    }
    return "init";
}

ModelCheckpoint init_model(const ArchSpec& arch, Rng& rng) {
    arch.validate();
    ModelCheckpoint ckpt;
    ckpt.arch = arch;
    ckpt.params.assign(arch.param_count(), 0.0);

    std::size_t off = 0;
    auto fill_normal = [&](std::size_t count, double sd) {
        for (std::size_t i = 0; i < count; ++i) ckpt.params[off + i] = rng.normal(0.0, sd);
        off += count;
    };
    int in_c = arch.input_channels;
    for (int f : arch.conv_filters) {
        const std::size_t wcount = static_cast<std::size_t>(f) * in_c * 9;
        fill_normal(wcount, std::sqrt(2.0 / (in_c * 9.0)));
        off += f;  // biases stay zero
        in_c = f;
    }
    fill_normal(arch.flat_dim() * arch.hidden_dense, std::sqrt(2.0 / arch.flat_dim()));
    off += arch.hidden_dense;
    fill_normal(static_cast<std::size_t>(arch.hidden_dense) * arch.num_classes,
                std::sqrt(2.0 / arch.hidden_dense));
    off += arch.num_classes;
    return ckpt;
}

ModelParams ModelParams::from_checkpoint(const ModelCheckpoint& ckpt, bool trainable) {
    const ArchSpec& a = ckpt.arch;
    a.validate();
    if (ckpt.params.size() != a.param_count())
        throw UsageError("model: parameter vector does not match architecture");

    ModelParams p;
    p.arch = a;
    std::size_t off = 0;
    auto take = [&](std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        std::vector<double> vals(ckpt.params.begin() + off, ckpt.params.begin() + off + n);
        off += n;
        return trainable ? Tensor::param(std::move(shape), std::move(vals))
                         : Tensor::from_data(std::move(shape), std::move(vals));
    };
    int in_c = a.input_channels;
    for (int f : a.conv_filters) {
        p.conv_w.push_back(take({static_cast<std::size_t>(f), static_cast<std::size_t>(in_c), 3, 3}));
        p.conv_b.push_back(take({static_cast<std::size_t>(f)}));
        in_c = f;
    }
    p.fc1_w = take({a.flat_dim(), static_cast<std::size_t>(a.hidden_dense)});
    p.fc1_b = take({static_cast<std::size_t>(a.hidden_dense)});
    p.fc2_w = take({static_cast<std::size_t>(a.hidden_dense), static_cast<std::size_t>(a.num_classes)});
    p.fc2_b = take({static_cast<std::size_t>(a.num_classes)});
    return p;
}

std::vector<Tensor*> ModelParams::all() {
    std::vector<Tensor*> out;
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
        out.push_back(&conv_w[i]);
        out.push_back(&conv_b[i]);
    }
    out.push_back(&fc1_w);
    out.push_back(&fc1_b);
    out.push_back(&fc2_w);
    out.push_back(&fc2_b);
    return out;
}

std::vector<double> ModelParams::to_flat() const {
    std::vector<double> flat;
    flat.reserve(arch.param_count());
    auto append = [&](const Tensor& t) {
        flat.insert(flat.end(), t.values().begin(), t.values().end());
    };
    for (std::size_t i = 0; i < conv_w.size(); ++i) {
        append(conv_w[i]);
        append(conv_b[i]);
    }
    append(fc1_w);
    append(fc1_b);
    append(fc2_w);
    append(fc2_b);
    return flat;
}

ForwardResult forward_with_taps(const ModelParams& params, const Tensor& batch) {
    const ArchSpec& a = params.arch;
    if (batch.rank() != 4 || batch.dim(1) != static_cast<std::size_t>(a.input_channels) ||
        batch.dim(2) != static_cast<std::size_t>(a.input_size) ||
        batch.dim(3) != static_cast<std::size_t>(a.input_size))
        throw DimensionError("forward: batch shape does not match architecture");

    ForwardResult res;
    Tensor x = batch;
    for (std::size_t i = 0; i < params.conv_w.size(); ++i) {
        x = conv2d(x, params.conv_w[i], 1, 1);
        x = bias_add_channels(x, params.conv_b[i]);
        x = relu(x);
        x = maxpool2x2(x);
        res.taps.push_back(x);
    }
    x = reshape(x, {batch.dim(0), a.flat_dim()});
    x = relu(bias_add_rows(matmul(x, params.fc1_w), params.fc1_b));
    res.taps.push_back(x);  // penultimate
    res.logits = bias_add_rows(matmul(x, params.fc2_w), params.fc2_b);
    return res;
}

ForwardResult forward_with_taps(const ModelCheckpoint& ckpt, const Tensor& batch) {
    return forward_with_taps(ModelParams::from_checkpoint(ckpt, false), batch);
}

namespace {

constexpr char kMagic[4] = {'N', 'T', 'M', 'L'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw FormatError("checkpoint: truncated file");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint64_t get_u64(std::istream& is) {
    const std::uint64_t lo = get_u32(is);
    const std::uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(ckpt.arch.input_channels));
    put_u32(os, static_cast<std::uint32_t>(ckpt.arch.input_size));
    put_u32(os, static_cast<std::uint32_t>(ckpt.arch.conv_filters.size()));
    for (int f : ckpt.arch.conv_filters) put_u32(os, static_cast<std::uint32_t>(f));
    put_u32(os, static_cast<std::uint32_t>(ckpt.arch.hidden_dense));
    put_u32(os, static_cast<std::uint32_t>(ckpt.arch.num_classes));
    put_u64(os, ckpt.seed);
    put_u32(os, ckpt.epoch);
    const unsigned char stage = static_cast<unsigned char>(ckpt.stage);
    os.write(reinterpret_cast<const char*>(&stage), 1);
    put_u64(os, ckpt.params.size());
    for (double p : ckpt.params) {
        std::uint64_t bits;
        std::memcpy(&bits, &p, 8);
        put_u64(os, bits);
    }
    if (!os) throw IoError("checkpoint: write failed: " + path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("checkpoint: cannot open for reading: " + path);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic");
    if (get_u32(is) != kVersion) throw FormatError("checkpoint: unsupported version");

    ModelCheckpoint ckpt;
    ckpt.arch.input_channels = static_cast<int>(get_u32(is));
    ckpt.arch.input_size = static_cast<int>(get_u32(is));
    const std::uint32_t n_blocks = get_u32(is);
    if (n_blocks == 0 || n_blocks > 16) throw FormatError("checkpoint: implausible block count");
    ckpt.arch.conv_filters.clear();
    for (std::uint32_t i = 0; i < n_blocks; ++i)
        ckpt.arch.conv_filters.push_back(static_cast<int>(get_u32(is)));
    ckpt.arch.hidden_dense = static_cast<int>(get_u32(is));
    ckpt.arch.num_classes = static_cast<int>(get_u32(is));
    ckpt.seed = get_u64(is);
    ckpt.epoch = get_u32(is);
    unsigned char stage;
    if (!is.read(reinterpret_cast<char*>(&stage), 1))
        throw FormatError("checkpoint: truncated file");
    if (stage > static_cast<unsigned char>(Stage::ft))
        throw FormatError("checkpoint: unknown stage tag");
    ckpt.stage = static_cast<Stage>(stage);

    try {
        ckpt.arch.validate();
    } catch (const ConfigError& e) {
        throw FormatError(std::string("checkpoint: invalid architecture: ") + e.what());
    }
    const std::uint64_t count = get_u64(is);
    if (count != ckpt.arch.param_count())
        throw FormatError("checkpoint: parameter count does not match architecture");
    ckpt.params.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t bits = get_u64(is);
        std::memcpy(&ckpt.params[i], &bits, 8);
    }
    return ckpt;
}

}  // namespace ntml

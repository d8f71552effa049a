#include "ntml/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "ntml/error.hpp"

namespace ntml {

int Dataset::num_classes() const {
    int k = 0;
    for (int l : labels) k = std::max(k, l + 1);
    for (int l : original_labels) k = std::max(k, l + 1);
    return k;
}

namespace {

inline std::uint8_t clamp_u8(double v) {
    const long r = std::lround(v);
    return static_cast<std::uint8_t>(std::clamp(r, 0L, 255L));
}

}  // namespace

Dataset gen_synthetic(int num_classes, int n_per_class, int channels, int side, Rng& rng) {
    if (num_classes < 2) throw ConfigError("gen_synthetic: at least two classes required");
    if (n_per_class < 1) throw ConfigError("gen_synthetic: n_per_class must be positive");
    if (channels < 1) throw ConfigError("gen_synthetic: channels must be positive");
    if (side < 12) throw ConfigError("gen_synthetic: side too small for the class patterns");

    Dataset ds;
    ds.channels = channels;
    ds.side = side;
    const std::size_t n_total = static_cast<std::size_t>(num_classes) * n_per_class;
    ds.images.assign(n_total * ds.sample_bytes(), 0);
    ds.labels.reserve(n_total);

    // Class k is a Gaussian blob at a fixed angle on a ring around the image
    // center (a second, inner ring carries classes 8..15). Angular jitter
    // moves each sample part-way toward its ring neighbors, so class
    // similarity is graded per sample and a trained classifier keeps
    // calibrated non-target probabilities instead of one-hot second choices.
    if (num_classes > 16)
        throw ConfigError("gen_synthetic: at most 16 classes supported");
    const double pi = 3.141592653589793;
    const int per_ring = std::min(num_classes, 8);
    const double spacing = 2.0 * pi / per_ring;

    std::size_t idx = 0;
    for (int k = 0; k < num_classes; ++k) {
        const double base_angle = spacing * (k % 8) + (k >= 8 ? spacing / 2.0 : 0.0);
        const double base_ring = (k >= 8 ? 0.17 : 0.30) * side;

        for (int s = 0; s < n_per_class; ++s, ++idx) {
            ds.labels.push_back(k);
            const double angle = base_angle + rng.uniform(-0.33, 0.33) * spacing;
            const double ring = base_ring * rng.uniform(0.85, 1.15);
            const double amplitude = rng.uniform(120.0, 200.0);
            const double sigma = rng.uniform(1.8, 2.6);
            const double cx = 0.5 * (side - 1) + ring * std::cos(angle);
            const double cy = 0.5 * (side - 1) + ring * std::sin(angle);

            std::uint8_t* img = ds.sample(idx);
            for (int c = 0; c < channels; ++c)
                for (int y = 0; y < side; ++y)
                    for (int x = 0; x < side; ++x) {
                        const double dx = x - cx, dy = y - cy;
                        double v = 30.0;
                        v += amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
                        v += rng.normal(0.0, 14.0);
                        img[(static_cast<std::size_t>(c) * side + y) * side + x] = clamp_u8(v);
                    }
        }
    }
    ds.original_labels = ds.labels;
    ds.poisoned.assign(n_total, 0);
    return ds;
}

void split_validation(const Dataset& ds, double frac, std::uint64_t seed, Dataset& train_out,
                      Dataset& val_out) {
    if (!(frac > 0.0 && frac < 1.0))
        throw ConfigError("split_validation: fraction must lie in (0,1)");
    const std::size_t n_val =
        static_cast<std::size_t>(std::llround(frac * static_cast<double>(ds.size())));
    if (n_val == 0 || n_val >= ds.size())
        throw ConfigError("split_validation: split leaves an empty side");

    std::vector<std::size_t> order(ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    rng.shuffle(order);

    auto take = [&](std::size_t begin, std::size_t end, Dataset& out) {
        out = Dataset{};
        out.channels = ds.channels;
        out.side = ds.side;
        for (std::size_t j = begin; j < end; ++j) {
            const std::size_t i = order[j];
            out.images.insert(out.images.end(), ds.sample(i), ds.sample(i) + ds.sample_bytes());
            out.labels.push_back(ds.labels[i]);
            out.original_labels.push_back(ds.original_labels[i]);
            out.poisoned.push_back(ds.poisoned[i]);
        }
    };
    take(0, n_val, val_out);
    take(n_val, ds.size(), train_out);
}

namespace {

void write_idx_file(const std::string& path, const std::vector<std::uint32_t>& dims,
                    const std::uint8_t* payload, std::size_t count) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("idx: cannot open for writing: " + path);
    const unsigned char magic[4] = {0x00, 0x00, 0x08, static_cast<unsigned char>(dims.size())};
    os.write(reinterpret_cast<const char*>(magic), 4);
    for (std::uint32_t d : dims) {
        const unsigned char b[4] = {static_cast<unsigned char>(d >> 24),
                                    static_cast<unsigned char>(d >> 16),
                                    static_cast<unsigned char>(d >> 8),
                                    static_cast<unsigned char>(d)};
        os.write(reinterpret_cast<const char*>(b), 4);
    }
    os.write(reinterpret_cast<const char*>(payload), static_cast<std::streamsize>(count));
    if (!os) throw IoError("idx: write failed: " + path);
}

std::vector<std::uint8_t> read_idx_file(const std::string& path, std::size_t expect_dims,
                                        std::vector<std::uint32_t>& dims_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("idx: cannot open for reading: " + path);
    unsigned char magic[4];
    if (!is.read(reinterpret_cast<char*>(magic), 4)) throw FormatError("idx: truncated header");
    if (magic[0] != 0 || magic[1] != 0 || magic[2] != 0x08)
        throw FormatError("idx: bad magic in " + path);
    if (magic[3] != expect_dims)
        throw FormatError("idx: unexpected dimension count in " + path);
    dims_out.clear();
    std::size_t total = 1;
    for (std::size_t i = 0; i < expect_dims; ++i) {
        unsigned char b[4];
        if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("idx: truncated header");
        const std::uint32_t d = (static_cast<std::uint32_t>(b[0]) << 24) |
                                (static_cast<std::uint32_t>(b[1]) << 16) |
                                (static_cast<std::uint32_t>(b[2]) << 8) | b[3];
        dims_out.push_back(d);
        total *= d;
    }
    std::vector<std::uint8_t> payload(total);
    if (!is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total)))
        throw FormatError("idx: payload shorter than header promises in " + path);
    return payload;
}

}  // namespace

void write_idx(const Dataset& ds, const std::string& dir) {
    std::filesystem::create_directories(dir);
    const std::uint32_t n = static_cast<std::uint32_t>(ds.size());
    write_idx_file(dir + "/images.idx",
                   {n, static_cast<std::uint32_t>(ds.channels),
                    static_cast<std::uint32_t>(ds.side), static_cast<std::uint32_t>(ds.side)},
                   ds.images.data(), ds.images.size());

    std::vector<std::uint8_t> labels(ds.size()), origs(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.labels[i] < 0 || ds.labels[i] > 255 || ds.original_labels[i] < 0 ||
            ds.original_labels[i] > 255)
            throw FormatError("idx: labels beyond u8 range are not representable");
        labels[i] = static_cast<std::uint8_t>(ds.labels[i]);
        origs[i] = static_cast<std::uint8_t>(ds.original_labels[i]);
    }
    write_idx_file(dir + "/labels.idx", {n}, labels.data(), labels.size());
    write_idx_file(dir + "/original_labels.idx", {n}, origs.data(), origs.size());
    write_idx_file(dir + "/poisoned.idx", {n}, ds.poisoned.data(), ds.poisoned.size());
}

Dataset read_idx(const std::string& dir) {
    std::vector<std::uint32_t> dims;
    Dataset ds;
    ds.images = read_idx_file(dir + "/images.idx", 4, dims);
    const std::uint32_t n = dims[0];
    ds.channels = static_cast<int>(dims[1]);
    ds.side = static_cast<int>(dims[2]);
    if (dims[3] != dims[2]) throw FormatError("idx: non-square images");

    auto labels = read_idx_file(dir + "/labels.idx", 1, dims);
    if (dims[0] != n) throw FormatError("idx: label count does not match image count");
    auto origs = read_idx_file(dir + "/original_labels.idx", 1, dims);
    if (dims[0] != n) throw FormatError("idx: original-label count does not match image count");
    auto flags = read_idx_file(dir + "/poisoned.idx", 1, dims);
    if (dims[0] != n) throw FormatError("idx: poisoned-flag count does not match image count");

    ds.labels.assign(labels.begin(), labels.end());
    ds.original_labels.assign(origs.begin(), origs.end());
    ds.poisoned = std::move(flags);
    for (std::uint8_t f : ds.poisoned)
        if (f > 1) throw FormatError("idx: poisoned flags must be 0 or 1");
    return ds;
}

}  // namespace ntml

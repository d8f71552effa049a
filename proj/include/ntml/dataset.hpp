#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntml/rng.hpp"

namespace ntml {

// Labeled u8 image set. labels[i] == original_labels[i] whenever the sample
// is not poisoned; poisoning keeps the original label around for PA.
struct Dataset {
    int channels = 0;
    int side = 0;
    std::vector<std::uint8_t> images;  // N * channels * side * side, row-major
    std::vector<int> labels;
    std::vector<int> original_labels;
    std::vector<std::uint8_t> poisoned;  // 0/1 per sample

    std::size_t size() const { return labels.size(); }
    std::size_t sample_bytes() const {
        return static_cast<std::size_t>(channels) * side * side;
    }
    const std::uint8_t* sample(std::size_t i) const { return images.data() + i * sample_bytes(); }
    std::uint8_t* sample(std::size_t i) { return images.data() + i * sample_bytes(); }
    int num_classes() const;
};

// Procedural class patterns: a bright blob whose horizontal position and a
// stripe orientation encode the class, so classes share attributes pairwise.
// Per-sample jitter moves the blob and shifts the stripe phase; pixel noise
// is added on top. Balanced: n_per_class samples for each of K classes,
// ordered by class.
Dataset gen_synthetic(int num_classes, int n_per_class, int channels, int side, Rng& rng);

// Deterministic held-out split: a seeded shuffle sends round(frac * N)
// samples to val and the rest to train.
void split_validation(const Dataset& ds, double frac, std::uint64_t seed, Dataset& train_out,
                      Dataset& val_out);

// IDX interchange: dir/images.idx (rank 4, N x C x H x W),
// dir/labels.idx, dir/original_labels.idx, dir/poisoned.idx (rank 1).
// Header per file: 0x00 0x00 0x08 <ndims>, then ndims big-endian u32 sizes,
// then the raw u8 payload.
void write_idx(const Dataset& ds, const std::string& dir);
Dataset read_idx(const std::string& dir);

}  // namespace ntml

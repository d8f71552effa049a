#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntml/rng.hpp"
#include "ntml/tensor.hpp"

namespace ntml {

// Small conv net: per block conv 3x3 (stride 1, pad 1) + ReLU + max pool 2x2,
// then a dense hidden layer and a dense classifier head.
struct ArchSpec {
    int input_channels = 1;
    int input_size = 16;  // square images
    std::vector<int> conv_filters = {8, 16};
    int hidden_dense = 32;
    int num_classes = 4;

    void validate() const;
    std::size_t param_count() const;
    // Spatial side after all pools.
    int final_side() const { return input_size >> conv_filters.size(); }
    std::size_t flat_dim() const {
        return static_cast<std::size_t>(conv_filters.back()) * final_side() * final_side();
    }
    // Ordered shallow -> deep: conv blocks, then the penultimate dense tap.
    std::vector<std::string> tap_names() const;

    bool operator==(const ArchSpec&) const = default;
};

enum class Stage : std::uint8_t { init = 0, tt, nt, ml_teacher, ml_student, ft };

std::string stage_name(Stage s);

struct ModelCheckpoint {
    ArchSpec arch;
    std::vector<double> params;  // flat, layer order: (conv w, conv b)*, fc1 w/b, fc2 w/b
    std::uint64_t seed = 0;
    std::uint32_t epoch = 0;
    Stage stage = Stage::init;

    std::vector<std::string> tap_names() const { return arch.tap_names(); }
};

// Kaiming fan-in scaled normal weights, zero biases.
ModelCheckpoint init_model(const ArchSpec& arch, Rng& rng);

// Layer-shaped views of a parameter vector. When trainable, the tensors are
// autodiff leaves whose grads are filled by backward().
struct ModelParams {
    ArchSpec arch;
    std::vector<Tensor> conv_w, conv_b;
    Tensor fc1_w, fc1_b, fc2_w, fc2_b;

    static ModelParams from_checkpoint(const ModelCheckpoint& ckpt, bool trainable);
    std::vector<Tensor*> all();
    std::vector<double> to_flat() const;
};

struct ForwardResult {
    Tensor logits;             // [N, K], pre-softmax
    std::vector<Tensor> taps;  // post-activation block outputs + penultimate dense
};

// Pure function of (params, batch); batch is [N, C, S, S] in [0,1].
ForwardResult forward_with_taps(const ModelParams& params, const Tensor& batch);

// Convenience: no-grad forward on a checkpoint.
ForwardResult forward_with_taps(const ModelCheckpoint& ckpt, const Tensor& batch);

// Binary format: "NTML" magic, u32 version, arch fields, meta, then
// little-endian f64 params. Round trip is bit-exact.
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

}  // namespace ntml

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ntml/dataset.hpp"
#include "ntml/rng.hpp"

namespace ntml {

enum class TriggerFamily { patch, blend, sinusoid, warp };

enum class Corner { bottom_right, bottom_left, top_right, top_left };

std::string trigger_family_name(TriggerFamily f);
TriggerFamily trigger_family_from_name(const std::string& name);
std::string corner_name(Corner c);
Corner corner_from_name(const std::string& name);

// Parametric description of one trigger. Only the fields of the active
// family matter; the rest keep their defaults.
struct TriggerSpec {
    TriggerFamily family = TriggerFamily::patch;
    int target_class = 3;

    // patch: solid s x s block in a corner
    int patch_size = 3;
    Corner patch_corner = Corner::bottom_right;
    int patch_intensity = 255;

    // blend: fixed random pattern mixed in with opacity lambda
    std::uint64_t blend_pattern_seed = 7;
    double blend_opacity = 0.15;

    // sinusoid: per-column offset delta * sin(2*pi*j*f/W)
    double sin_amplitude = 40.0;
    double sin_frequency = 6.0;

    // warp: bilinear resampling through a smooth displacement field fixed by
    // warp_seed
    int warp_grid = 4;
    double warp_max_disp = 1.5;
    std::uint64_t warp_seed = 11;

    void validate(int side) const;

    bool operator==(const TriggerSpec&) const = default;
};

// Applies the trigger to one C x H x W image; output clamped to [0,255].
std::vector<std::uint8_t> apply_trigger(const std::uint8_t* image, int channels, int height,
                                        int width, const TriggerSpec& spec);

// Poisoned-label attack: round(gamma * N) samples chosen uniformly from any
// class get the trigger and the target label; original labels are preserved.
Dataset poison_poisoned_label(const Dataset& ds, const TriggerSpec& spec, double gamma,
                              Rng& rng);

// Clean-label attack: round(frac * n_target) samples already labeled with the
// target class get the trigger; labels stay untouched.
Dataset poison_clean_label(const Dataset& ds, const TriggerSpec& spec, double frac_of_target,
                           Rng& rng);

// Drops true-target-class samples, triggers everything else, keeps original
// labels for PA. Input must be fully benign.
Dataset build_poisoned_testset(const Dataset& test, const TriggerSpec& spec);

}  // namespace ntml

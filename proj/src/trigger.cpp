#include "ntml/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ntml/error.hpp"

namespace ntml {

std::string trigger_family_name(TriggerFamily f) {
    switch (f) {
        case TriggerFamily::patch: return "patch";
        case TriggerFamily::blend: return "blend";
        case TriggerFamily::sinusoid: return "sinusoid";
        case TriggerFamily::warp: return "warp";
    }
    return "patch";
}

TriggerFamily trigger_family_from_name(const std::string& name) {
    if (name == "patch") return TriggerFamily::patch;
    if (name == "blend") return TriggerFamily::blend;
    if (name == "sinusoid") return TriggerFamily::sinusoid;
    if (name == "warp") return TriggerFamily::warp;
    throw ConfigError("trigger: unknown family '" + name + "'");
}

std::string corner_name(Corner c) {
    switch (c) {
        case Corner::bottom_right: return "bottom-right";
        case Corner::bottom_left: return "bottom-left";
        case Corner::top_right: return "top-right";
        case Corner::top_left: return "top-left";
    }
    return "bottom-right";
}

Corner corner_from_name(const std::string& name) {
    if (name == "bottom-right") return Corner::bottom_right;
    if (name == "bottom-left") return Corner::bottom_left;
    if (name == "top-right") return Corner::top_right;
    if (name == "top-left") return Corner::top_left;
    throw ConfigError("trigger: unknown corner '" + name + "'");
}

void TriggerSpec::validate(int side) const {
    if (target_class < 0) throw ConfigError("trigger: target class must be nonnegative");
    switch (family) {
        case TriggerFamily::patch:
            if (patch_size < 1 || patch_size >= side)
                throw ConfigError("trigger: patch size must lie in [1, side)");
            if (patch_intensity < 0 || patch_intensity > 255)
                throw ConfigError("trigger: patch intensity must lie in [0,255]");
            break;
        case TriggerFamily::blend:
            if (blend_opacity < 0.0 || blend_opacity > 1.0)
                throw ConfigError("trigger: blend opacity must lie in [0,1]");
            break;
        case TriggerFamily::sinusoid:
            if (sin_amplitude < 0.0 || sin_amplitude > 255.0)
                throw ConfigError("trigger: sinusoid amplitude must keep pixels clampable");
            if (sin_frequency <= 0.0)
                throw ConfigError("trigger: sinusoid frequency must be positive");
            break;
        case TriggerFamily::warp:
            if (warp_grid < 2) throw ConfigError("trigger: warp grid must be at least 2");
            if (warp_max_disp < 0.0)
                throw ConfigError("trigger: warp displacement must be nonnegative");
            break;
    }
}

namespace {

inline std::uint8_t clamp_u8(double v) {
    const long r = std::lround(v);
    return static_cast<std::uint8_t>(std::clamp(r, 0L, 255L));
}

void apply_patch(std::vector<std::uint8_t>& img, int c, int h, int w, const TriggerSpec& s) {
    int y0 = 0, x0 = 0;
    switch (s.patch_corner) {
        case Corner::bottom_right: y0 = h - s.patch_size; x0 = w - s.patch_size; break;
        case Corner::bottom_left: y0 = h - s.patch_size; x0 = 0; break;
        case Corner::top_right: y0 = 0; x0 = w - s.patch_size; break;
        case Corner::top_left: y0 = 0; x0 = 0; break;
    }
    for (int ci = 0; ci < c; ++ci)
        for (int y = y0; y < y0 + s.patch_size; ++y)
            for (int x = x0; x < x0 + s.patch_size; ++x)
                img[(static_cast<std::size_t>(ci) * h + y) * w + x] =
                    static_cast<std::uint8_t>(s.patch_intensity);
}

void apply_blend(std::vector<std::uint8_t>& img, int c, int h, int w, const TriggerSpec& s) {
    Rng rng(s.blend_pattern_seed);
    const double lam = s.blend_opacity;
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double pattern = static_cast<double>(rng.below(256));
                auto& px = img[(static_cast<std::size_t>(ci) * h + y) * w + x];
                px = clamp_u8((1.0 - lam) * px + lam * pattern);
            }
}

void apply_sinusoid(std::vector<std::uint8_t>& img, int c, int h, int w, const TriggerSpec& s) {
    for (int x = 0; x < w; ++x) {
        const double offset =
            s.sin_amplitude * std::sin(2.0 * 3.141592653589793 * x * s.sin_frequency / w);
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y) {
                auto& px = img[(static_cast<std::size_t>(ci) * h + y) * w + x];
                px = clamp_u8(static_cast<double>(px) + offset);
            }
    }
}

void apply_warp(std::vector<std::uint8_t>& img, int c, int h, int w, const TriggerSpec& s) {
    // Control grid of displacements, fixed by the spec seed, bilinearly
    // upsampled to a per-pixel field.
    const int g = s.warp_grid;
    Rng rng(s.warp_seed);
    std::vector<double> dx(static_cast<std::size_t>(g) * g), dy(dx.size());
    for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] = rng.uniform(-s.warp_max_disp, s.warp_max_disp);
        dy[i] = rng.uniform(-s.warp_max_disp, s.warp_max_disp);
    }
    std::vector<std::uint8_t> src = img;
    auto sample_src = [&](int ci, double sy, double sx) {
        sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
        sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
        const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
        const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double fy = sy - y0, fx = sx - x0;
        const auto at = [&](int y, int x) {
            return static_cast<double>(src[(static_cast<std::size_t>(ci) * h + y) * w + x]);
        };
        return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
               fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    };

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            // Bilinear interpolation of the control grid at this pixel.
            const double gy = static_cast<double>(y) / (h - 1) * (g - 1);
            const double gx = static_cast<double>(x) / (w - 1) * (g - 1);
            const int i0 = std::min(static_cast<int>(gy), g - 2);
            const int j0 = std::min(static_cast<int>(gx), g - 2);
            const double fy = gy - i0, fx = gx - j0;
            auto interp = [&](const std::vector<double>& f) {
                return (1 - fy) * ((1 - fx) * f[i0 * g + j0] + fx * f[i0 * g + j0 + 1]) +
                       fy * ((1 - fx) * f[(i0 + 1) * g + j0] + fx * f[(i0 + 1) * g + j0 + 1]);
            };
            const double sy = y + interp(dy);
            const double sx = x + interp(dx);
            for (int ci = 0; ci < c; ++ci)
                img[(static_cast<std::size_t>(ci) * h + y) * w + x] =
                    clamp_u8(sample_src(ci, sy, sx));
        }
}

}  // namespace

std::vector<std::uint8_t> apply_trigger(const std::uint8_t* image, int channels, int height,
                                        int width, const TriggerSpec& spec) {
    spec.validate(std::min(height, width));
    std::vector<std::uint8_t> out(image,
                                  image + static_cast<std::size_t>(channels) * height * width);
    switch (spec.family) {
        case TriggerFamily::patch: apply_patch(out, channels, height, width, spec); break;
        case TriggerFamily::blend: apply_blend(out, channels, height, width, spec); break;
        case TriggerFamily::sinusoid: apply_sinusoid(out, channels, height, width, spec); break;
        case TriggerFamily::warp: apply_warp(out, channels, height, width, spec); break;
    }
    return out;
}

namespace {

void apply_trigger_in_place(Dataset& ds, std::size_t i, const TriggerSpec& spec) {
    auto out = apply_trigger(ds.sample(i), ds.channels, ds.side, ds.side, spec);
    std::copy(out.begin(), out.end(), ds.sample(i));
}

}  // namespace

Dataset poison_poisoned_label(const Dataset& ds, const TriggerSpec& spec, double gamma,
                              Rng& rng) {
    if (gamma < 0.0 || gamma >= 1.0)
        throw ConfigError("poison: gamma must lie in [0,1)");
    spec.validate(ds.side);
    if (spec.target_class >= ds.num_classes())
        throw ConfigError("poison: target class beyond dataset classes");

    Dataset out = ds;
    const std::size_t count =
        static_cast<std::size_t>(std::llround(gamma * static_cast<double>(ds.size())));
    if (count == 0) return out;

    std::vector<std::size_t> indices(ds.size());
    std::iota(indices.begin(), indices.end(), 0);
    rng.shuffle(indices);
    for (std::size_t j = 0; j < count; ++j) {
        const std::size_t i = indices[j];
        apply_trigger_in_place(out, i, spec);
        out.labels[i] = spec.target_class;
        out.poisoned[i] = 1;
    }
    return out;
}

Dataset poison_clean_label(const Dataset& ds, const TriggerSpec& spec, double frac_of_target,
                           Rng& rng) {
    if (frac_of_target < 0.0 || frac_of_target > 1.0)
        throw ConfigError("poison: target fraction must lie in [0,1]");
    spec.validate(ds.side);

    std::vector<std::size_t> targets;
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.labels[i] == spec.target_class) targets.push_back(i);
    if (targets.empty()) throw ConfigError("poison: target class has no samples");

    Dataset out = ds;
    const std::size_t count = static_cast<std::size_t>(
        std::llround(frac_of_target * static_cast<double>(targets.size())));
    rng.shuffle(targets);
    for (std::size_t j = 0; j < count; ++j) {
        apply_trigger_in_place(out, targets[j], spec);
        out.poisoned[targets[j]] = 1;
    }
    return out;
}

Dataset build_poisoned_testset(const Dataset& test, const TriggerSpec& spec) {
    for (std::uint8_t f : test.poisoned)
        if (f) throw UsageError("poisoned testset: input must be fully benign");
    spec.validate(test.side);

    Dataset out;
    out.channels = test.channels;
    out.side = test.side;
    for (std::size_t i = 0; i < test.size(); ++i) {
        if (test.labels[i] == spec.target_class) continue;
        auto img = apply_trigger(test.sample(i), test.channels, test.side, test.side, spec);
        out.images.insert(out.images.end(), img.begin(), img.end());
        out.labels.push_back(spec.target_class);
        out.original_labels.push_back(test.labels[i]);
        out.poisoned.push_back(1);
    }
    if (out.labels.empty())
        throw ConfigError("poisoned testset: every sample belongs to the target class");
    return out;
}

}  // namespace ntml

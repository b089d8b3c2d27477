#pragma once

// Video-feature ingestion: the VFF1 container for precomputed per-frame
// features, uniform frame sampling with zero-padding, the linear projection
// into the model width, and a synthetic feature generator for tests.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "vidqa/error.hpp"
#include "vidqa/tensor.hpp"

namespace vidqa {

// In-memory image of a VFF1 file: `payload` is frame-major, frame t occupying
// entries [t*dim, (t+1)*dim).
struct FrameFeatureFile {
    uint32_t frames = 0;
    uint32_t dim = 0;
    std::vector<float> payload;
};

namespace detail {

inline void put_u32le(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline uint32_t get_u32le(const unsigned char* p) {
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

}  // namespace detail

constexpr size_t kVff1HeaderBytes = 16;

inline void write_vff1(const std::string& path, const FrameFeatureFile& file) {
    if (file.payload.size() != static_cast<size_t>(file.frames) * file.dim)
        throw DataError("vff1: payload holds " + std::to_string(file.payload.size()) +
                        " floats, header promises " +
                        std::to_string(static_cast<size_t>(file.frames) * file.dim));
    std::string bytes;
    bytes.reserve(kVff1HeaderBytes + file.payload.size() * 4);
    bytes += "VFF1";
    detail::put_u32le(bytes, file.frames);
    detail::put_u32le(bytes, file.dim);
    detail::put_u32le(bytes, 4);  // float width
    for (float v : file.payload) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        detail::put_u32le(bytes, bits);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("vff1: cannot write " + path);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("vff1: short write to " + path);
}

inline FrameFeatureFile read_vff1(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("vff1: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());

    auto fail = [&](size_t offset, const std::string& what) {
        throw DataError("vff1: " + path + ": " + what + " at byte offset " +
                        std::to_string(offset));
    };
    if (bytes.size() < kVff1HeaderBytes)
        fail(bytes.size(), "truncated header (" + std::to_string(bytes.size()) + " of " +
                               std::to_string(kVff1HeaderBytes) + " bytes)");
    if (std::memcmp(bytes.data(), "VFF1", 4) != 0) fail(0, "bad magic");

    FrameFeatureFile file;
    file.frames = detail::get_u32le(bytes.data() + 4);
    file.dim = detail::get_u32le(bytes.data() + 8);
    const uint32_t float_width = detail::get_u32le(bytes.data() + 12);
    if (file.frames == 0) fail(4, "zero frame count");
    if (file.dim == 0) fail(8, "zero feature dim");
    if (float_width != 4)
        fail(12, "unsupported float width " + std::to_string(float_width));

    const uint64_t expected = static_cast<uint64_t>(file.frames) * file.dim * 4;
    const uint64_t available = bytes.size() - kVff1HeaderBytes;
    if (available < expected)
        fail(kVff1HeaderBytes + available,
             "short payload (" + std::to_string(available) + " of " + std::to_string(expected) +
                 " bytes)");
    if (available > expected) fail(kVff1HeaderBytes + expected, "trailing bytes after payload");

    file.payload.resize(static_cast<size_t>(file.frames) * file.dim);
    for (size_t i = 0; i < file.payload.size(); ++i) {
        const uint32_t bits = detail::get_u32le(bytes.data() + kVff1HeaderBytes + i * 4);
        float v;
        std::memcpy(&v, &bits, 4);
        if (!std::isfinite(v)) fail(kVff1HeaderBytes + i * 4, "non-finite value");
        file.payload[i] = v;
    }
    return file;
}

// ---------------------------------------------------------------------------
// Sampling

// `features` is dim x t_target with invalid (padded) columns exactly zero.
struct SampledVideo {
    Tensor features;
    std::vector<uint8_t> valid;
    uint32_t raw_frames = 0;
};

// Uniform frame selection: indices floor(i * T_raw / T_target).  Shorter
// videos keep every frame and are zero-padded on the right.
inline SampledVideo sample_frames(const FrameFeatureFile& file, int t_target) {
    if (t_target < 1)
        throw ConfigError("sample_frames: target frame count " + std::to_string(t_target) +
                          " must be positive");
    const int t_raw = static_cast<int>(file.frames);
    const int dim = static_cast<int>(file.dim);

    SampledVideo out;
    out.raw_frames = file.frames;
    out.features = Tensor::zeros({dim, t_target});
    out.valid.assign(static_cast<size_t>(t_target), 0);
    const int real = std::min(t_raw, t_target);
    for (int i = 0; i < real; ++i) {
        const int src = t_raw >= t_target
                            ? static_cast<int>((static_cast<int64_t>(i) * t_raw) / t_target)
                            : i;
        for (int f = 0; f < dim; ++f)
            out.features.at(f, i) = file.payload[static_cast<size_t>(src) * dim + f];
        out.valid[i] = 1;
    }
    return out;
}

inline SampledVideo load_and_sample(const std::string& path, int t_target) {
    return sample_frames(read_vff1(path), t_target);
}

// ---------------------------------------------------------------------------
// Projection

// Bias-free linear map from raw feature width to model width; bias-free so
// zero-padded columns stay exactly zero before masking.
struct FrameProjector {
    Tensor weight;  // model_dim x feature_dim

    static FrameProjector create(int model_dim, int feature_dim, Rng& rng,
                                 double stddev = 0.02) {
        if (model_dim < 1 || feature_dim < 1)
            throw ConfigError("projector: dims must be positive");
        FrameProjector p;
        p.weight = Tensor::randn({model_dim, feature_dim}, rng, stddev, true);
        return p;
    }
};

inline Tensor project(const FrameProjector& proj, const Tensor& frames) {
    if (frames.rows() != proj.weight.cols())
        throw ShapeError("project: feature dim " + std::to_string(frames.rows()) +
                         " does not match projector width " + std::to_string(proj.weight.cols()));
    return matmul(proj.weight, frames);
}

// ---------------------------------------------------------------------------
// Synthetic features

// Deterministic test-data generator.  With `num_classes` > 0, coordinates
// f with f % num_classes == class_id carry a mean offset of `signal`; values
// are composed as noise * z + offset so noise = 0 yields exact floats.
struct SynthSpec {
    uint32_t frames = 10;
    uint32_t dim = 768;
    int num_classes = 0;
    int class_id = 0;
    double signal = 2.0;
    double noise = 1.0;
};

inline FrameFeatureFile synth_features(const SynthSpec& spec, uint64_t seed) {
    if (spec.frames == 0 || spec.dim == 0)
        throw ConfigError("synth_features: frames and dim must be positive");
    if (spec.num_classes > 0 &&
        (spec.class_id < 0 || spec.class_id >= spec.num_classes))
        throw ConfigError("synth_features: class id " + std::to_string(spec.class_id) +
                          " outside 0.." + std::to_string(spec.num_classes - 1));
    Rng rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    FrameFeatureFile file;
    file.frames = spec.frames;
    file.dim = spec.dim;
    file.payload.resize(static_cast<size_t>(spec.frames) * spec.dim);
    for (uint32_t t = 0; t < spec.frames; ++t) {
        for (uint32_t f = 0; f < spec.dim; ++f) {
            double v = spec.noise * unit(rng);
            if (spec.num_classes > 0 &&
                static_cast<int>(f % static_cast<uint32_t>(spec.num_classes)) == spec.class_id)
                v += spec.signal;
            file.payload[static_cast<size_t>(t) * spec.dim + f] = static_cast<float>(v);
        }
    }
    return file;
}

}  // namespace vidqa

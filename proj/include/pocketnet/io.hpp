#pragma once

// Binary persistence (little-endian, fixed-width) for checkpoints and
// datasets, the synthetic-identity generator, and IDX ingestion. All file
// writes are whole-file atomic: write to a temp path, then rename.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pocketnet/rng.hpp"
#include "pocketnet/tensor.hpp"

namespace pocketnet {

struct NamedArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> data;
};

// magic "PKTN", version u32, count u32; per array: name_len u16, name bytes,
// rank u8, dims u32 each, float32 data row-major.
void save_checkpoint(const std::vector<NamedArray>& arrays, const std::filesystem::path& path);
std::vector<NamedArray> load_checkpoint(const std::filesystem::path& path);

// snapshot / restore of a network state (parameters + running stats)
std::vector<NamedArray> snapshot_state(const std::vector<NamedTensorRef>& state);
void load_into_state(const std::vector<NamedArray>& arrays,
                     const std::vector<NamedTensorRef>& state);

struct Dataset {
    uint32_t channels = 0, height = 0, width = 0, classes = 0;
    std::vector<float> pixels;  // count * C * H * W, values in [-1, 1]
    std::vector<uint32_t> labels;

    uint32_t count() const { return static_cast<uint32_t>(labels.size()); }
    size_t sample_size() const { return static_cast<size_t>(channels) * height * width; }
    void validate() const;
};

// magic "PKDS"; count, channels, height, width, classes as u32; pixels f32;
// labels u32.
void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

// Deterministic parametric identities: per-id ellipse eccentricity, two
// landmark offsets and base intensity; per-sample Gaussian noise and random
// horizontal flips.
Dataset synth_identities(int n_ids, int per_id, int size, uint32_t seed,
                         float noise_sigma = 0.1f);

// IDX image/label pair (big-endian magics 0x803 / 0x801); pixels rescaled
// from [0,255] to [-1,1], grayscale replicated to 3 channels.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

// Assemble an NCHW batch from dataset rows; flip_rng, when given, mirrors
// each sample horizontally with probability 0.5.
Tensor make_batch(const Dataset& ds, const std::vector<int>& indices, Rng* flip_rng,
                  std::vector<int>& labels_out);

void atomic_write(const std::filesystem::path& path, const std::string& contents);

}  // namespace pocketnet

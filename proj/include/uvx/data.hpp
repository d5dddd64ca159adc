#pragma once

#include "uvx/rng.hpp"
#include "uvx/tensor.hpp"

#include <string>
#include <utility>
#include <vector>

namespace uvx::data {

// ---------------------------------------------------------------------------
// VXT tensor files: "VXT1" | dtype u8 (0 = f32, 1 = u8) | rank u8 |
// extents u64 x rank | row-major payload, all little-endian.

std::vector<unsigned char> encode_vxt(const Tensor<float>& t);
std::vector<unsigned char> encode_vxt(const LabelMap& t);
Tensor<float> decode_vxt_f32(const std::vector<unsigned char>& bytes, const std::string& what = "vxt");
LabelMap decode_vxt_u8(const std::vector<unsigned char>& bytes, const std::string& what = "vxt");

void save_tensor(const std::string& path, const Tensor<float>& t);
void save_tensor(const std::string& path, const LabelMap& t);
Tensor<float> load_tensor(const std::string& path);
LabelMap load_labels(const std::string& path);

// ---------------------------------------------------------------------------

/// Clamp to [lo, hi] then map linearly onto [0, 1]. ConfigError if lo >= hi.
Tensor<float> window_normalize(const Tensor<float>& image, double lo = -170.0, double hi = 250.0);

struct Sample {
    Tensor<float> image; ///< [1 x spatial], values in [0, 1]
    LabelMap mask;       ///< [spatial]
    std::string case_id;
};

/// Throws ShapeError / ContractError unless image is [1 x mask extents] within
/// [0, 1] and every label is below num_classes.
void validate_sample(const Sample& s, std::size_t num_classes);

struct AugmentConfig {
    double flip_prob = 0.5;
    bool rotate = true;      ///< quarter turns in the plane of the last two axes (half turns if non-square)
    Shape crop;              ///< target extents; empty keeps the full extent
    std::size_t divisor = 1; ///< zero-pad trailing edges to a multiple of this
};

/// The random choices of one augmentation.
struct AugmentDraw {
    std::vector<bool> flips;          ///< per spatial axis
    unsigned quarter_turns = 0;       ///< 0..3
    std::vector<std::size_t> offsets; ///< crop origin per axis

    bool identity(const Shape& spatial, const AugmentConfig& cfg) const;
};

AugmentDraw draw_augment(const Shape& spatial, const AugmentConfig& cfg, std::uint64_t seed);
Sample apply_augment(const Sample& s, const AugmentDraw& draw, const AugmentConfig& cfg);
/// draw_augment + apply_augment. ConfigError if the crop exceeds the extents.
Sample augment(const Sample& s, const AugmentConfig& cfg, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string image, mask, case_id; ///< paths relative to the manifest directory
};

struct Manifest {
    std::string base_dir;
    std::vector<ManifestEntry> entries;

    std::string resolve(const std::string& rel) const;
};

/// CSV with header "image,mask,case_id". FormatError on malformed rows.
Manifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const Manifest& m);

Sample load_sample(const Manifest& m, const ManifestEntry& e);
std::vector<Sample> load_samples(const Manifest& m, std::size_t num_classes);

/// Deterministic shuffled split by case id: round(fraction * n) training cases,
/// clamped so both parts are non-empty. ConfigError for fraction outside (0, 1)
/// or fewer than 2 cases; ContractError on duplicate case ids.
std::pair<Manifest, Manifest> split_train_test(const Manifest& m, double fraction, std::uint64_t seed);

// ---------------------------------------------------------------------------

struct SynthConfig {
    std::size_t cases = 4;
    Shape extents{64, 64};
    std::size_t num_classes = 3;
    std::uint64_t seed = 0;
    double noise_sigma = 0.05;
    double min_fraction = 0.01; ///< per-class area bounds, of all pixels
    double max_fraction = 0.30;
    std::size_t max_tries = 100;
};

/// One case: num_classes-1 non-overlapping soft-edged ellipses (ellipsoids in
/// 3D) with class intensity g/c on a noisy zero background. ConfigError if a
/// blob cannot be placed within max_tries draws.
Sample synth_case(const SynthConfig& cfg, std::size_t index);

/// Writes case_XXX.img.vxt / case_XXX.mask.vxt and manifest.csv into out_dir.
Manifest synth_dataset(const SynthConfig& cfg, const std::string& out_dir);

} // namespace uvx::data

#pragma once

// Procedural chest phantom corpus: labeled synthetic images with known
// affine posture, templated report text, and exact multi-label ground truth.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cxrl/rng.hpp"
#include "cxrl/tensor.hpp"

namespace cxrl::phantom {

using num::RngStream;
using num::Tensor;

inline constexpr int kNumLabels = 4;  // effusion, cardiomegaly, opacity, device
inline constexpr int kDefaultImageSize = 32;
inline constexpr int kDefaultCanonicalCount = 500;

enum class Side : uint8_t { Left = 0, Right = 1 };
enum class BlobSize : uint8_t { Small = 0, Large = 1 };

struct PhantomAttrs {
    bool effusion = false;
    bool cardiomegaly = false;
    bool opacity = false;
    Side opacity_side = Side::Left;    // meaningful iff opacity
    BlobSize opacity_size = BlobSize::Small;
    bool device = false;
    std::array<float, 6> jitter{};     // anatomical shape jitter, in [-1,1]
};

struct PostureParams {
    double s_x = 1.0, s_y = 1.0;  // unitless scale
    double t_x = 0.0, t_y = 0.0;  // translation, fraction of image width/height
    double theta = 0.0;           // rotation, radians

    bool finite() const;
};

// Sampling ranges used by the generator.
inline constexpr double kScaleLo = 0.85, kScaleHi = 1.15;
inline constexpr double kTransMax = 0.10;
inline constexpr double kRotMax = 0.15;

struct PhantomSample {
    Tensor image;  // (H, W), values in [0,1]
    PhantomAttrs attrs;
    PostureParams psi_true;
    std::string report;
    std::array<int, kNumLabels> labels{};
};

std::array<int, kNumLabels> labels_from_attrs(const PhantomAttrs& attrs);

PhantomAttrs sample_attrs(RngStream& stream);
PostureParams sample_posture(RngStream& stream);
std::string make_report(const PhantomAttrs& attrs, RngStream& stream);

// Canonical (identity-posture) anatomy with attribute features stamped in.
Tensor render_canonical(const PhantomAttrs& attrs, int size);

PhantomSample generate_sample(RngStream stream, int size = kDefaultImageSize);

// ---- affine resampling ----

// Row-major 2x3 matrix mapping source pixel coords to output pixel coords.
struct Affine2x3 {
    std::array<double, 6> m{1, 0, 0, 0, 1, 0};
};

// scale about center, then rotate, then translate
Affine2x3 affine_matrix(const PostureParams& psi, int height, int width);
Affine2x3 invert_affine(const Affine2x3& a);

// Bilinear resampling under the forward map; out-of-frame reads fill with 0,
// output clamped to [0,1].
Tensor apply_affine_matrix(const Tensor& image, const Affine2x3& fwd);
Tensor apply_affine(const Tensor& image, const PostureParams& psi);

Tensor canonical_mean(const std::vector<Tensor>& images, int k = kDefaultCanonicalCount);

// ---- dataset ----

struct DatasetManifest {
    uint64_t seed = 0;
    int n_train = 0;
    int n_test = 0;
    int image_size = 0;
    int version = 1;
    uint64_t dataset_hash = 0;

    std::string to_text() const;
    static DatasetManifest from_text(const std::string& text);
};

struct Dataset {
    std::vector<PhantomSample> train;
    std::vector<PhantomSample> test;
    DatasetManifest manifest;
};

Dataset make_dataset(uint64_t master_seed, int n_train = 5000, int n_test = 1000,
                     int image_size = kDefaultImageSize);

// P5 (binary, 8-bit) PGM round trip.
void write_pgm(const Tensor& image, const std::string& path);
Tensor read_pgm(const std::string& path);

// Directory layout: <dir>/<split>/<index>.pgm, <dir>/<split>/meta.jsonl,
// <dir>/manifest.txt.
void dump_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace cxrl::phantom

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsc/body_model.hpp"
#include "rsc/losses.hpp"
#include "rsc/network.hpp"
#include "rsc/rng.hpp"
#include "rsc/tensor.hpp"

namespace rsc {

struct Raster {
  int size = 0;
  int channels = 1;
  std::vector<double> pix;  // {C,S,S} row-major

  Tensor to_tensor() const;
};

struct BodyParams {
  std::vector<double> beta, theta, delta;
};

struct SceneConfig {
  double p3d = 0.5;
  double beta_sigma = 0.6;
  double beta_clip = 1.8;
  double joint_angle_sigma = 0.3;
  double joint_angle_clip = 0.9;
  double root_yaw = 0.7;
  double root_tilt = 0.25;
  double fill_lo = 0.45;
  double fill_hi = 0.8;
  double frame_margin = 2.0;  // pixels
  int max_attempts = 100;
};

struct AugmentationConfig {
  double gaussian_noise_sigma = 0.0;
  double brightness_jitter = 0.0;   // additive, uniform in +-value
  double contrast_jitter = 0.0;     // multiplicative, 1 +- value
  double rotation_deg = 0.0;
  double flip_prob = 0.0;
  std::vector<int> flip_pairs;      // joint permutation; empty = identity
  void validate() const;
};

struct Sample {
  std::int64_t source_id = 0;
  Raster canonical;               // x_1
  std::vector<Raster> pyramid;    // x_1 .. x_P, every raster at canonical size
  std::vector<int> chosen_sizes;  // pixel size drawn per range
  LabelSet labels;
  BodyParams truth;               // generating parameters, always known for synth data
};

struct DatasetMeta {
  int count = 0;
  int canonical_size = 0;
  int channels = 1;
  int joint_count = 0;
  int shape_dim = 0;
  std::vector<int> bounds;
  std::uint64_t seed = 0;
  double p3d = 0.5;
  std::string model_hash;
  std::string model_file;            // relative name inside the dataset dir
  std::vector<double> delta_mean;    // average camera translation of the split

  ResolutionScheme scheme() const;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Sample> samples;
};

// Draw body/camera parameters whose projected keypoints land inside the frame.
std::pair<BodyParams, LabelSet> sample_scene(const BodyModel& model, const Camera& cam,
                                             int canonical_size, const SceneConfig& cfg, Rng& rng);

// Anti-aliased stick figure over a textured-noise background, values in [0,1].
Raster rasterize(const BodyModel& model, const BodyParams& params, const Camera& cam,
                 int canonical_size, std::uint64_t noise_seed);

// Separable cubic-convolution resampling, kernel a=-0.5, clamp-to-edge.
Raster bicubic_resize(const Raster& in, int out_size);

// Range 1 passes x1 through untouched; other ranges draw an integer size in
// their range, downsample, and resize back to canonical.
std::vector<Raster> make_pyramid(const Raster& x1, const ResolutionScheme& scheme, Rng& rng,
                                 std::vector<int>* chosen_sizes);

// Geometric ops hit every raster and the labels together; photometric ops run
// per raster afterwards. Flips permute joints via cfg.flip_pairs; rotations
// are exact camera rolls so 2D and 3D labels stay consistent.
void augment(Sample& sample, const AugmentationConfig& cfg, const BodyModel& model,
             Rng& rng);

// Mirror pairing recovered from rest-joint positions (throws if the model has
// no mirror symmetry within tolerance).
std::vector<int> mirror_permutation(const BodyModel& model, double tol = 1e-6);

Sample make_sample(const BodyModel& model, const Camera& cam, const ResolutionScheme& scheme,
                   const SceneConfig& cfg, std::int64_t source_id, std::uint64_t global_seed);

Dataset generate_dataset(const BodyModel& model, const ResolutionScheme& scheme,
                         const SceneConfig& cfg, int count, std::uint64_t seed);

void write_dataset(const Dataset& data, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Max |J_g - project(W f(beta,theta), delta)| over a sample's label set.
double label_consistency_error(const Sample& sample, const BodyModel& model, const Camera& cam);

// Mean absolute 5-point Laplacian over the interior, a sharpness proxy.
double mean_abs_laplacian(const Raster& r);

}  // namespace rsc

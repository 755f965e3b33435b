#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "rsc/tensor.hpp"

namespace rsc {

// P resolution ranges over pixel sizes. bounds holds P descending values with
// bounds[0] == canonical_size; range 1 is the singleton {canonical_size},
// range i covers (bounds[i-1], bounds[i-2]] and the last range is closed at
// its lower bound, mirroring the published split {224,(224,128],...,(40,24]}.
struct ResolutionScheme {
  int canonical_size = 64;
  std::vector<int> bounds;

  int range_count() const { return static_cast<int>(bounds.size()); }
  int select_range(int pixel_size) const;             // 1-based
  int midpoint(int range_index) const;                // canonical for range 1
  std::pair<int, int> sample_range(int range_index) const;  // inclusive [lo,hi]
  void validate() const;

  static ResolutionScheme paper();  // canonical 224, bounds {224,128,64,40,24}
  static ResolutionScheme scaled_from_paper(int canonical_size);

  bool operator==(const ResolutionScheme&) const = default;
};

struct NetConfig {
  int in_channels = 1;
  int canonical_size = 64;
  std::vector<int> stage_channels = {16, 32, 64};
  std::vector<int> blocks_per_stage = {1, 1, 2};
  std::vector<int> regressor_hidden = {128, 128};
  int regressor_iterations = 3;
  int shape_dim = 10;
  int joint_count = 12;

  int feature_dim() const { return stage_channels.back(); }
  int param_dim() const { return shape_dim + 3 * joint_count + 3; }
  int block_count() const;
  void validate() const;
};

struct BlockParams {
  Tensor g1, b1, w1, g2, b2, w2;  // pre-activation: affine-relu-conv twice
};

struct TransitionParams {
  Tensor g, b, w;  // plain stride-2 downsampling, no alpha
};

struct Features {
  Tensor phi;      // pooled feature vector
  Tensor prepool;  // z_{i,B}
};

// Resolution-aware backbone plus iterative parameter regressor. The trunk is
// shared across resolutions; only the per-range alpha rows differ.
class RaNet {
 public:
  RaNet() = default;
  RaNet(NetConfig cfg, ResolutionScheme scheme, std::vector<double> mean_params,
        std::uint64_t seed);

  // image {in_channels, canonical, canonical}, range_index in [1, P].
  Features forward_features(const Tensor& image, int range_index) const;
  // The plain residual route that ignores alpha entirely.
  Features forward_features_baseline(const Tensor& image) const;

  // phi -> parameter vector [beta, theta, delta] via iterative refinement.
  Tensor forward_params(const Tensor& phi) const;

  std::vector<Tensor> parameters(bool include_alpha) const;
  Tensor alpha_row(int range_index) const;

  const NetConfig& config() const { return cfg_; }
  const ResolutionScheme& scheme() const { return scheme_; }
  const Tensor& mean_params() const { return mean_params_; }

  void save(const std::string& path) const;
  static RaNet load(const std::string& path);

 private:
  Features forward_impl(const Tensor& image, const Tensor* alpha_row) const;

  NetConfig cfg_;
  ResolutionScheme scheme_;
  Tensor stem_w_;
  std::vector<BlockParams> blocks_;
  std::vector<TransitionParams> transitions_;
  Tensor final_g_, final_b_;
  std::vector<Tensor> alpha_;  // per range, {B}
  std::vector<Tensor> reg_w_, reg_b_;
  Tensor mean_params_;
};

}  // namespace rsc

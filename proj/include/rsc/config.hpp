#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rsc/data.hpp"
#include "rsc/network.hpp"
#include "rsc/train.hpp"

namespace rsc {

// Flat view of every tunable, merged from defaults, an optional config file,
// and command-line overrides. Keys are strict: anything unknown is rejected.
struct RunConfig {
  // [data]
  int data_count = 512;
  double data_p3d = 0.5;
  int canonical_size = 64;
  std::vector<int> bounds;  // empty: scale the published bounds to canonical

  // [model]
  int model_vertices = 200;
  int model_joints = 12;
  int model_shape_dim = 10;

  // [net]
  std::vector<int> stage_channels = {16, 32, 64};
  std::vector<int> blocks_per_stage = {1, 1, 2};
  std::vector<int> regressor_hidden = {128, 128};
  int regressor_iterations = 3;

  // [train]
  int train_iterations = 2000;
  int batch_size = 2;
  double learning_rate = 1e-3;  // published fine-tuning value 5e-5 stays available here
  bool progressive = true;
  std::string ss_mode = "directional";    // off|directional|symmetric|highest
  std::string feat_variant = "off";       // off|ms|cd|cl
  double lambda1 = 5.0;
  double lambda2 = 5.0;
  double lambda_s = 0.1;
  double lambda_f = 0.1;
  double tau = 0.1;
  int queue_capacity = 240;
  bool queue_all_resolutions = true;
  bool ss_include_delta = true;

  // [augment]
  double aug_noise_sigma = 0.02;
  double aug_brightness = 0.05;
  double aug_contrast = 0.05;
  double aug_rotation_deg = 15.0;
  double aug_flip_prob = 0.0;

  std::uint64_t seed = 1;

  ResolutionScheme scheme() const;
  NetConfig net_config(int joint_count, int shape_dim) const;
  TrainConfig train_config() const;
  AugmentationConfig augmentation() const;
  SceneConfig scene() const;
  void validate() const;
};

// `key = value` lines with [section] headers and # comments. Unknown keys or
// sections are rejected by name.
void apply_config_file(RunConfig& cfg, const std::string& path);
void apply_config_text(RunConfig& cfg, const std::string& text, const std::string& origin);

// A single "section.key=value" override (the --set flag).
void apply_override(RunConfig& cfg, const std::string& assignment);

// Deterministic echo of the resolved configuration, parseable by the loader.
std::string config_echo(const RunConfig& cfg);

// Every accepted key, for --help.
std::vector<std::string> config_keys();

}  // namespace rsc

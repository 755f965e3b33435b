#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rsc/adam.hpp"
#include "rsc/body_model.hpp"
#include "rsc/data.hpp"
#include "rsc/gradcheck.hpp"
#include "rsc/losses.hpp"
#include "rsc/network.hpp"

namespace rsc {

struct ProcrustesResult {
  double scale = 1.0;
  std::array<double, 9> rotation{};     // row-major, det +1
  std::array<double, 3> translation{};
  std::vector<double> aligned;          // K*3
};

// Similarity transform minimizing sum ||s R p_k + t - g_k||^2 (closed form via
// the covariance SVD with reflection correction).
ProcrustesResult procrustes_align(std::span<const double> pred, std::span<const double> gt);

double mpjpe(std::span<const double> pred, std::span<const double> gt, bool aligned);

struct Stage {
  std::vector<int> ranges;  // active range indices, 1-based
  int iterations = 0;
};

// Progressive curriculum: stage k activates ranges {1..k} with an equal share
// of the iteration budget. Non-progressive: one stage with every range.
std::vector<Stage> make_stages(int range_count, int total_iterations, bool progressive);

struct TrainConfig {
  int total_iterations = 2000;
  bool progressive = true;
  std::vector<Stage> stages;  // derived from the two fields above when empty
  int batch_size = 2;
  AdamConfig adam;
  LossWeights weights;
  LossFlags flags;
  double tau = 0.1;
  int queue_capacity = 240;
  bool queue_all_resolutions = true;
  bool resolution_aware = true;  // false: plain residual forward (Ba cells)
  bool train_alpha = true;       // false: alpha frozen at its initial ones
  AugmentationConfig aug;
  std::uint64_t seed = 1;
};

struct LossCurveRow {
  int iteration = 0;
  int stage = 0;
  double basic = 0, ss = 0, feat = 0, total = 0;
};

struct TrainResult {
  std::vector<LossCurveRow> curve;
};

TrainResult train(RaNet& net, const BodyModel& model, const Dataset& data, const TrainConfig& cfg);

struct EvalRow {
  int range_index = 0;
  int midpoint = 0;
  double mpjpe = 0;
  double mpjpe_pa = 0;
  int count = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  double mean_mpjpe = 0;
  double mean_mpjpe_pa = 0;
};

// Predicts body parameters for a canonical-size raster observed at a given
// resolution range. Lets tests swap the network for an oracle.
using PoseForward = std::function<BodyParams(const Raster& image, int range_index)>;

PoseForward net_forward_fn(const RaNet& net, bool resolution_aware);

// Degrades every eval image to the exact range midpoints and scores MPJPE and
// MPJPE-PA against the 3D ground truth.
EvalReport evaluate(const PoseForward& forward, const Dataset& eval_data,
                    const ResolutionScheme& scheme, const BodyModel& model,
                    bool include_range1 = true);

// Mean parameter vector the iterative regressor starts from: zero shape and
// pose, the dataset's average camera translation.
std::vector<double> initial_mean_params(const NetConfig& cfg, const DatasetMeta& meta);

// Ablation cells from the study grid: Ba, Ba+SS, RA, RA+SS, RA+SS+MS,
// RA+SS+CD, RA+SS+CL, w/o PT, SS-o, SS-h.
std::vector<std::string> known_cells();
TrainConfig cell_config(const std::string& cell, TrainConfig base);

struct AblationResult {
  std::string cell;
  EvalReport report;
};

std::vector<AblationResult> run_ablation(const std::vector<std::string>& cells,
                                         const TrainConfig& base, const NetConfig& net_cfg,
                                         const BodyModel& model, const Dataset& train_data,
                                         const Dataset& eval_data, std::uint64_t net_seed);

std::string loss_curve_csv(const TrainResult& result);
std::string eval_report_csv(std::span<const AblationResult> results);

// End-to-end backbone+regressor+body+projection finite-difference case on a
// downsized configuration (8x8 input, B=2, N=50/K=6).
GradientCase pipeline_gradient_case();

}  // namespace rsc

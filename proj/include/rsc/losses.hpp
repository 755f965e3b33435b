#pragma once

#include <deque>
#include <span>
#include <vector>

#include "rsc/tensor.hpp"

namespace rsc {

struct LabelSet {
  int joint_count = 0;
  std::vector<double> joints2d;  // K*2 pixels, always present
  bool has_3d = false;
  std::vector<double> joints3d;  // K*3, present iff has_3d
  std::vector<double> beta;      // present iff has_3d
  std::vector<double> theta;     // present iff has_3d
  std::vector<double> delta;     // kept with the 3D labels for synthesis/eval
  void validate() const;
};

struct LossWeights {
  double lambda1 = 5.0;
  double lambda2 = 5.0;
  double lambda_s = 0.1;
  double lambda_f = 0.1;
  void validate() const;
};

enum class SsMode { off, directional, symmetric, highest_only };
enum class FeatVariant { off, mse, cosine, contrastive };

struct LossFlags {
  SsMode ss = SsMode::off;
  FeatVariant feat = FeatVariant::off;
  bool ss_include_delta = true;  // whether delta joins the output-consistency vector
};

// One resolution's network outputs with the derived quantities the losses use.
struct PredBundle {
  Tensor params;    // [beta, theta, delta]
  Tensor joints3d;  // {K,3}
  Tensor joints2d;  // {K,2}
  Tensor feature;   // pooled feature vector
  int shape_dim = 0;
  int joint_count = 0;
};

// FIFO store of detached, unit-normalized feature vectors. Eviction happens in
// whole mini-batches; stored entries never carry gradient.
class FeatureQueue {
 public:
  FeatureQueue(int capacity, int dim);

  void update(std::span<const Tensor> minibatch);
  void update_raw(const std::vector<std::vector<double>>& minibatch);

  int size() const { return size_; }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  bool full() const { return size_ == capacity_; }
  const Tensor& packed() const;  // {size, dim} constant
  std::vector<std::vector<double>> entries() const;  // insertion order

 private:
  int capacity_;
  int dim_;
  int size_ = 0;
  std::deque<std::vector<double>> batches_;  // flat rows per mini-batch
  Tensor packed_;
};

// w_{i,j} = 1(j-i>0) * (j-i), 1-based resolution indices.
double ss_weight(int i, int j);

Tensor basic_loss_term(const PredBundle& pred, const LabelSet& labels, const LossWeights& w);
Tensor basic_loss(std::span<const PredBundle> preds, const LabelSet& labels,
                  const LossWeights& w);

// outputs[i] is the flat output vector of resolution i+1 for one source image.
Tensor self_sup_loss(std::span<const Tensor> outputs, SsMode mode);

// -log softmax of the positive pair against queued negatives; phi_i goes
// behind a stop-gradient barrier, negatives are detached by queue contract.
Tensor contrastive_g(const Tensor& phi_i, const Tensor& phi_j, const FeatureQueue& queue,
                     double tau);

Tensor feature_loss(std::span<const Tensor> features, const FeatureQueue* queue,
                    FeatVariant variant, double tau);

struct LossTerms {
  Tensor total;
  double basic = 0.0;
  double ss = 0.0;
  double feat = 0.0;
};

LossTerms total_loss(std::span<const PredBundle> preds, const LabelSet& labels,
                     const FeatureQueue* queue, const LossWeights& w, const LossFlags& flags,
                     double tau);

}  // namespace rsc

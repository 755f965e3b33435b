#include "rsc/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace rsc {

void LabelSet::validate() const {
  if (joint_count < 1) throw std::invalid_argument("labels: joint count missing");
  if (static_cast<int>(joints2d.size()) != 2 * joint_count) {
    throw std::invalid_argument("labels: missing 2D keypoints");
  }
  if (has_3d) {
    if (static_cast<int>(joints3d.size()) != 3 * joint_count || beta.empty() ||
        static_cast<int>(theta.size()) != 3 * joint_count) {
      throw std::invalid_argument("labels: has_3d set but 3D fields are incomplete");
    }
  } else {
    if (!joints3d.empty() || !beta.empty() || !theta.empty()) {
      throw std::invalid_argument("labels: 3D fields present without has_3d");
    }
  }
}

void LossWeights::validate() const {
  if (lambda1 < 0 || lambda2 < 0 || lambda_s < 0 || lambda_f < 0) {
    throw std::invalid_argument("loss weights must be nonnegative");
  }
}

// ---- FeatureQueue ----------------------------------------------------------

FeatureQueue::FeatureQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
  if (capacity < 1 || dim < 1) throw std::invalid_argument("queue: capacity and dim must be positive");
}

void FeatureQueue::update_raw(const std::vector<std::vector<double>>& minibatch) {
  const int batch = static_cast<int>(minibatch.size());
  if (batch == 0) throw std::invalid_argument("queue: empty mini-batch");
  if (batch > capacity_) throw std::invalid_argument("queue: mini-batch larger than capacity");
  if (capacity_ % batch != 0) {
    throw std::invalid_argument("queue: mini-batch size " + std::to_string(batch) +
                                " does not divide capacity " + std::to_string(capacity_));
  }
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(batch) * dim_);
  for (const auto& v : minibatch) {
    if (static_cast<int>(v.size()) != dim_) {
      throw std::invalid_argument("queue: feature dimension mismatch");
    }
    double n2 = 0;
    for (double x : v) n2 += x * x;
    if (n2 == 0.0) throw std::runtime_error("queue: zero-norm feature cannot be normalized");
    const double inv = 1.0 / std::sqrt(n2);
    for (double x : v) flat.push_back(x * inv);
  }
  batches_.push_back(std::move(flat));
  size_ += batch;
  while (size_ > capacity_) {
    size_ -= static_cast<int>(batches_.front().size()) / dim_;
    batches_.pop_front();
  }
  std::vector<double> packed;
  packed.reserve(static_cast<std::size_t>(size_) * dim_);
  for (const auto& b : batches_) packed.insert(packed.end(), b.begin(), b.end());
  packed_ = Tensor::from_data({size_, dim_}, std::move(packed));
}

void FeatureQueue::update(std::span<const Tensor> minibatch) {
  std::vector<std::vector<double>> raw;
  raw.reserve(minibatch.size());
  for (const auto& t : minibatch) {
    raw.emplace_back(t.data().begin(), t.data().end());  // detached by copy
  }
  update_raw(raw);
}

const Tensor& FeatureQueue::packed() const {
  if (size_ == 0) throw std::invalid_argument("queue: empty");
  return packed_;
}

std::vector<std::vector<double>> FeatureQueue::entries() const {
  std::vector<std::vector<double>> out;
  for (const auto& b : batches_) {
    const int rows = static_cast<int>(b.size()) / dim_;
    for (int r = 0; r < rows; ++r) {
      out.emplace_back(b.begin() + static_cast<std::ptrdiff_t>(r) * dim_,
                       b.begin() + static_cast<std::ptrdiff_t>(r + 1) * dim_);
    }
  }
  return out;
}

// ---- losses ------------------------------------------------------------------

double ss_weight(int i, int j) { return j - i > 0 ? static_cast<double>(j - i) : 0.0; }

Tensor basic_loss_term(const PredBundle& pred, const LabelSet& labels, const LossWeights& w) {
  labels.validate();
  w.validate();
  const int k = labels.joint_count;
  if (pred.joints2d.shape() != Shape{k, 2}) {
    throw std::invalid_argument("basic_loss: prediction joint count disagrees with labels");
  }
  Tensor j_gt = Tensor::from_data({k, 2}, labels.joints2d);
  Tensor loss = scale(squared_l2(sub(pred.joints2d, j_gt)), w.lambda2);
  if (labels.has_3d) {
    const int d = pred.shape_dim;
    std::vector<double> bt(labels.beta);
    bt.insert(bt.end(), labels.theta.begin(), labels.theta.end());
    Tensor bt_gt = Tensor::from_data({d + 3 * k}, std::move(bt));
    Tensor bt_pred = slice(pred.params, 0, d + 3 * k);
    Tensor x_gt = Tensor::from_data({k, 3}, labels.joints3d);
    loss = add(loss, add(squared_l2(sub(bt_pred, bt_gt)),
                         scale(squared_l2(sub(pred.joints3d, x_gt)), w.lambda1)));
  }
  return loss;
}

Tensor basic_loss(std::span<const PredBundle> preds, const LabelSet& labels,
                  const LossWeights& w) {
  if (preds.empty()) throw std::invalid_argument("basic_loss: no predictions");
  Tensor total = basic_loss_term(preds[0], labels, w);
  for (std::size_t i = 1; i < preds.size(); ++i) {
    total = add(total, basic_loss_term(preds[i], labels, w));
  }
  return total;
}

Tensor self_sup_loss(std::span<const Tensor> outputs, SsMode mode) {
  const int p = static_cast<int>(outputs.size());
  if (p < 2) throw std::invalid_argument("self_sup_loss: need at least 2 resolutions");
  if (mode == SsMode::off) return Tensor::scalar(0.0);
  Tensor total = Tensor::scalar(0.0);
  if (mode == SsMode::symmetric) {
    // Eq. 7: plain consistency over all ordered pairs, no barrier, unit weights.
    for (int i = 1; i <= p; ++i) {
      for (int j = 1; j <= p; ++j) {
        if (i == j) continue;
        total = add(total, squared_l2(sub(outputs[i - 1], outputs[j - 1])));
      }
    }
    return total;
  }
  for (int i = 1; i <= p; ++i) {
    if (mode == SsMode::highest_only && i != 1) break;
    for (int j = i + 1; j <= p; ++j) {
      const double wij = ss_weight(i, j);
      Tensor pair = squared_l2(sub(stop_gradient(outputs[i - 1]), outputs[j - 1]));
      total = add(total, scale(pair, wij));
    }
  }
  return total;
}

Tensor contrastive_g(const Tensor& phi_i, const Tensor& phi_j, const FeatureQueue& queue,
                     double tau) {
  if (tau <= 0.0) throw std::invalid_argument("contrastive_g: tau must be positive");
  if (queue.size() == 0) throw std::invalid_argument("contrastive_g: queue is empty");
  if (phi_i.size() != phi_j.size() || static_cast<int>(phi_j.size()) != queue.dim()) {
    throw std::invalid_argument("contrastive_g: feature dimensions disagree");
  }
  double nj = 0;
  for (double v : phi_j.data()) nj += v * v;
  if (nj == 0.0) throw std::runtime_error("contrastive_g: zero-norm feature, cosine undefined");

  Tensor fixed = stop_gradient(phi_i);
  Tensor positive = cosine_similarity(fixed, phi_j);  // throws on zero-norm phi_i
  // cos(q, phi_j) = (Q phi_j) / ||phi_j|| with unit queue rows
  Tensor inv_norm = exp(scale(log(squared_l2(phi_j)), -0.5));
  Tensor negatives = mul(matmul(queue.packed(), phi_j), inv_norm);
  Tensor sims[] = {positive, negatives};
  Tensor logits = scale(concat(sims), 1.0 / tau);
  return sub(log_sum_exp(logits), slice(logits, 0, 1));
}

Tensor feature_loss(std::span<const Tensor> features, const FeatureQueue* queue,
                    FeatVariant variant, double tau) {
  const int p = static_cast<int>(features.size());
  if (variant == FeatVariant::off || p < 2) return Tensor::scalar(0.0);
  if (variant == FeatVariant::contrastive && (queue == nullptr || queue->size() == 0)) {
    throw std::invalid_argument("feature_loss: contrastive variant needs a non-empty queue");
  }
  Tensor total = Tensor::scalar(0.0);
  for (int i = 1; i <= p; ++i) {
    for (int j = i + 1; j <= p; ++j) {
      const double wij = ss_weight(i, j);
      Tensor g;
      switch (variant) {
        case FeatVariant::mse:
          g = squared_l2(sub(stop_gradient(features[i - 1]), features[j - 1]));
          break;
        case FeatVariant::cosine:
          g = add_const(
              scale(cosine_similarity(stop_gradient(features[i - 1]), features[j - 1]), -1.0),
              1.0);
          break;
        case FeatVariant::contrastive:
          g = contrastive_g(features[i - 1], features[j - 1], *queue, tau);
          break;
        default:
          g = Tensor::scalar(0.0);
      }
      total = add(total, scale(g, wij));
    }
  }
  return total;
}

LossTerms total_loss(std::span<const PredBundle> preds, const LabelSet& labels,
                     const FeatureQueue* queue, const LossWeights& w, const LossFlags& flags,
                     double tau) {
  w.validate();
  LossTerms terms;
  Tensor basic = basic_loss(preds, labels, w);
  terms.basic = basic.value();
  Tensor total = basic;

  if (flags.ss != SsMode::off && preds.size() >= 2) {
    std::vector<Tensor> outputs;
    outputs.reserve(preds.size());
    for (const auto& p : preds) {
      if (flags.ss_include_delta) {
        outputs.push_back(p.params);
      } else {
        outputs.push_back(slice(p.params, 0, p.shape_dim + 3 * p.joint_count));
      }
    }
    Tensor ss = self_sup_loss(outputs, flags.ss);
    terms.ss = ss.value();
    total = add(total, scale(ss, w.lambda_s));
  }

  if (flags.feat != FeatVariant::off && preds.size() >= 2) {
    std::vector<Tensor> features;
    features.reserve(preds.size());
    for (const auto& p : preds) features.push_back(p.feature);
    Tensor feat = feature_loss(features, queue, flags.feat, tau);
    terms.feat = feat.value();
    total = add(total, scale(feat, w.lambda_f));
  }

  terms.total = total;
  return terms;
}

}  // namespace rsc

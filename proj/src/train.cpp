#include "rsc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include <Eigen/Dense>
#include <Eigen/SVD>

namespace rsc {

// ---- metrics -----------------------------------------------------------------

ProcrustesResult procrustes_align(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size() || pred.size() % 3 != 0) {
    throw std::invalid_argument("procrustes: point sets must both be K x 3");
  }
  const int k = static_cast<int>(pred.size() / 3);
  if (k < 3) throw std::invalid_argument("procrustes: need at least 3 points");

  Eigen::Vector3d pm = Eigen::Vector3d::Zero(), gm = Eigen::Vector3d::Zero();
  for (int i = 0; i < k; ++i) {
    pm += Eigen::Vector3d(pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]);
    gm += Eigen::Vector3d(gt[3 * i], gt[3 * i + 1], gt[3 * i + 2]);
  }
  pm /= k;
  gm /= k;

  double pred_var = 0.0, gt_var = 0.0;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (int i = 0; i < k; ++i) {
    const Eigen::Vector3d p = Eigen::Vector3d(pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]) - pm;
    const Eigen::Vector3d g = Eigen::Vector3d(gt[3 * i], gt[3 * i + 1], gt[3 * i + 2]) - gm;
    pred_var += p.squaredNorm();
    gt_var += g.squaredNorm();
    cov += g * p.transpose();
  }
  pred_var /= k;
  gt_var /= k;
  cov /= k;
  if (gt_var <= 0.0) throw std::invalid_argument("procrustes: degenerate ground truth (zero variance)");
  if (pred_var <= 0.0) throw std::invalid_argument("procrustes: degenerate prediction (zero variance)");

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d u = svd.matrixU();
  Eigen::Matrix3d v = svd.matrixV();
  Eigen::Vector3d d = svd.singularValues();
  Eigen::Vector3d sgn = Eigen::Vector3d::Ones();
  if (u.determinant() * v.determinant() < 0.0) sgn(2) = -1.0;
  const Eigen::Matrix3d rot = u * sgn.asDiagonal() * v.transpose();
  const double scale = (d(0) * sgn(0) + d(1) * sgn(1) + d(2) * sgn(2)) / pred_var;
  const Eigen::Vector3d trans = gm - scale * rot * pm;

  ProcrustesResult res;
  res.scale = scale;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) res.rotation[3 * r + c] = rot(r, c);
  for (int c = 0; c < 3; ++c) res.translation[c] = trans(c);
  res.aligned.resize(pred.size());
  for (int i = 0; i < k; ++i) {
    const Eigen::Vector3d p(pred[3 * i], pred[3 * i + 1], pred[3 * i + 2]);
    const Eigen::Vector3d a = scale * rot * p + trans;
    res.aligned[3 * i] = a(0);
    res.aligned[3 * i + 1] = a(1);
    res.aligned[3 * i + 2] = a(2);
  }
  return res;
}

double mpjpe(std::span<const double> pred, std::span<const double> gt, bool aligned) {
  if (pred.size() != gt.size() || pred.size() % 3 != 0) {
    throw std::invalid_argument("mpjpe: point sets must both be K x 3");
  }
  std::vector<double> buf;
  std::span<const double> p = pred;
  if (aligned) {
    buf = procrustes_align(pred, gt).aligned;
    p = buf;
  }
  const int k = static_cast<int>(pred.size() / 3);
  double acc = 0.0;
  for (int i = 0; i < k; ++i) {
    const double dx = p[3 * i] - gt[3 * i];
    const double dy = p[3 * i + 1] - gt[3 * i + 1];
    const double dz = p[3 * i + 2] - gt[3 * i + 2];
    acc += std::sqrt(dx * dx + dy * dy + dz * dz);
  }
  return acc / k;
}

// ---- training ------------------------------------------------------------------

std::vector<Stage> make_stages(int range_count, int total_iterations, bool progressive) {
  if (range_count < 1 || total_iterations < 0) {
    throw std::invalid_argument("make_stages: bad arguments");
  }
  std::vector<Stage> stages;
  if (!progressive) {
    Stage s;
    for (int i = 1; i <= range_count; ++i) s.ranges.push_back(i);
    s.iterations = total_iterations;
    stages.push_back(std::move(s));
    return stages;
  }
  const int per = total_iterations / range_count;
  int used = 0;
  for (int k = 1; k <= range_count; ++k) {
    Stage s;
    for (int i = 1; i <= k; ++i) s.ranges.push_back(i);
    s.iterations = (k == range_count) ? total_iterations - used : per;
    used += s.iterations;
    stages.push_back(std::move(s));
  }
  return stages;
}

namespace {

// Deterministic shuffled index stream over the dataset.
class BatchStream {
 public:
  BatchStream(int count, std::uint64_t seed) : count_(count), seed_(seed) {}

  std::vector<int> next(int batch) {
    std::vector<int> out;
    while (static_cast<int>(out.size()) < batch) {
      if (cursor_ >= order_.size()) refill();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }

 private:
  void refill() {
    order_.resize(static_cast<std::size_t>(count_));
    for (int i = 0; i < count_; ++i) order_[static_cast<std::size_t>(i)] = i;
    Rng rng = Rng(seed_).derive("shuffle", epoch_++);
    rng.shuffle(order_);
    cursor_ = 0;
  }

  int count_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<int> order_;
  std::size_t cursor_ = 0;
};

struct ForwardOut {
  PredBundle bundle;
  Tensor phi;
};

ForwardOut forward_one(const RaNet& net, const BodyModel& model, const Camera& cam,
                       const Raster& raster, int range_index, bool resolution_aware) {
  ForwardOut out;
  Tensor image = raster.to_tensor();
  Features feats = resolution_aware ? net.forward_features(image, range_index)
                                    : net.forward_features_baseline(image);
  Tensor params = net.forward_params(feats.phi);
  const int d = net.config().shape_dim;
  const int k = net.config().joint_count;
  Tensor beta = slice(params, 0, d);
  Tensor theta = slice(params, d, 3 * k);
  Tensor delta = slice(params, d + 3 * k, 3);
  Tensor mesh = forward_model(model, beta, theta);
  Tensor x3 = regress_joints(model, mesh);
  Tensor j2 = project(x3, delta, cam);
  out.bundle.params = params;
  out.bundle.joints3d = x3;
  out.bundle.joints2d = j2;
  out.bundle.feature = feats.phi;
  out.bundle.shape_dim = d;
  out.bundle.joint_count = k;
  out.phi = feats.phi;
  return out;
}

}  // namespace

TrainResult train(RaNet& net, const BodyModel& model, const Dataset& data, const TrainConfig& cfg) {
  const ResolutionScheme& scheme = net.scheme();
  if (data.meta.scheme() != scheme) {
    throw std::invalid_argument("train: dataset resolution scheme disagrees with the network");
  }
  if (model.joint_count != net.config().joint_count || model.shape_dim != net.config().shape_dim) {
    throw std::invalid_argument("train: body model dimensions disagree with the network");
  }
  if (cfg.batch_size < 1 || cfg.batch_size > data.meta.count) {
    throw std::invalid_argument("train: bad batch size");
  }
  cfg.weights.validate();
  cfg.aug.validate();

  std::vector<Stage> stages =
      cfg.stages.empty() ? make_stages(scheme.range_count(), cfg.total_iterations, cfg.progressive)
                         : cfg.stages;
  for (const auto& s : stages) {
    if (s.ranges.empty()) throw std::invalid_argument("train: a stage has no active ranges");
    if (s.iterations < 0) throw std::invalid_argument("train: negative stage length");
  }
  const bool use_queue = cfg.flags.feat == FeatVariant::contrastive;
  std::optional<FeatureQueue> queue;
  if (use_queue) {
    queue.emplace(cfg.queue_capacity, net.config().feature_dim());
    for (const auto& s : stages) {
      const int enqueue = cfg.batch_size * (cfg.queue_all_resolutions
                                                ? static_cast<int>(s.ranges.size())
                                                : 1);
      if (enqueue > cfg.queue_capacity || cfg.queue_capacity % enqueue != 0) {
        throw std::invalid_argument(
            "train: queue capacity " + std::to_string(cfg.queue_capacity) +
            " is not a multiple of the stage enqueue size " + std::to_string(enqueue));
      }
    }
  }

  Adam opt(net.parameters(cfg.train_alpha), cfg.adam);
  const Camera cam = Camera::for_canonical(scheme.canonical_size);
  BatchStream batches(data.meta.count, cfg.seed);
  Rng root(cfg.seed);

  auto build_batch = [&](const Stage& stage, std::uint64_t iter_key) {
    std::vector<Sample> batch;
    const std::vector<int> idx = batches.next(cfg.batch_size);
    for (int slot = 0; slot < cfg.batch_size; ++slot) {
      Sample s;
      const Sample& stored = data.samples[static_cast<std::size_t>(idx[static_cast<std::size_t>(slot)])];
      s.source_id = stored.source_id;
      s.canonical = stored.canonical;
      s.labels = stored.labels;
      s.truth = stored.truth;
      Rng prng = root.derive("pyramid", iter_key * 1000003ull + static_cast<std::uint64_t>(slot));
      s.pyramid = make_pyramid(s.canonical, scheme, prng, &s.chosen_sizes);
      Rng arng = root.derive("augment", iter_key * 1000033ull + static_cast<std::uint64_t>(slot));
      augment(s, cfg.aug, model, arng);
      batch.push_back(std::move(s));
    }
    (void)stage;
    return batch;
  };

  auto enqueue_features = [&](const std::vector<std::vector<double>>& feats) {
    if (queue) queue->update_raw(feats);
  };

  // Contrastive warm start: fill the queue forward-only before iteration 1.
  if (use_queue) {
    const Stage& first = stages.front();
    const int enqueue =
        cfg.batch_size * (cfg.queue_all_resolutions ? static_cast<int>(first.ranges.size()) : 1);
    const int warm_batches = (cfg.queue_capacity + enqueue - 1) / enqueue;
    for (int w = 0; w < warm_batches; ++w) {
      auto batch = build_batch(first, 0x57a57000ull + static_cast<std::uint64_t>(w));
      std::vector<std::vector<double>> feats;
      for (const auto& s : batch) {
        for (int range : first.ranges) {
          if (!cfg.queue_all_resolutions && range != first.ranges.front()) continue;
          ForwardOut f = forward_one(net, model, cam, s.pyramid[static_cast<std::size_t>(range) - 1],
                                     range, cfg.resolution_aware);
          feats.emplace_back(f.phi.data().begin(), f.phi.data().end());
        }
      }
      enqueue_features(feats);
    }
  }

  TrainResult result;
  int iter = 0;
  for (std::size_t stage_idx = 0; stage_idx < stages.size(); ++stage_idx) {
    const Stage& stage = stages[stage_idx];
    for (int it = 0; it < stage.iterations; ++it) {
      ++iter;
      auto batch = build_batch(stage, static_cast<std::uint64_t>(iter));

      Graph graph;
      Tensor batch_total;
      double acc_basic = 0, acc_ss = 0, acc_feat = 0;
      std::vector<std::vector<double>> queue_feats;
      {
        Graph::Scope scope(graph);
        for (const auto& s : batch) {
          std::vector<PredBundle> preds;
          preds.reserve(stage.ranges.size());
          for (int range : stage.ranges) {
            ForwardOut f = forward_one(net, model, cam,
                                       s.pyramid[static_cast<std::size_t>(range) - 1], range,
                                       cfg.resolution_aware);
            preds.push_back(f.bundle);
            if (queue && (cfg.queue_all_resolutions || range == stage.ranges.front())) {
              queue_feats.emplace_back(f.phi.data().begin(), f.phi.data().end());
            }
          }
          LossTerms terms = total_loss(preds, s.labels, queue ? &*queue : nullptr, cfg.weights,
                                       cfg.flags, cfg.tau);
          acc_basic += terms.basic;
          acc_ss += terms.ss;
          acc_feat += terms.feat;
          batch_total = batch_total.defined() ? add(batch_total, terms.total) : terms.total;
        }
        batch_total = scale(batch_total, 1.0 / cfg.batch_size);
        const double total_value = batch_total.value();
        if (!std::isfinite(total_value)) {
          throw std::runtime_error("train: non-finite loss at iteration " + std::to_string(iter) +
                                   " (stage " + std::to_string(stage_idx + 1) + ")");
        }
        for (auto p : opt.params()) p.zero_grad();
        graph.backward(batch_total);
      }
      opt.step();
      if (queue) enqueue_features(queue_feats);

      LossCurveRow row;
      row.iteration = iter;
      row.stage = static_cast<int>(stage_idx + 1);
      row.basic = acc_basic / cfg.batch_size;
      row.ss = acc_ss / cfg.batch_size;
      row.feat = acc_feat / cfg.batch_size;
      row.total = batch_total.value();
      result.curve.push_back(row);
    }
  }
  return result;
}

// ---- evaluation -----------------------------------------------------------------

PoseForward net_forward_fn(const RaNet& net, bool resolution_aware) {
  return [&net, resolution_aware](const Raster& image, int range_index) {
    Tensor img = image.to_tensor();
    Features f = resolution_aware ? net.forward_features(img, range_index)
                                  : net.forward_features_baseline(img);
    Tensor params = net.forward_params(f.phi);
    const int d = net.config().shape_dim;
    const int k = net.config().joint_count;
    BodyParams out;
    out.beta.assign(params.data().begin(), params.data().begin() + d);
    out.theta.assign(params.data().begin() + d, params.data().begin() + d + 3 * k);
    out.delta.assign(params.data().begin() + d + 3 * k, params.data().end());
    return out;
  };
}

EvalReport evaluate(const PoseForward& forward, const Dataset& eval_data,
                    const ResolutionScheme& scheme, const BodyModel& model, bool include_range1) {
  if (eval_data.meta.scheme() != scheme) {
    throw std::invalid_argument("evaluate: dataset scheme disagrees with the requested scheme");
  }
  EvalReport report;
  const int first = include_range1 ? 1 : 2;
  double agg_m = 0, agg_pa = 0;
  int agg_rows = 0;
  for (int range = first; range <= scheme.range_count(); ++range) {
    const int size = scheme.midpoint(range);
    EvalRow row;
    row.range_index = range;
    row.midpoint = size;
    double acc_m = 0, acc_pa = 0;
    int count = 0;
    for (const auto& s : eval_data.samples) {
      if (!s.labels.has_3d) continue;
      Raster degraded =
          (size == scheme.canonical_size)
              ? s.canonical
              : bicubic_resize(bicubic_resize(s.canonical, size), scheme.canonical_size);
      const BodyParams pred = forward(degraded, range);
      const std::vector<double> x = joints_from_params(model, pred.beta, pred.theta);
      acc_m += mpjpe(x, s.labels.joints3d, false);
      acc_pa += mpjpe(x, s.labels.joints3d, true);
      ++count;
    }
    if (count == 0) throw std::invalid_argument("evaluate: no samples with 3D ground truth");
    row.mpjpe = acc_m / count;
    row.mpjpe_pa = acc_pa / count;
    row.count = count;
    report.rows.push_back(row);
    agg_m += row.mpjpe;
    agg_pa += row.mpjpe_pa;
    ++agg_rows;
  }
  report.mean_mpjpe = agg_m / agg_rows;
  report.mean_mpjpe_pa = agg_pa / agg_rows;
  return report;
}

// ---- ablation -----------------------------------------------------------------

std::vector<double> initial_mean_params(const NetConfig& cfg, const DatasetMeta& meta) {
  if (meta.delta_mean.size() != 3) throw std::invalid_argument("dataset meta lacks delta_mean");
  std::vector<double> mean(static_cast<std::size_t>(cfg.param_dim()), 0.0);
  const std::size_t off = static_cast<std::size_t>(cfg.shape_dim + 3 * cfg.joint_count);
  for (int c = 0; c < 3; ++c) mean[off + static_cast<std::size_t>(c)] = meta.delta_mean[c];
  return mean;
}

std::vector<std::string> known_cells() {
  return {"Ba",       "Ba+SS",    "RA",       "RA+SS", "RA+SS+MS",
          "RA+SS+CD", "RA+SS+CL", "w/o PT",   "SS-o",  "SS-h"};
}

TrainConfig cell_config(const std::string& cell, TrainConfig base) {
  TrainConfig cfg = base;
  cfg.stages.clear();
  cfg.progressive = true;
  auto full = [&cfg]() {
    cfg.resolution_aware = true;
    cfg.train_alpha = true;
    cfg.flags.ss = SsMode::directional;
    cfg.flags.feat = FeatVariant::contrastive;
  };
  if (cell == "Ba") {
    cfg.resolution_aware = false;
    cfg.train_alpha = false;
    cfg.flags.ss = SsMode::off;
    cfg.flags.feat = FeatVariant::off;
  } else if (cell == "Ba+SS") {
    cfg.resolution_aware = false;
    cfg.train_alpha = false;
    cfg.flags.ss = SsMode::directional;
    cfg.flags.feat = FeatVariant::off;
  } else if (cell == "RA") {
    cfg.resolution_aware = true;
    cfg.train_alpha = true;
    cfg.flags.ss = SsMode::off;
    cfg.flags.feat = FeatVariant::off;
  } else if (cell == "RA+SS") {
    cfg.resolution_aware = true;
    cfg.train_alpha = true;
    cfg.flags.ss = SsMode::directional;
    cfg.flags.feat = FeatVariant::off;
  } else if (cell == "RA+SS+MS") {
    full();
    cfg.flags.feat = FeatVariant::mse;
  } else if (cell == "RA+SS+CD") {
    full();
    cfg.flags.feat = FeatVariant::cosine;
  } else if (cell == "RA+SS+CL") {
    full();
  } else if (cell == "w/o PT") {
    full();
    cfg.progressive = false;
  } else if (cell == "SS-o") {
    full();
    cfg.flags.ss = SsMode::symmetric;
  } else if (cell == "SS-h") {
    full();
    cfg.flags.ss = SsMode::highest_only;
  } else {
    throw std::invalid_argument("unknown ablation cell: " + cell);
  }
  return cfg;
}

std::vector<AblationResult> run_ablation(const std::vector<std::string>& cells,
                                         const TrainConfig& base, const NetConfig& net_cfg,
                                         const BodyModel& model, const Dataset& train_data,
                                         const Dataset& eval_data, std::uint64_t net_seed) {
  std::vector<AblationResult> out;
  for (const auto& cell : cells) {
    TrainConfig cfg = cell_config(cell, base);
    RaNet net(net_cfg, train_data.meta.scheme(), initial_mean_params(net_cfg, train_data.meta),
              net_seed);
    train(net, model, train_data, cfg);
    AblationResult res;
    res.cell = cell;
    res.report = evaluate(net_forward_fn(net, cfg.resolution_aware), eval_data, net.scheme(), model);
    out.push_back(std::move(res));
  }
  return out;
}

std::string loss_curve_csv(const TrainResult& result) {
  std::ostringstream os;
  os << "iteration,stage,L_b,L_s,L_f,total\n";
  char buf[160];
  for (const auto& r : result.curve) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g,%.9g\n", r.iteration, r.stage, r.basic,
                  r.ss, r.feat, r.total);
    os << buf;
  }
  return os.str();
}

std::string eval_report_csv(std::span<const AblationResult> results) {
  std::ostringstream os;
  os << "cell,range_midpoint,mpjpe,mpjpe_pa,n\n";
  char buf[160];
  for (const auto& res : results) {
    for (const auto& row : res.report.rows) {
      std::snprintf(buf, sizeof buf, "%s,%d,%.9g,%.9g,%d\n", res.cell.c_str(), row.midpoint,
                    row.mpjpe, row.mpjpe_pa, row.count);
      os << buf;
    }
  }
  return os.str();
}

GradientCase pipeline_gradient_case() {
  return {"full_pipeline", [](Rng& rng, int trials) {
            NetConfig cfg;
            cfg.in_channels = 1;
            cfg.canonical_size = 8;
            cfg.stage_channels = {6, 6};
            cfg.blocks_per_stage = {1, 1};
            cfg.regressor_hidden = {16};
            cfg.regressor_iterations = 2;
            cfg.shape_dim = 4;
            cfg.joint_count = 6;
            ResolutionScheme scheme;
            scheme.canonical_size = 8;
            scheme.bounds = {8, 5, 3};
            scheme.validate();
            std::vector<double> mean(static_cast<std::size_t>(cfg.param_dim()), 0.0);
            mean[static_cast<std::size_t>(cfg.param_dim()) - 1] = 60.0;  // depth home
            RaNet net(cfg, scheme, mean, 99);
            // the zero-initialized final layer would hide the feature path;
            // give every parameter a small random value instead
            Rng wrng = rng.derive("weights");
            for (auto& p : net.parameters(true)) {
              auto d = p.raw_data();
              for (auto& v : d) v += wrng.uniform(-0.15, 0.15);
            }
            const BodyModel model = generate_toy_model(31337, 50, 6, 4);
            const Camera cam = Camera::for_canonical(8);

            FdReport worst;
            worst.pass = true;
            const int n_trials = std::max(1, trials / 10);
            for (int t = 0; t < n_trials; ++t) {
              Rng trng = rng.derive("trial", static_cast<std::uint64_t>(t));
              std::vector<double> img(64);
              for (auto& v : img) v = trng.uniform(0.0, 1.0);
              Tensor image = Tensor::from_data({1, 8, 8}, img);
              Rng probe = trng.derive("probe");
              std::vector<Tensor> params = net.parameters(true);
              FdReport r = finite_diff_check(
                  [&](std::span<const Tensor>) {
                    Rng pr = probe;
                    ForwardOut f = forward_one(net, model, cam,
                                               Raster{8, 1, img}, 2, true);
                    return add(random_probe_loss(f.bundle.joints2d, pr),
                               random_probe_loss(f.bundle.joints3d, pr));
                  },
                  params, 1e-5, 1e-4);
              if (r.non_finite) return r;
              if (r.max_rel_err >= worst.max_rel_err) {
                worst.max_rel_err = r.max_rel_err;
                worst.worst = r.worst;
              }
              worst.max_abs_err = std::max(worst.max_abs_err, r.max_abs_err);
              worst.pass = worst.pass && r.pass;
            }
            return worst;
          }};
}

}  // namespace rsc

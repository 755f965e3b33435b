#include "rsc/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "rsc/io_util.hpp"

namespace rsc {

namespace {

constexpr double kPi = 3.14159265358979323846;

double clampd(double v, double lo, double hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

Tensor Raster::to_tensor() const {
  return Tensor::from_data({channels, size, size}, pix);
}

void AugmentationConfig::validate() const {
  if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("augment: flip_prob outside [0,1]");
  if (gaussian_noise_sigma < 0) throw std::invalid_argument("augment: negative noise sigma");
  if (contrast_jitter < 0 || brightness_jitter < 0 || rotation_deg < 0) {
    throw std::invalid_argument("augment: jitter ranges must be nonnegative");
  }
}

ResolutionScheme DatasetMeta::scheme() const {
  ResolutionScheme s;
  s.canonical_size = canonical_size;
  s.bounds = bounds;
  s.validate();
  return s;
}

// ---- scene sampling --------------------------------------------------------

std::pair<BodyParams, LabelSet> sample_scene(const BodyModel& model, const Camera& cam,
                                             int canonical_size, const SceneConfig& cfg, Rng& rng) {
  const int k = model.joint_count;
  const int d = model.shape_dim;
  for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
    BodyParams p;
    p.beta.resize(static_cast<std::size_t>(d));
    for (auto& b : p.beta) b = clampd(rng.normal(0.0, cfg.beta_sigma), -cfg.beta_clip, cfg.beta_clip);
    p.theta.assign(static_cast<std::size_t>(3 * k), 0.0);
    p.theta[0] = rng.uniform(-cfg.root_tilt, cfg.root_tilt);
    p.theta[1] = rng.uniform(-cfg.root_yaw, cfg.root_yaw);
    p.theta[2] = rng.uniform(-cfg.root_tilt, cfg.root_tilt);
    for (int j = 1; j < k; ++j) {
      for (int c = 0; c < 3; ++c) {
        p.theta[3 * j + c] = clampd(rng.normal(0.0, cfg.joint_angle_sigma), -cfg.joint_angle_clip,
                                    cfg.joint_angle_clip);
      }
    }

    const std::vector<double> x = joints_from_params(model, p.beta, p.theta);
    double lo[3] = {1e300, 1e300, 1e300}, hi[3] = {-1e300, -1e300, -1e300};
    for (int j = 0; j < k; ++j) {
      for (int c = 0; c < 3; ++c) {
        lo[c] = std::min(lo[c], x[3 * j + c]);
        hi[c] = std::max(hi[c], x[3 * j + c]);
      }
    }
    const double ext = std::max(hi[0] - lo[0], hi[1] - lo[1]) + 1e-6;
    const double fill = rng.uniform(cfg.fill_lo, cfg.fill_hi);
    const double depth = cam.focal * ext / (fill * canonical_size);
    BodyParams q = p;
    q.delta = {-(lo[0] + hi[0]) / 2 + rng.uniform(-0.1, 0.1) * ext,
               -(lo[1] + hi[1]) / 2 + rng.uniform(-0.1, 0.1) * ext,
               depth - (lo[2] + hi[2]) / 2};
    if (q.delta[2] + lo[2] <= 0.1) continue;

    const std::vector<double> j2 = project_points(x, q.delta, cam);
    bool inside = true;
    for (int j = 0; j < k && inside; ++j) {
      inside = j2[2 * j] >= cfg.frame_margin && j2[2 * j] <= canonical_size - cfg.frame_margin &&
               j2[2 * j + 1] >= cfg.frame_margin &&
               j2[2 * j + 1] <= canonical_size - cfg.frame_margin;
    }
    if (!inside) continue;

    LabelSet labels;
    labels.joint_count = k;
    labels.joints2d = j2;
    labels.has_3d = rng.uniform() < cfg.p3d;
    if (labels.has_3d) {
      labels.joints3d = x;
      labels.beta = q.beta;
      labels.theta = q.theta;
      labels.delta = q.delta;
    }
    return {q, labels};
  }
  throw std::runtime_error("sample_scene: rejection sampling failed after " +
                           std::to_string(cfg.max_attempts) + " attempts");
}

// ---- rasterization -----------------------------------------------------------

namespace {

double point_segment_dist(double px, double py, double ax, double ay, double bx, double by) {
  const double abx = bx - ax, aby = by - ay;
  const double len2 = abx * abx + aby * aby;
  double t = len2 > 0 ? ((px - ax) * abx + (py - ay) * aby) / len2 : 0.0;
  t = clampd(t, 0.0, 1.0);
  const double dx = px - (ax + t * abx), dy = py - (ay + t * aby);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

Raster rasterize(const BodyModel& model, const BodyParams& params, const Camera& cam,
                 int canonical_size, std::uint64_t noise_seed) {
  const int s = canonical_size;
  const int k = model.joint_count;
  const std::vector<double> x3 = joints_from_params(model, params.beta, params.theta);
  const std::vector<double> j2 = project_points(x3, params.delta, cam);

  Raster out;
  out.size = s;
  out.channels = 1;
  out.pix.assign(static_cast<std::size_t>(s) * s, 0.0);

  // textured-noise background: bilinear value noise plus fine grain
  Rng rng(noise_seed);
  Rng coarse = rng.derive("bg_coarse");
  Rng fine = rng.derive("bg_fine");
  const int g = 9;
  std::vector<double> grid(g * g);
  for (auto& v : grid) v = coarse.uniform(0.05, 0.32);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double gy = static_cast<double>(y) / (s - 1) * (g - 1);
      const double gx = static_cast<double>(x) / (s - 1) * (g - 1);
      const int iy = std::min(static_cast<int>(gy), g - 2);
      const int ix = std::min(static_cast<int>(gx), g - 2);
      const double ty = gy - iy, tx = gx - ix;
      const double v = (1 - ty) * ((1 - tx) * grid[iy * g + ix] + tx * grid[iy * g + ix + 1]) +
                       ty * ((1 - tx) * grid[(iy + 1) * g + ix] + tx * grid[(iy + 1) * g + ix + 1]);
      out.pix[static_cast<std::size_t>(y) * s + x] = clampd(v + fine.uniform(-0.02, 0.02), 0.0, 1.0);
    }
  }

  const double line_halfwidth = std::max(0.9, 1.1 * s / 64.0);
  const double joint_radius = std::max(1.2, 1.7 * s / 64.0);
  const double body_value = 0.95;

  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      const double pu = x + 0.5, pv = y + 0.5;
      double cov = 0.0;
      for (int j = 1; j < k && cov < 1.0; ++j) {
        const int p = model.parent[static_cast<std::size_t>(j)];
        const double ax = j2[2 * p], ay = j2[2 * p + 1];
        const double bx = j2[2 * j], by = j2[2 * j + 1];
        if (std::hypot(bx - ax, by - ay) < 1e-9) continue;  // degenerate bone
        const double dist = point_segment_dist(pu, pv, ax, ay, bx, by);
        cov = std::max(cov, clampd(line_halfwidth + 0.5 - dist, 0.0, 1.0));
      }
      for (int j = 0; j < k && cov < 1.0; ++j) {
        const double dist = std::hypot(pu - j2[2 * j], pv - j2[2 * j + 1]);
        cov = std::max(cov, clampd(joint_radius + 0.5 - dist, 0.0, 1.0));
      }
      double& px = out.pix[static_cast<std::size_t>(y) * s + x];
      px = clampd(px * (1.0 - cov) + body_value * cov, 0.0, 1.0);
    }
  }
  return out;
}

// ---- bicubic ------------------------------------------------------------------

namespace {

// Keys cubic-convolution kernel, a = -0.5.
double cubic_kernel(double x) {
  const double a = -0.5;
  const double s = std::abs(x);
  if (s <= 1.0) return ((a + 2.0) * s - (a + 3.0)) * s * s + 1.0;
  if (s < 2.0) return ((a * s - 5.0 * a) * s + 8.0 * a) * s - 4.0 * a;
  return 0.0;
}

void resample_axis(const double* in, int in_n, int stride_in, double* out, int out_n,
                   int stride_out) {
  const double scale = static_cast<double>(in_n) / out_n;
  for (int o = 0; o < out_n; ++o) {
    const double src = (o + 0.5) * scale - 0.5;
    const int base = static_cast<int>(std::floor(src));
    const double t = src - base;
    double acc = 0.0;
    for (int tap = -1; tap <= 2; ++tap) {
      const int idx = std::clamp(base + tap, 0, in_n - 1);
      acc += cubic_kernel(t - tap) * in[idx * stride_in];
    }
    out[o * stride_out] = acc;
  }
}

}  // namespace

Raster bicubic_resize(const Raster& in, int out_size) {
  if (out_size < 2) throw std::invalid_argument("bicubic_resize: output size must be >= 2");
  Raster out;
  out.size = out_size;
  out.channels = in.channels;
  out.pix.resize(static_cast<std::size_t>(in.channels) * out_size * out_size);
  std::vector<double> tmp(static_cast<std::size_t>(in.size) * out_size);
  for (int c = 0; c < in.channels; ++c) {
    const double* src = in.pix.data() + static_cast<std::size_t>(c) * in.size * in.size;
    double* dst = out.pix.data() + static_cast<std::size_t>(c) * out_size * out_size;
    // horizontal: each of in.size rows -> out_size columns
    for (int y = 0; y < in.size; ++y) {
      resample_axis(src + static_cast<std::size_t>(y) * in.size, in.size, 1,
                    tmp.data() + static_cast<std::size_t>(y) * out_size, out_size, 1);
    }
    // vertical: each of out_size columns -> out_size rows
    for (int x = 0; x < out_size; ++x) {
      resample_axis(tmp.data() + x, in.size, out_size, dst + x, out_size, out_size);
    }
  }
  return out;
}

std::vector<Raster> make_pyramid(const Raster& x1, const ResolutionScheme& scheme, Rng& rng,
                                 std::vector<int>* chosen_sizes) {
  if (x1.size != scheme.canonical_size) {
    throw std::invalid_argument("make_pyramid: raster size disagrees with the scheme");
  }
  std::vector<Raster> pyramid;
  std::vector<int> sizes;
  pyramid.push_back(x1);  // range 1: untouched
  sizes.push_back(scheme.canonical_size);
  for (int i = 2; i <= scheme.range_count(); ++i) {
    const auto [lo, hi] = scheme.sample_range(i);
    const int size = static_cast<int>(rng.uniform_int(lo, hi));
    sizes.push_back(size);
    pyramid.push_back(bicubic_resize(bicubic_resize(x1, size), scheme.canonical_size));
  }
  if (chosen_sizes) *chosen_sizes = sizes;
  return pyramid;
}

// ---- augmentation --------------------------------------------------------------

namespace {

void mirror_raster(Raster& r) {
  for (int c = 0; c < r.channels; ++c) {
    double* plane = r.pix.data() + static_cast<std::size_t>(c) * r.size * r.size;
    for (int y = 0; y < r.size; ++y) {
      double* row = plane + static_cast<std::size_t>(y) * r.size;
      std::reverse(row, row + r.size);
    }
  }
}

void rotate_raster(Raster& r, double angle) {
  const int s = r.size;
  const double c = std::cos(angle), sn = std::sin(angle);
  const double cx = s / 2.0, cy = s / 2.0;
  std::vector<double> out(r.pix.size());
  for (int ch = 0; ch < r.channels; ++ch) {
    const double* in = r.pix.data() + static_cast<std::size_t>(ch) * s * s;
    double* dst = out.data() + static_cast<std::size_t>(ch) * s * s;
    for (int y = 0; y < s; ++y) {
      for (int x = 0; x < s; ++x) {
        const double pu = x + 0.5 - cx, pv = y + 0.5 - cy;
        // inverse map: rotate by -angle
        const double su = c * pu + sn * pv + cx - 0.5;
        const double sv = -sn * pu + c * pv + cy - 0.5;
        const int ix = static_cast<int>(std::floor(su));
        const int iy = static_cast<int>(std::floor(sv));
        const double tx = su - ix, ty = sv - iy;
        auto at = [&](int yy, int xx) {
          return in[static_cast<std::size_t>(std::clamp(yy, 0, s - 1)) * s +
                    std::clamp(xx, 0, s - 1)];
        };
        dst[static_cast<std::size_t>(y) * s + x] =
            (1 - ty) * ((1 - tx) * at(iy, ix) + tx * at(iy, ix + 1)) +
            ty * ((1 - tx) * at(iy + 1, ix) + tx * at(iy + 1, ix + 1));
      }
    }
  }
  r.pix = std::move(out);
}

std::vector<int> resolve_flip_perm(const AugmentationConfig& cfg, int k) {
  if (cfg.flip_pairs.empty()) {
    std::vector<int> id(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) id[i] = i;
    return id;
  }
  if (static_cast<int>(cfg.flip_pairs.size()) != k) {
    throw std::invalid_argument("augment: flip permutation must list every joint");
  }
  for (int i = 0; i < k; ++i) {
    const int j = cfg.flip_pairs[static_cast<std::size_t>(i)];
    if (j < 0 || j >= k || cfg.flip_pairs[static_cast<std::size_t>(j)] != i) {
      throw std::invalid_argument("augment: flip permutation must be an involution");
    }
  }
  return cfg.flip_pairs;
}

void flip_axis_angle(double* aa) {
  aa[1] = -aa[1];
  aa[2] = -aa[2];
}

// Rest root joint of the shaped template for a given beta.
std::array<double, 3> rest_root_joint(const BodyModel& model, const std::vector<double>& beta) {
  const auto tmpl = model.template_vertices.data();
  const auto basis = model.shape_basis.data();
  const auto reg = model.rest_regressor.data();
  const int d = model.shape_dim;
  std::array<double, 3> root = {0, 0, 0};
  for (int v = 0; v < model.vertex_count; ++v) {
    for (int c = 0; c < 3; ++c) {
      double coord = tmpl[3 * v + c];
      for (int dd = 0; dd < d; ++dd) {
        coord += basis[(3 * static_cast<std::size_t>(v) + c) * d + dd] * beta[dd];
      }
      root[c] += reg[v] * coord;
    }
  }
  return root;
}

void rotate_params_camera_roll(const BodyModel& model, BodyParams& p, std::vector<double>* x3,
                               double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double rz[9] = {c, -s, 0, s, c, 0, 0, 0, 1};
  // root rotation composes on the left
  double r0[9], composed[9];
  aa_to_matrix(p.theta.data(), r0);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      composed[3 * i + j] = 0;
      for (int m = 0; m < 3; ++m) composed[3 * i + j] += rz[3 * i + m] * r0[3 * m + j];
    }
  matrix_to_aa(composed, p.theta.data());

  const std::array<double, 3> j0 = rest_root_joint(model, p.beta);
  auto rot_about = [&](double* v) {
    const double rel[3] = {v[0] - j0[0], v[1] - j0[1], v[2] - j0[2]};
    for (int i = 0; i < 3; ++i) {
      v[i] = rz[3 * i] * rel[0] + rz[3 * i + 1] * rel[1] + rz[3 * i + 2] * rel[2] + j0[i];
    }
  };
  if (x3) {
    for (int j = 0; j * 3 < static_cast<int>(x3->size()); ++j) rot_about(x3->data() + 3 * j);
  }
  // delta' = Rz (delta + j0) - j0
  double shifted[3] = {p.delta[0] + j0[0], p.delta[1] + j0[1], p.delta[2] + j0[2]};
  for (int i = 0; i < 3; ++i) {
    p.delta[i] = rz[3 * i] * shifted[0] + rz[3 * i + 1] * shifted[1] + rz[3 * i + 2] * shifted[2] -
                 j0[i];
  }
}

}  // namespace

std::vector<int> mirror_permutation(const BodyModel& model, double tol) {
  const int k = model.joint_count;
  // rest joints of the unshapen template
  std::vector<double> x0(static_cast<std::size_t>(k) * 3, 0.0);
  const auto reg = model.rest_regressor.data();
  const auto tmpl = model.template_vertices.data();
  for (int j = 0; j < k; ++j) {
    for (int v = 0; v < model.vertex_count; ++v) {
      const double w = reg[static_cast<std::size_t>(j) * model.vertex_count + v];
      for (int c = 0; c < 3; ++c) x0[3 * j + c] += w * tmpl[3 * v + c];
    }
  }
  std::vector<int> perm(static_cast<std::size_t>(k), -1);
  for (int j = 0; j < k; ++j) {
    int best = -1;
    double best_err = tol;
    for (int m = 0; m < k; ++m) {
      const double err = std::abs(x0[3 * j] + x0[3 * m]) + std::abs(x0[3 * j + 1] - x0[3 * m + 1]) +
                         std::abs(x0[3 * j + 2] - x0[3 * m + 2]);
      if (err < best_err) {
        best_err = err;
        best = m;
      }
    }
    if (best < 0) {
      throw std::invalid_argument("mirror_permutation: joint " + std::to_string(j) +
                                  " has no mirror twin");
    }
    perm[static_cast<std::size_t>(j)] = best;
  }
  for (int j = 0; j < k; ++j) {
    if (perm[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])] != j) {
      throw std::invalid_argument("mirror_permutation: pairing is not an involution");
    }
  }
  return perm;
}

void augment(Sample& sample, const AugmentationConfig& cfg, const BodyModel& model,
             Rng& rng) {
  cfg.validate();
  const int s = sample.canonical.size;
  const int k = sample.labels.joint_count;

  // ---- flip
  if (cfg.flip_prob > 0.0 && rng.uniform() < cfg.flip_prob) {
    const std::vector<int> perm = resolve_flip_perm(cfg, k);
    mirror_raster(sample.canonical);
    for (auto& r : sample.pyramid) mirror_raster(r);

    std::vector<double> j2(sample.labels.joints2d.size());
    for (int j = 0; j < k; ++j) {
      j2[2 * j] = s - sample.labels.joints2d[2 * perm[j] ];
      j2[2 * j + 1] = sample.labels.joints2d[2 * perm[j] + 1];
    }
    sample.labels.joints2d = std::move(j2);

    auto flip_params = [&](BodyParams& p, std::vector<double>* x3) {
      std::vector<double> theta(p.theta.size());
      for (int j = 0; j < k; ++j) {
        for (int c = 0; c < 3; ++c) theta[3 * j + c] = p.theta[3 * perm[j] + c];
        flip_axis_angle(theta.data() + 3 * j);
      }
      p.theta = std::move(theta);
      p.delta[0] = -p.delta[0];
      if (x3) {
        std::vector<double> nx(x3->size());
        for (int j = 0; j < k; ++j) {
          nx[3 * j] = -(*x3)[3 * perm[j]];
          nx[3 * j + 1] = (*x3)[3 * perm[j] + 1];
          nx[3 * j + 2] = (*x3)[3 * perm[j] + 2];
        }
        *x3 = std::move(nx);
      }
    };
    if (!sample.truth.theta.empty()) flip_params(sample.truth, nullptr);
    if (sample.labels.has_3d) {
      BodyParams lbl{sample.labels.beta, sample.labels.theta, sample.labels.delta};
      flip_params(lbl, &sample.labels.joints3d);
      sample.labels.theta = lbl.theta;
      sample.labels.delta = lbl.delta;
    }
  }

  // ---- rotation (exact camera roll, retried if keypoints leave the frame)
  if (cfg.rotation_deg > 0.0) {
    const double max_rad = cfg.rotation_deg * kPi / 180.0;
    const double cx = s / 2.0, cy = s / 2.0;
    double angle = 0.0;
    bool found = false;
    for (int attempt = 0; attempt < 20 && !found; ++attempt) {
      const double a = rng.uniform(-max_rad, max_rad);
      bool inside = true;
      for (int j = 0; j < k && inside; ++j) {
        const double u = sample.labels.joints2d[2 * j] - cx;
        const double v = sample.labels.joints2d[2 * j + 1] - cy;
        const double nu = std::cos(a) * u - std::sin(a) * v + cx;
        const double nv = std::sin(a) * u + std::cos(a) * v + cy;
        inside = nu >= 1.0 && nu <= s - 1.0 && nv >= 1.0 && nv <= s - 1.0;
      }
      if (inside) {
        angle = a;
        found = true;
      }
    }
    if (found && angle != 0.0) {
      rotate_raster(sample.canonical, angle);
      for (auto& r : sample.pyramid) rotate_raster(r, angle);
      for (int j = 0; j < k; ++j) {
        const double u = sample.labels.joints2d[2 * j] - cx;
        const double v = sample.labels.joints2d[2 * j + 1] - cy;
        sample.labels.joints2d[2 * j] = std::cos(angle) * u - std::sin(angle) * v + cx;
        sample.labels.joints2d[2 * j + 1] = std::sin(angle) * u + std::cos(angle) * v + cy;
      }
      if (!sample.truth.theta.empty()) rotate_params_camera_roll(model, sample.truth, nullptr, angle);
      if (sample.labels.has_3d) {
        BodyParams lbl{sample.labels.beta, sample.labels.theta, sample.labels.delta};
        rotate_params_camera_roll(model, lbl, &sample.labels.joints3d, angle);
        sample.labels.theta = lbl.theta;
        sample.labels.delta = lbl.delta;
      }
    }
  }

  // ---- photometric, per raster after geometry
  auto photometric = [&](Raster& r) {
    if (cfg.contrast_jitter > 0.0 || cfg.brightness_jitter > 0.0) {
      const double c = 1.0 + rng.uniform(-cfg.contrast_jitter, cfg.contrast_jitter);
      const double b = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter);
      for (auto& p : r.pix) p = clampd((p - 0.5) * c + 0.5 + b, 0.0, 1.0);
    }
    if (cfg.gaussian_noise_sigma > 0.0) {
      for (auto& p : r.pix) p = clampd(p + rng.normal(0.0, cfg.gaussian_noise_sigma), 0.0, 1.0);
    }
  };
  photometric(sample.canonical);
  for (auto& r : sample.pyramid) photometric(r);

}

// ---- sample / dataset ------------------------------------------------------------

Sample make_sample(const BodyModel& model, const Camera& cam, const ResolutionScheme& scheme,
                   const SceneConfig& cfg, std::int64_t source_id, std::uint64_t global_seed) {
  Rng root(global_seed);
  Rng srng = root.derive("sample", static_cast<std::uint64_t>(source_id));
  Sample out;
  out.source_id = source_id;
  auto [truth, labels] = sample_scene(model, cam, scheme.canonical_size, cfg, srng);
  out.truth = std::move(truth);
  out.labels = std::move(labels);
  Rng nrng = srng.derive("raster");
  out.canonical = rasterize(model, out.truth, cam, scheme.canonical_size, nrng.bits());
  Rng prng = srng.derive("pyramid");
  out.pyramid = make_pyramid(out.canonical, scheme, prng, &out.chosen_sizes);
  return out;
}

Dataset generate_dataset(const BodyModel& model, const ResolutionScheme& scheme,
                         const SceneConfig& cfg, int count, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("generate_dataset: count must be positive");
  const Camera cam = Camera::for_canonical(scheme.canonical_size);
  Dataset data;
  data.meta.count = count;
  data.meta.canonical_size = scheme.canonical_size;
  data.meta.channels = 1;
  data.meta.joint_count = model.joint_count;
  data.meta.shape_dim = model.shape_dim;
  data.meta.bounds = scheme.bounds;
  data.meta.seed = seed;
  data.meta.p3d = cfg.p3d;
  data.meta.model_hash = model_hash_hex(model);
  data.meta.model_file = "model.json";
  data.samples.reserve(static_cast<std::size_t>(count));
  double dx = 0, dy = 0, dz = 0;
  for (int i = 0; i < count; ++i) {
    data.samples.push_back(make_sample(model, cam, scheme, cfg, i, seed));
    const auto& d = data.samples.back().truth.delta;
    dx += d[0];
    dy += d[1];
    dz += d[2];
  }
  data.meta.delta_mean = {dx / count, dy / count, dz / count};
  return data;
}

double label_consistency_error(const Sample& sample, const BodyModel& model, const Camera& cam) {
  const auto x = joints_from_params(model, sample.truth.beta, sample.truth.theta);
  const auto j = project_points(x, sample.truth.delta, cam);
  double err = 0;
  for (std::size_t i = 0; i < j.size(); ++i) {
    err = std::max(err, std::abs(j[i] - sample.labels.joints2d[i]));
  }
  return err;
}

double mean_abs_laplacian(const Raster& r) {
  const int s = r.size;
  double acc = 0;
  int count = 0;
  for (int y = 1; y + 1 < s; ++y) {
    for (int x = 1; x + 1 < s; ++x) {
      const double* p = r.pix.data();
      const double lap = 4 * p[y * s + x] - p[y * s + x - 1] - p[y * s + x + 1] -
                         p[(y - 1) * s + x] - p[(y + 1) * s + x];
      acc += std::abs(lap);
      ++count;
    }
  }
  return acc / count;
}

// ---- dataset files -----------------------------------------------------------------

namespace {

constexpr char kSampleMagic[] = "RSCSMP1";

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string join_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

std::string sample_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%06d.bin", index);
  return buf;
}

}  // namespace

void write_dataset(const Dataset& data, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  std::ostringstream manifest;
  manifest << "format = rsc-dataset-1\n";
  manifest << "count = " << data.meta.count << "\n";
  manifest << "canonical_size = " << data.meta.canonical_size << "\n";
  manifest << "channels = " << data.meta.channels << "\n";
  manifest << "joint_count = " << data.meta.joint_count << "\n";
  manifest << "shape_dim = " << data.meta.shape_dim << "\n";
  manifest << "bounds = " << join_ints(data.meta.bounds) << "\n";
  manifest << "seed = " << data.meta.seed << "\n";
  manifest << "p3d = " << fmt_double(data.meta.p3d) << "\n";
  manifest << "model_hash = " << data.meta.model_hash << "\n";
  manifest << "model_file = " << data.meta.model_file << "\n";
  manifest << "delta_mean = " << fmt_double(data.meta.delta_mean.at(0)) << ","
           << fmt_double(data.meta.delta_mean.at(1)) << "," << fmt_double(data.meta.delta_mean.at(2))
           << "\n";
  write_text_file((fs::path(dir) / "manifest").string(), manifest.str());

  for (int i = 0; i < data.meta.count; ++i) {
    const Sample& s = data.samples.at(static_cast<std::size_t>(i));
    std::ofstream os(fs::path(dir) / sample_filename(i), std::ios::binary);
    if (!os) throw std::runtime_error("dataset: cannot write sample file in " + dir);
    os.write(kSampleMagic, 7);
    write_u64(os, static_cast<std::uint64_t>(s.source_id));
    write_u32(os, static_cast<std::uint32_t>(s.pyramid.size()));
    write_u32(os, static_cast<std::uint32_t>(s.canonical.size));
    for (int size : s.chosen_sizes) write_u32(os, static_cast<std::uint32_t>(size));
    write_u32(os, s.labels.has_3d ? 1 : 0);
    for (const Raster& r : s.pyramid) {
      for (double v : r.pix) write_f32(os, static_cast<float>(v));
    }
    for (double v : s.labels.joints2d) write_f64(os, v);
    if (s.labels.has_3d) {
      for (double v : s.labels.joints3d) write_f64(os, v);
      for (double v : s.labels.beta) write_f64(os, v);
      for (double v : s.labels.theta) write_f64(os, v);
      for (double v : s.labels.delta) write_f64(os, v);
    }
    if (!os) throw std::runtime_error("dataset: write failed in " + dir);
  }
}

Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_text = read_text_file((fs::path(dir) / "manifest").string());
  std::map<std::string, std::string> kv;
  std::stringstream ss(manifest_text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::runtime_error("dataset: malformed manifest line: " + line);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto need = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw std::runtime_error("dataset: manifest missing key " + key);
    return it->second;
  };
  if (need("format") != "rsc-dataset-1") throw std::runtime_error("dataset: unknown format");

  Dataset data;
  data.meta.count = std::stoi(need("count"));
  data.meta.canonical_size = std::stoi(need("canonical_size"));
  data.meta.channels = std::stoi(need("channels"));
  data.meta.joint_count = std::stoi(need("joint_count"));
  data.meta.shape_dim = std::stoi(need("shape_dim"));
  data.meta.bounds = split_ints(need("bounds"));
  data.meta.seed = std::stoull(need("seed"));
  data.meta.p3d = std::stod(need("p3d"));
  data.meta.model_hash = need("model_hash");
  data.meta.model_file = need("model_file");
  {
    std::stringstream ds(need("delta_mean"));
    std::string tok;
    while (std::getline(ds, tok, ',')) data.meta.delta_mean.push_back(std::stod(tok));
    if (data.meta.delta_mean.size() != 3) throw std::runtime_error("dataset: bad delta_mean");
  }

  const int k = data.meta.joint_count;
  const int d = data.meta.shape_dim;
  const int s = data.meta.canonical_size;
  const int p = static_cast<int>(data.meta.bounds.size());

  for (int i = 0; i < data.meta.count; ++i) {
    std::ifstream is(fs::path(dir) / sample_filename(i), std::ios::binary);
    if (!is) throw std::runtime_error("dataset: missing sample file " + sample_filename(i));
    char magic[7];
    if (!is.read(magic, 7) || std::string(magic, 7) != kSampleMagic) {
      throw std::runtime_error("dataset: bad magic in " + sample_filename(i));
    }
    Sample smp;
    smp.source_id = static_cast<std::int64_t>(read_u64(is));
    const int file_p = static_cast<int>(read_u32(is));
    const int file_s = static_cast<int>(read_u32(is));
    if (file_p != p || file_s != s) {
      throw std::runtime_error("dataset: sample header disagrees with manifest");
    }
    smp.chosen_sizes.resize(static_cast<std::size_t>(p));
    for (auto& v : smp.chosen_sizes) v = static_cast<int>(read_u32(is));
    const bool has_3d = read_u32(is) != 0;
    smp.pyramid.resize(static_cast<std::size_t>(p));
    for (auto& r : smp.pyramid) {
      r.size = s;
      r.channels = data.meta.channels;
      r.pix.resize(static_cast<std::size_t>(data.meta.channels) * s * s);
      for (auto& v : r.pix) v = static_cast<double>(read_f32(is));
    }
    smp.canonical = smp.pyramid.front();
    smp.labels.joint_count = k;
    smp.labels.has_3d = has_3d;
    smp.labels.joints2d.resize(static_cast<std::size_t>(2 * k));
    for (auto& v : smp.labels.joints2d) v = read_f64(is);
    if (has_3d) {
      smp.labels.joints3d.resize(static_cast<std::size_t>(3 * k));
      for (auto& v : smp.labels.joints3d) v = read_f64(is);
      smp.labels.beta.resize(static_cast<std::size_t>(d));
      for (auto& v : smp.labels.beta) v = read_f64(is);
      smp.labels.theta.resize(static_cast<std::size_t>(3 * k));
      for (auto& v : smp.labels.theta) v = read_f64(is);
      smp.labels.delta.resize(3);
      for (auto& v : smp.labels.delta) v = read_f64(is);
      // generating parameters are recoverable for 3D-labelled samples
      smp.truth.beta = smp.labels.beta;
      smp.truth.theta = smp.labels.theta;
      smp.truth.delta = smp.labels.delta;
    }
    data.samples.push_back(std::move(smp));
  }
  return data;
}

}  // namespace rsc

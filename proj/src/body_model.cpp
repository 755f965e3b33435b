#include "rsc/body_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "rsc/io_util.hpp"
#include "rsc/rng.hpp"

namespace rsc {

namespace {

constexpr double kSmallAngle = 1e-4;

void cross_mat(const double v[3], double m[9]) {
  m[0] = 0;     m[1] = -v[2]; m[2] = v[1];
  m[3] = v[2];  m[4] = 0;     m[5] = -v[0];
  m[6] = -v[1]; m[7] = v[0];  m[8] = 0;
}

void mat_mul3(const double* a, const double* b, double* c) {
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      c[i * 3 + j] = a[i * 3] * b[j] + a[i * 3 + 1] * b[3 + j] + a[i * 3 + 2] * b[6 + j];
    }
}

void rodrigues_matrix(const double v[3], double r[9]) {
  const double th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
  const double th = std::sqrt(th2);
  double a, b;  // sin(t)/t and (1-cos(t))/t^2
  if (th < kSmallAngle) {
    a = 1.0 - th2 / 6.0 * (1.0 - th2 / 20.0);
    b = 0.5 - th2 / 24.0 * (1.0 - th2 / 30.0);
  } else {
    a = std::sin(th) / th;
    b = (1.0 - std::cos(th)) / th2;
  }
  double k[9], k2[9];
  cross_mat(v, k);
  mat_mul3(k, k, k2);
  for (int i = 0; i < 9; ++i) r[i] = a * k[i] + b * k2[i];
  r[0] += 1.0;
  r[4] += 1.0;
  r[8] += 1.0;
}

// d(exp([v]x))/dv_i; exact closed form away from 0, first-order series near 0.
void rodrigues_jacobian(const double v[3], const double r[9], double dr[3][9]) {
  const double th2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
  if (std::sqrt(th2) < kSmallAngle) {
    for (int i = 0; i < 3; ++i) {
      double e[3] = {0, 0, 0};
      e[i] = 1.0;
      double ke[9], kv[9], a[9], b[9];
      cross_mat(e, ke);
      cross_mat(v, kv);
      mat_mul3(ke, kv, a);
      mat_mul3(kv, ke, b);
      for (int j = 0; j < 9; ++j) dr[i][j] = ke[j] + 0.5 * (a[j] + b[j]);
    }
    return;
  }
  for (int i = 0; i < 3; ++i) {
    // (v_i [v]x + [v x ((I - R) e_i)]x) / th^2 * R
    double col[3] = {(i == 0 ? 1.0 : 0.0) - r[i], (i == 1 ? 1.0 : 0.0) - r[3 + i],
                     (i == 2 ? 1.0 : 0.0) - r[6 + i]};  // (I - R) e_i
    const double w[3] = {v[1] * col[2] - v[2] * col[1], v[2] * col[0] - v[0] * col[2],
                         v[0] * col[1] - v[1] * col[0]};
    double kv[9], kw[9], lhs[9];
    cross_mat(v, kv);
    cross_mat(w, kw);
    for (int j = 0; j < 9; ++j) lhs[j] = (v[i] * kv[j] + kw[j]) / th2;
    mat_mul3(lhs, r, dr[i]);
  }
}

void check_finite(const char* what, std::span<const double> vals) {
  for (double v : vals) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(what) + ": non-finite value");
    }
  }
}

Tensor row3(const Tensor& mat, int row) { return slice(mat, 3 * row, 3); }

}  // namespace

Camera Camera::for_canonical(int canonical_size) {
  Camera cam;
  cam.focal = 5000.0 * canonical_size / 224.0;
  cam.cx = canonical_size / 2.0;
  cam.cy = canonical_size / 2.0;
  return cam;
}

Tensor rodrigues(const Tensor& axis_angle) {
  if (axis_angle.shape() != Shape{3}) {
    throw std::invalid_argument("rodrigues: input must be a 3-vector, got " +
                                shape_str(axis_angle.shape()));
  }
  check_finite("rodrigues", axis_angle.data());
  double v[3] = {axis_angle.item(0), axis_angle.item(1), axis_angle.item(2)};
  std::vector<double> r(9);
  rodrigues_matrix(v, r.data());
  Tensor out = Tensor::from_data({3, 3}, std::move(r));
  if (Graph::active() && axis_angle.requires_grad()) {
    Graph::active()->record({"rodrigues", {axis_angle}, out, [axis_angle, out]() {
                               double v2[3] = {axis_angle.item(0), axis_angle.item(1),
                                               axis_angle.item(2)};
                               double dr[3][9];
                               rodrigues_jacobian(v2, out.data().data(), dr);
                               const auto g = out.grad();
                               auto& dv = axis_angle.node()->grad;
                               for (int i = 0; i < 3; ++i) {
                                 double s = 0.0;
                                 for (int j = 0; j < 9; ++j) s += g[j] * dr[i][j];
                                 dv[i] += s;
                               }
                             }});
  }
  return out;
}

Tensor forward_model(const BodyModel& model, const Tensor& beta, const Tensor& theta) {
  const int n = model.vertex_count;
  const int k = model.joint_count;
  if (beta.shape() != Shape{model.shape_dim}) {
    throw std::invalid_argument("forward_model: beta must be {D}, got " + shape_str(beta.shape()));
  }
  if (theta.shape() != Shape{3 * k}) {
    throw std::invalid_argument("forward_model: theta must be {3K}, got " +
                                shape_str(theta.shape()));
  }
  check_finite("forward_model: beta", beta.data());
  check_finite("forward_model: theta", theta.data());

  Tensor template_flat = reshape(model.template_vertices, {3 * n});
  Tensor shaped = reshape(add(template_flat, matmul(model.shape_basis, beta)), {n, 3});
  Tensor rest_joints = matmul(model.rest_regressor, shaped);  // {K,3}

  std::vector<Tensor> world_rot(static_cast<std::size_t>(k));
  std::vector<Tensor> world_pos(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    Tensor local = rodrigues(slice(theta, 3 * j, 3));
    Tensor rest_j = row3(rest_joints, j);
    const int p = model.parent[static_cast<std::size_t>(j)];
    if (p < 0) {
      world_rot[j] = local;
      world_pos[j] = rest_j;
    } else {
      world_rot[j] = matmul(world_rot[p], local);
      world_pos[j] = add(matmul(world_rot[p], sub(rest_j, row3(rest_joints, p))), world_pos[p]);
    }
  }

  Tensor posed;
  for (int j = 0; j < k; ++j) {
    Tensor rotated = matmul(shaped, transpose(world_rot[j]));  // {N,3}
    Tensor offset = sub(world_pos[j], matmul(world_rot[j], row3(rest_joints, j)));
    Tensor term = mul(add(rotated, offset), model.skin_cols3[static_cast<std::size_t>(j)]);
    posed = (j == 0) ? term : add(posed, term);
  }
  return posed;
}

Tensor regress_joints(const BodyModel& model, const Tensor& mesh) {
  if (mesh.shape() != Shape{model.vertex_count, 3}) {
    throw std::invalid_argument("regress_joints: mesh must be {N,3}, got " +
                                shape_str(mesh.shape()));
  }
  return matmul(model.joint_regressor, mesh);
}

Tensor project(const Tensor& joints3d, const Tensor& delta, const Camera& cam) {
  if (joints3d.shape().size() != 2 || joints3d.dim(1) != 3) {
    throw std::invalid_argument("project: joints must be {K,3}, got " +
                                shape_str(joints3d.shape()));
  }
  if (delta.shape() != Shape{3}) {
    throw std::invalid_argument("project: delta must be {3}, got " + shape_str(delta.shape()));
  }
  const int k = joints3d.dim(0);
  const auto xd = joints3d.data();
  const auto dd = delta.data();
  std::vector<double> out(static_cast<std::size_t>(k) * 2);
  for (int j = 0; j < k; ++j) {
    const double px = xd[3 * j] + dd[0];
    const double py = xd[3 * j + 1] + dd[1];
    const double pz = xd[3 * j + 2] + dd[2];
    if (!(pz > 0.0)) {
      throw std::runtime_error("project: non-positive depth " + std::to_string(pz) +
                               " at joint " + std::to_string(j));
    }
    out[2 * j] = cam.focal * px / pz + cam.cx;
    out[2 * j + 1] = cam.focal * py / pz + cam.cy;
  }
  Tensor result = Tensor::from_data({k, 2}, std::move(out));
  const bool needs = joints3d.requires_grad() || delta.requires_grad();
  if (Graph::active() && needs) {
    const double focal = cam.focal;
    Graph::active()->record(
        {"project", {joints3d, delta}, result, [joints3d, delta, result, focal, k]() {
           const auto g = result.grad();
           const auto xd2 = joints3d.data();
           const auto dd2 = delta.data();
           for (int j = 0; j < k; ++j) {
             const double px = xd2[3 * j] + dd2[0];
             const double py = xd2[3 * j + 1] + dd2[1];
             const double pz = xd2[3 * j + 2] + dd2[2];
             const double gu = g[2 * j], gv = g[2 * j + 1];
             const double dpx = focal / pz * gu;
             const double dpy = focal / pz * gv;
             const double dpz = -focal * (px * gu + py * gv) / (pz * pz);
             if (joints3d.node()->needs_grad) {
               auto& dx = joints3d.node()->grad;
               dx[3 * j] += dpx;
               dx[3 * j + 1] += dpy;
               dx[3 * j + 2] += dpz;
             }
             if (delta.node()->needs_grad) {
               auto& dl = delta.node()->grad;
               dl[0] += dpx;
               dl[1] += dpy;
               dl[2] += dpz;
             }
           }
         }});
  }
  return result;
}

// ---- model construction ------------------------------------------------

void BodyModel::validate() const {
  const int n = vertex_count, k = joint_count, d = shape_dim;
  if (n < k || k < 2 || d < 1) throw std::invalid_argument("model: infeasible sizes");
  if (static_cast<int>(parent.size()) != k) {
    throw std::invalid_argument("model: tree size does not match joint count");
  }
  int roots = 0;
  for (int j = 0; j < k; ++j) {
    const int p = parent[static_cast<std::size_t>(j)];
    if (p < 0) {
      ++roots;
    } else if (p >= j) {
      throw std::invalid_argument("model: tree is not topologically sorted at joint " +
                                  std::to_string(j));
    }
  }
  if (roots != 1) throw std::invalid_argument("model: tree must have exactly one root");

  if (template_vertices.shape() != Shape{n, 3}) throw std::invalid_argument("model: template shape");
  if (shape_basis.shape() != Shape{3 * n, d}) throw std::invalid_argument("model: shape_basis shape");
  if (rest_regressor.shape() != Shape{k, n}) throw std::invalid_argument("model: rest_regressor shape");
  if (skinning.shape() != Shape{n, k}) throw std::invalid_argument("model: skinning shape");
  if (joint_regressor.shape() != Shape{k, n}) throw std::invalid_argument("model: joint_regressor shape");

  check_finite("model: template", template_vertices.data());
  check_finite("model: shape_basis", shape_basis.data());

  const auto skin = skinning.data();
  for (int v = 0; v < n; ++v) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      const double w = skin[static_cast<std::size_t>(v) * k + j];
      if (w < 0.0) {
        throw std::invalid_argument("model: negative skinning weight at vertex " +
                                    std::to_string(v));
      }
      s += w;
    }
    if (std::abs(s - 1.0) > 1e-9) {
      throw std::invalid_argument("model: skinning row " + std::to_string(v) +
                                  " sums to " + std::to_string(s));
    }
  }
  for (const auto* reg : {&rest_regressor, &joint_regressor}) {
    const auto rd = reg->data();
    for (int j = 0; j < k; ++j) {
      double s = 0.0;
      for (int v = 0; v < n; ++v) s += rd[static_cast<std::size_t>(j) * n + v];
      if (std::abs(s - 1.0) > 1e-9) {
        throw std::invalid_argument("model: regressor row " + std::to_string(j) + " sums to " +
                                    std::to_string(s));
      }
    }
  }
}

void BodyModel::finalize() {
  validate();
  skin_cols3.clear();
  skin_cols3.reserve(static_cast<std::size_t>(joint_count));
  const auto skin = skinning.data();
  for (int j = 0; j < joint_count; ++j) {
    std::vector<double> col(static_cast<std::size_t>(vertex_count) * 3);
    for (int v = 0; v < vertex_count; ++v) {
      const double w = skin[static_cast<std::size_t>(v) * joint_count + j];
      col[3 * v] = col[3 * v + 1] = col[3 * v + 2] = w;
    }
    skin_cols3.push_back(Tensor::from_data({vertex_count, 3}, std::move(col)));
  }
}

namespace {

struct Skeleton {
  std::vector<int> parent;
  std::vector<std::array<double, 3>> pos;
  std::vector<int> mirror;  // index of the mirrored joint, self for on-plane joints
};

Skeleton build_skeleton(int k, Rng& rng) {
  Skeleton s;
  s.parent.assign(static_cast<std::size_t>(k), -1);
  s.pos.resize(static_cast<std::size_t>(k));
  s.mirror.resize(static_cast<std::size_t>(k));

  if (k < 4) {  // plain chain
    for (int j = 0; j < k; ++j) {
      s.parent[j] = j - 1;
      s.pos[j] = {0.0, 0.45 * j + (j ? rng.uniform(-0.03, 0.03) : 0.0),
                  j ? rng.uniform(-0.02, 0.02) : 0.0};
      s.mirror[j] = j;
    }
    return s;
  }

  const int rem = k - 3;
  const int core = 3 + (rem % 2);
  const int pairs = (k - core) / 2;

  const double spine_step = 0.75 / (core - 1);
  for (int j = 0; j < core; ++j) {
    s.parent[j] = j - 1;
    s.pos[j] = {0.0, spine_step * j + (j ? rng.uniform(-0.02, 0.02) : 0.0),
                j ? rng.uniform(-0.02, 0.02) : 0.0};
    s.mirror[j] = j;
  }

  // Limb chains in mirrored pairs: legs hang from the root, arms from the
  // joint below the head. Pairs alternate leg/arm levels.
  const int leg_anchor = 0;
  const int arm_anchor = core - 2;
  int next = core;
  int leg_tip_l = -1, leg_tip_r = -1, arm_tip_l = -1, arm_tip_r = -1;
  for (int p = 0; p < pairs; ++p) {
    const bool leg = (p % 2 == 0);
    const double jx = rng.uniform(-0.02, 0.02);
    const double jy = rng.uniform(-0.02, 0.02);
    const double jz = rng.uniform(-0.02, 0.02);
    int parent_l, parent_r;
    std::array<double, 3> off;
    if (leg) {
      if (leg_tip_l < 0) {
        parent_l = parent_r = leg_anchor;
        off = {0.14 + jx, -0.12 + jy, jz};
      } else {
        parent_l = leg_tip_l;
        parent_r = leg_tip_r;
        off = {0.01 + jx, -0.40 + jy, jz};
      }
    } else {
      if (arm_tip_l < 0) {
        parent_l = parent_r = arm_anchor;
        off = {0.20 + jx, -0.02 + jy, jz};
      } else {
        parent_l = arm_tip_l;
        parent_r = arm_tip_r;
        off = {0.28 + jx, -0.03 + jy, jz};
      }
    }
    const int l = next++;
    const int r = next++;
    s.parent[l] = parent_l;
    s.parent[r] = parent_r;
    s.pos[l] = {s.pos[parent_l][0] + off[0], s.pos[parent_l][1] + off[1],
                s.pos[parent_l][2] + off[2]};
    s.pos[r] = {-s.pos[l][0], s.pos[l][1], s.pos[l][2]};
    s.mirror[l] = r;
    s.mirror[r] = l;
    if (leg) {
      leg_tip_l = l;
      leg_tip_r = r;
    } else {
      arm_tip_l = l;
      arm_tip_r = r;
    }
  }
  return s;
}

double point_segment_dist2(const double* p, const std::array<double, 3>& a,
                           const std::array<double, 3>& b) {
  const double ab[3] = {b[0] - a[0], b[1] - a[1], b[2] - a[2]};
  const double ap[3] = {p[0] - a[0], p[1] - a[1], p[2] - a[2]};
  const double len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
  double t = len2 > 0.0 ? (ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  double d2 = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double d = ap[i] - t * ab[i];
    d2 += d * d;
  }
  return d2;
}

}  // namespace

BodyModel generate_toy_model(std::uint64_t seed, int n_vertices, int n_joints, int shape_dim) {
  if (n_vertices < n_joints || n_joints < 2 || shape_dim < 1) {
    throw std::invalid_argument("generate_toy_model: infeasible sizes");
  }
  Rng root(seed);
  Rng topo = root.derive("skeleton");
  Rng vrng = root.derive("vertices");
  Rng brng = root.derive("basis");

  const Skeleton skel = build_skeleton(n_joints, topo);
  const int k = n_joints, n = n_vertices, d = shape_dim;

  // Bones owned by their parent joint; vertices scatter around bone segments.
  struct Bone {
    int parent, child;
    double len;
  };
  std::vector<Bone> bones;
  for (int j = 1; j < k; ++j) {
    const int p = skel.parent[static_cast<std::size_t>(j)];
    double len = 0;
    for (int i = 0; i < 3; ++i) {
      const double dd = skel.pos[j][i] - skel.pos[p][i];
      len += dd * dd;
    }
    bones.push_back({p, j, std::sqrt(len) + 0.05});
  }
  // Seed bones: spine bones plus left-side limbs; right side comes from mirroring.
  std::vector<int> seed_bones;
  double total_len = 0.0;
  for (std::size_t b = 0; b < bones.size(); ++b) {
    const int child = bones[b].child;
    const bool is_center = skel.mirror[child] == child;
    const bool is_left = skel.pos[child][0] > 0.0;
    if (is_center || is_left) {
      seed_bones.push_back(static_cast<int>(b));
      total_len += bones[b].len;
    }
  }

  std::vector<double> verts(static_cast<std::size_t>(n) * 3);
  const int n_pairs = n / 2;
  for (int i = 0; i < n_pairs; ++i) {
    double pick = vrng.uniform(0.0, total_len);
    int bi = seed_bones.back();
    for (int sb : seed_bones) {
      pick -= bones[sb].len;
      if (pick <= 0.0) {
        bi = sb;
        break;
      }
    }
    const auto& a = skel.pos[bones[bi].parent];
    const auto& b = skel.pos[bones[bi].child];
    const double t = vrng.uniform(0.08, 0.92);
    double p[3];
    for (int c = 0; c < 3; ++c) {
      p[c] = a[c] + t * (b[c] - a[c]) + vrng.normal(0.0, 0.05);
    }
    verts[6 * i] = p[0];
    verts[6 * i + 1] = p[1];
    verts[6 * i + 2] = p[2];
    verts[6 * i + 3] = -p[0];
    verts[6 * i + 4] = p[1];
    verts[6 * i + 5] = p[2];
  }
  if (n % 2) {  // odd vertex count: one extra point on the mirror plane
    const auto& a = skel.pos[0];
    verts[3 * (n - 1)] = 0.0;
    verts[3 * (n - 1) + 1] = a[1] + vrng.normal(0.0, 0.08);
    verts[3 * (n - 1) + 2] = a[2] + vrng.normal(0.0, 0.05);
  }

  // Influence segments per joint: to each child, or the joint point for leaves.
  std::vector<std::vector<int>> children(static_cast<std::size_t>(k));
  for (int j = 1; j < k; ++j) children[skel.parent[j]].push_back(j);

  auto joint_dist2 = [&](const double* p, int j) {
    if (children[j].empty()) {
      double d2 = 0;
      for (int c = 0; c < 3; ++c) {
        const double dd = p[c] - skel.pos[j][c];
        d2 += dd * dd;
      }
      return d2;
    }
    double best = 1e300;
    for (int c : children[j]) best = std::min(best, point_segment_dist2(p, skel.pos[j], skel.pos[c]));
    return best;
  };

  const double sigma_skin = 0.09;
  std::vector<double> skin(static_cast<std::size_t>(n) * k, 0.0);
  std::vector<double> w_all(static_cast<std::size_t>(k));
  for (int v = 0; v < n; ++v) {
    for (int j = 0; j < k; ++j) {
      w_all[j] = std::exp(-joint_dist2(&verts[3 * v], j) / (2 * sigma_skin * sigma_skin));
    }
    // top-3 with ties kept, so mirrored joints stay together
    std::vector<double> sorted(w_all);
    std::sort(sorted.begin(), sorted.end(), std::greater<>());
    const double cut = sorted[std::min<std::size_t>(2, sorted.size() - 1)];
    double total = 0.0;
    for (int j = 0; j < k; ++j) {
      if (w_all[j] >= cut) total += w_all[j];
    }
    for (int j = 0; j < k; ++j) {
      skin[static_cast<std::size_t>(v) * k + j] = (w_all[j] >= cut) ? w_all[j] / total : 0.0;
    }
  }

  auto make_regressor = [&](double sigma) {
    std::vector<double> reg(static_cast<std::size_t>(k) * n, 0.0);
    for (int j = 0; j < k; ++j) {
      double total = 0.0;
      for (int v = 0; v < n; ++v) {
        double d2 = 0;
        for (int c = 0; c < 3; ++c) {
          const double dd = verts[3 * v + c] - skel.pos[j][c];
          d2 += dd * dd;
        }
        const double w = std::exp(-d2 / (2 * sigma * sigma));
        reg[static_cast<std::size_t>(j) * n + v] = w;
        total += w;
      }
      for (int v = 0; v < n; ++v) reg[static_cast<std::size_t>(j) * n + v] /= total;
    }
    return reg;
  };

  // Shape basis: direction 0 is a global size mode; the rest are smooth
  // random fields, odd in x so mirrored vertices deform symmetrically.
  std::vector<double> basis(static_cast<std::size_t>(3 * n) * d, 0.0);
  for (int dd = 0; dd < d; ++dd) {
    double c[12];
    for (auto& cc : c) cc = brng.normal(0.0, 1.0);
    for (int v = 0; v < n; ++v) {
      const double x = verts[3 * v], y = verts[3 * v + 1], z = verts[3 * v + 2];
      double bx, by, bz;
      if (dd == 0) {
        bx = 0.06 * x;
        by = 0.06 * y;
        bz = 0.06 * z;
      } else {
        const double x2 = x * x;
        bx = 0.05 * x * (c[0] + c[1] * y + c[2] * z + c[3] * (x2 + z * z));
        by = 0.05 * (c[4] + c[5] * y + c[6] * z + c[7] * x2);
        bz = 0.05 * (c[8] + c[9] * y + c[10] * z + c[11] * x2);
      }
      basis[(3 * static_cast<std::size_t>(v)) * d + dd] = bx;
      basis[(3 * static_cast<std::size_t>(v) + 1) * d + dd] = by;
      basis[(3 * static_cast<std::size_t>(v) + 2) * d + dd] = bz;
    }
  }

  BodyModel model;
  model.vertex_count = n;
  model.joint_count = k;
  model.shape_dim = d;
  model.seed = seed;
  model.parent = skel.parent;
  model.rest_regressor = Tensor::from_data({k, n}, make_regressor(0.12));
  model.joint_regressor = Tensor::from_data({k, n}, make_regressor(0.08));
  model.template_vertices = Tensor::from_data({n, 3}, std::move(verts));
  model.shape_basis = Tensor::from_data({3 * n, d}, std::move(basis));
  model.skinning = Tensor::from_data({n, k}, std::move(skin));
  model.finalize();
  return model;
}

// ---- model file ----------------------------------------------------------

namespace {

nlohmann::json matrix_json(const Tensor& t, int rows, int cols) {
  nlohmann::json out = nlohmann::json::array();
  const auto d = t.data();
  for (int r = 0; r < rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < cols; ++c) row.push_back(d[static_cast<std::size_t>(r) * cols + c]);
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<double> parse_matrix(const nlohmann::json& j, int rows, int cols, const char* what) {
  if (!j.is_array() || static_cast<int>(j.size()) != rows) {
    throw std::invalid_argument(std::string("model file: ") + what + " has wrong row count");
  }
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(rows) * cols);
  for (const auto& row : j) {
    if (!row.is_array() || static_cast<int>(row.size()) != cols) {
      throw std::invalid_argument(std::string("model file: ") + what + " has wrong column count");
    }
    for (const auto& v : row) {
      if (!v.is_number()) throw std::invalid_argument(std::string("model file: ") + what + " has a non-numeric entry");
      out.push_back(v.get<double>());
    }
  }
  return out;
}

}  // namespace

std::string model_to_json(const BodyModel& model) {
  const int n = model.vertex_count, k = model.joint_count, d = model.shape_dim;
  nlohmann::json j;
  j["meta"] = {{"N", n}, {"K", k}, {"D_beta", d}, {"seed", model.seed}};
  j["template"] = matrix_json(model.template_vertices, n, 3);
  // shape_basis is stored nested N x 3 x D
  {
    nlohmann::json basis = nlohmann::json::array();
    const auto b = model.shape_basis.data();
    for (int v = 0; v < n; ++v) {
      nlohmann::json vert = nlohmann::json::array();
      for (int axis = 0; axis < 3; ++axis) {
        nlohmann::json dir = nlohmann::json::array();
        for (int dd = 0; dd < d; ++dd) {
          dir.push_back(b[(3 * static_cast<std::size_t>(v) + axis) * d + dd]);
        }
        vert.push_back(std::move(dir));
      }
      basis.push_back(std::move(vert));
    }
    j["shape_basis"] = std::move(basis);
  }
  j["tree"] = model.parent;
  j["rest_regressor"] = matrix_json(model.rest_regressor, k, n);
  j["skinning"] = matrix_json(model.skinning, n, k);
  j["joint_regressor"] = matrix_json(model.joint_regressor, k, n);
  return j.dump();
}

BodyModel model_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(std::string("model file: not valid JSON: ") + e.what());
  }
  for (const char* key :
       {"meta", "template", "shape_basis", "tree", "rest_regressor", "skinning", "joint_regressor"}) {
    if (!j.contains(key)) throw std::invalid_argument(std::string("model file: missing key ") + key);
  }
  const auto& meta = j["meta"];
  for (const char* key : {"N", "K", "D_beta", "seed"}) {
    if (!meta.contains(key)) throw std::invalid_argument(std::string("model file: meta missing ") + key);
  }
  const int n = meta["N"].get<int>();
  const int k = meta["K"].get<int>();
  const int d = meta["D_beta"].get<int>();

  BodyModel model;
  model.vertex_count = n;
  model.joint_count = k;
  model.shape_dim = d;
  model.seed = meta["seed"].get<std::uint64_t>();
  if (!j["tree"].is_array() || static_cast<int>(j["tree"].size()) != k) {
    throw std::invalid_argument("model file: tree has wrong size");
  }
  model.parent = j["tree"].get<std::vector<int>>();
  model.template_vertices = Tensor::from_data({n, 3}, parse_matrix(j["template"], n, 3, "template"));

  const auto& basis = j["shape_basis"];
  if (!basis.is_array() || static_cast<int>(basis.size()) != n) {
    throw std::invalid_argument("model file: shape_basis has wrong vertex count");
  }
  std::vector<double> bdata(static_cast<std::size_t>(3 * n) * d);
  for (int v = 0; v < n; ++v) {
    const auto& vert = basis[v];
    if (!vert.is_array() || vert.size() != 3) {
      throw std::invalid_argument("model file: shape_basis vertex entry must have 3 axes");
    }
    for (int axis = 0; axis < 3; ++axis) {
      const auto& dir = vert[axis];
      if (!dir.is_array() || static_cast<int>(dir.size()) != d) {
        throw std::invalid_argument("model file: shape_basis direction count mismatch");
      }
      for (int dd = 0; dd < d; ++dd) {
        bdata[(3 * static_cast<std::size_t>(v) + axis) * d + dd] = dir[dd].get<double>();
      }
    }
  }
  model.shape_basis = Tensor::from_data({3 * n, d}, std::move(bdata));
  model.rest_regressor = Tensor::from_data({k, n}, parse_matrix(j["rest_regressor"], k, n, "rest_regressor"));
  model.skinning = Tensor::from_data({n, k}, parse_matrix(j["skinning"], n, k, "skinning"));
  model.joint_regressor =
      Tensor::from_data({k, n}, parse_matrix(j["joint_regressor"], k, n, "joint_regressor"));
  model.finalize();
  return model;
}

void save_model(const BodyModel& model, const std::string& path) {
  write_text_file(path, model_to_json(model));
}

BodyModel load_model(const std::string& path) { return model_from_json(read_text_file(path)); }

std::string model_hash_hex(const BodyModel& model) {
  const std::string text = model_to_json(model);
  const std::uint64_t h = fnv1a64({text.data(), text.size()});
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

std::vector<double> joints_from_params(const BodyModel& model, std::span<const double> beta,
                                       std::span<const double> theta) {
  Tensor b = Tensor::from_data({model.shape_dim}, {beta.begin(), beta.end()});
  Tensor t = Tensor::from_data({3 * model.joint_count}, {theta.begin(), theta.end()});
  Tensor x = regress_joints(model, forward_model(model, b, t));
  return {x.data().begin(), x.data().end()};
}

std::vector<double> project_points(std::span<const double> joints3d, std::span<const double> delta,
                                   const Camera& cam) {
  const int k = static_cast<int>(joints3d.size() / 3);
  Tensor x = Tensor::from_data({k, 3}, {joints3d.begin(), joints3d.end()});
  Tensor dl = Tensor::from_data({3}, {delta.begin(), delta.end()});
  Tensor j = project(x, dl, cam);
  return {j.data().begin(), j.data().end()};
}

void aa_to_matrix(const double v[3], double r[9]) { rodrigues_matrix(v, r); }

void matrix_to_aa(const double r[9], double v[3]) {
  const double tr = r[0] + r[4] + r[8];
  const double c = std::clamp((tr - 1.0) / 2.0, -1.0, 1.0);
  const double theta = std::acos(c);
  const double w[3] = {r[7] - r[5], r[2] - r[6], r[3] - r[1]};
  if (theta < 1e-8) {
    for (int i = 0; i < 3; ++i) v[i] = 0.5 * w[i];
    return;
  }
  if (theta > 3.14159265358979323846 - 1e-6) {
    // Near pi: axis from the dominant diagonal of (R + I)/2.
    int a = 0;
    if (r[4] > r[0]) a = 1;
    if (r[8] > r[4 * a]) a = 2;
    double axis[3];
    axis[a] = std::sqrt(std::max(0.0, (r[4 * a] + 1.0) / 2.0));
    const int b = (a + 1) % 3, cc = (a + 2) % 3;
    axis[b] = (r[3 * a + b] + r[3 * b + a]) / (4.0 * axis[a]);
    axis[cc] = (r[3 * a + cc] + r[3 * cc + a]) / (4.0 * axis[a]);
    if (w[a] < 0.0) {
      for (int i = 0; i < 3; ++i) axis[i] = -axis[i];
    }
    double norm = std::sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]);
    for (int i = 0; i < 3; ++i) v[i] = theta * axis[i] / norm;
    return;
  }
  const double s = theta / (2.0 * std::sin(theta));
  for (int i = 0; i < 3; ++i) v[i] = s * w[i];
}

std::vector<GradientCase> body_gradient_cases() {
  auto run_trials = [](Rng& rng, int trials, const std::function<FdReport(Rng&)>& one) {
    FdReport worst;
    worst.pass = true;
    for (int t = 0; t < trials; ++t) {
      Rng sub = rng.derive("trial", static_cast<std::uint64_t>(t));
      FdReport r = one(sub);
      if (r.non_finite) return r;
      if (r.max_rel_err >= worst.max_rel_err) {
        worst.max_rel_err = r.max_rel_err;
        worst.worst = r.worst;
      }
      worst.max_abs_err = std::max(worst.max_abs_err, r.max_abs_err);
      worst.pass = worst.pass && r.pass;
    }
    return worst;
  };

  std::vector<GradientCase> cases;

  cases.push_back({"rodrigues", [run_trials](Rng& rng, int trials) {
                     return run_trials(rng, trials, [](Rng& r) {
                       std::vector<double> v(3);
                       for (auto& x : v) x = r.uniform(-1.2, 1.2);
                       Tensor point[] = {Tensor::from_data({3}, std::move(v), true)};
                       Rng probe = r.derive("probe");
                       return finite_diff_check(
                           [&probe](std::span<const Tensor> p) {
                             Rng pr = probe;
                             return random_probe_loss(rodrigues(p[0]), pr);
                           },
                           point, 1e-5, 1e-4);
                     });
                   }});

  cases.push_back({"rodrigues_small_angle", [run_trials](Rng& rng, int trials) {
                     return run_trials(rng, trials, [](Rng& r) {
                       std::vector<double> v(3);
                       for (auto& x : v) x = r.normal(0.0, 1e-6);
                       Tensor point[] = {Tensor::from_data({3}, std::move(v), true)};
                       Rng probe = r.derive("probe");
                       return finite_diff_check(
                           [&probe](std::span<const Tensor> p) {
                             Rng pr = probe;
                             return random_probe_loss(rodrigues(p[0]), pr);
                           },
                           point, 1e-5, 1e-4);
                     });
                   }});

  cases.push_back({"project", [run_trials](Rng& rng, int trials) {
                     return run_trials(rng, trials, [](Rng& r) {
                       const int k = 4;
                       std::vector<double> x(3 * k);
                       for (int j = 0; j < k; ++j) {
                         x[3 * j] = r.uniform(-1, 1);
                         x[3 * j + 1] = r.uniform(-1, 1);
                         x[3 * j + 2] = r.uniform(4.0, 8.0);
                       }
                       Tensor point[] = {Tensor::from_data({k, 3}, std::move(x), true),
                                         Tensor::from_data({3}, {r.uniform(-0.5, 0.5),
                                                                 r.uniform(-0.5, 0.5),
                                                                 r.uniform(1.0, 2.0)},
                                                           true)};
                       Camera cam{100.0, 0.0, 0.0};
                       Rng probe = r.derive("probe");
                       return finite_diff_check(
                           [&probe, cam](std::span<const Tensor> p) {
                             Rng pr = probe;
                             return random_probe_loss(project(p[0], p[1], cam), pr);
                           },
                           point, 1e-5, 1e-4);
                     });
                   }});

  cases.push_back(
      {"body_pipeline", [run_trials](Rng& rng, int trials) {
         const BodyModel model = generate_toy_model(424242, 50, 6, 4);
         const Camera cam = Camera::for_canonical(64);
         return run_trials(rng, std::max(1, trials / 4), [&model, cam](Rng& r) {
           std::vector<double> beta(static_cast<std::size_t>(model.shape_dim));
           for (auto& b : beta) b = r.uniform(-1.0, 1.0);
           std::vector<double> theta(static_cast<std::size_t>(3 * model.joint_count));
           for (auto& t : theta) t = r.uniform(-0.5, 0.5);
           Tensor point[] = {Tensor::from_data({model.shape_dim}, std::move(beta), true),
                             Tensor::from_data({3 * model.joint_count}, std::move(theta), true),
                             Tensor::from_data({3}, {r.uniform(-0.3, 0.3), r.uniform(-0.3, 0.3),
                                                     r.uniform(50.0, 70.0)},
                                               true)};
           Rng probe = r.derive("probe");
           return finite_diff_check(
               [&model, cam, &probe](std::span<const Tensor> p) {
                 Rng pr = probe;
                 Tensor mesh = forward_model(model, p[0], p[1]);
                 Tensor x = regress_joints(model, mesh);
                 Tensor j = project(x, p[2], cam);
                 return add(add(random_probe_loss(mesh, pr), random_probe_loss(x, pr)),
                            random_probe_loss(j, pr));
               },
               point, 1e-5, 1e-4);
         });
       }});

  return cases;
}

}  // namespace rsc

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "rsc/gradcheck.hpp"
#include "rsc/tensor.hpp"

namespace rsc {

// Differentiable articulated body: shape blendshapes, axis-angle kinematics,
// linear blend skinning with rest-pose binding, joint regression and
// perspective projection. All tensors are constants; gradients flow through
// the shape/pose/camera parameters fed to the ops below.
struct BodyModel {
  int vertex_count = 0;
  int joint_count = 0;
  int shape_dim = 0;
  std::uint64_t seed = 0;
  std::vector<int> parent;   // per joint, -1 marks the single root
  Tensor template_vertices;  // {N,3}
  Tensor shape_basis;        // {3N,D}, element (n,axis,d) at [(3n+axis)*D + d]
  Tensor rest_regressor;     // {K,N}, rows sum to 1
  Tensor skinning;           // {N,K}, rows sum to 1, nonnegative
  Tensor joint_regressor;    // {K,N}, rows sum to 1

  // Derived: skinning column k replicated across xyz, used by the LBS blend.
  std::vector<Tensor> skin_cols3;  // per joint {N,3}

  void finalize();        // validates and builds derived tensors
  void validate() const;  // throws std::invalid_argument on violation
};

struct Camera {
  double focal = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  // The canonical weak-crop convention: focal 5000 * size/224, principal
  // point at the image center.
  static Camera for_canonical(int canonical_size);
};

// Axis-angle {3} -> rotation matrix {3,3}; continuous at the zero vector.
Tensor rodrigues(const Tensor& axis_angle);

// Posed mesh {N,3} from shape coefficients beta {D} and pose theta {3K}.
Tensor forward_model(const BodyModel& model, const Tensor& beta, const Tensor& theta);

// X {K,3} = joint_regressor * mesh.
Tensor regress_joints(const BodyModel& model, const Tensor& mesh);

// Perspective projection of X {K,3} translated by delta {3} -> {K,2} pixels.
// Rejects non-positive depth per joint.
Tensor project(const Tensor& joints3d, const Tensor& delta, const Camera& cam);

// Deterministic mirror-symmetric humanoid stand-in for externally supplied
// model files. Requires n_vertices >= n_joints >= 2, shape_dim >= 1.
BodyModel generate_toy_model(std::uint64_t seed, int n_vertices, int n_joints, int shape_dim);

std::string model_to_json(const BodyModel& model);
BodyModel model_from_json(const std::string& text);
void save_model(const BodyModel& model, const std::string& path);
BodyModel load_model(const std::string& path);
std::string model_hash_hex(const BodyModel& model);

// Plain-value conveniences (forward only, no graph required).
std::vector<double> joints_from_params(const BodyModel& model, std::span<const double> beta,
                                       std::span<const double> theta);
std::vector<double> project_points(std::span<const double> joints3d, std::span<const double> delta,
                                   const Camera& cam);

// Axis-angle helpers on plain values (used by augmentation).
void aa_to_matrix(const double v[3], double r[9]);
void matrix_to_aa(const double r[9], double v[3]);

// Gradient cases for the primitives registered by this module plus the
// composed beta/theta/delta pipeline.
std::vector<GradientCase> body_gradient_cases();

}  // namespace rsc

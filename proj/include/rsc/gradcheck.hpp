#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rsc/rng.hpp"
#include "rsc/tensor.hpp"

namespace rsc {

struct FdReport {
  bool pass = false;
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::string worst;        // element that produced max_rel_err
  bool non_finite = false;  // a probe point evaluated to a non-finite value
};

using ScalarFn = std::function<Tensor(std::span<const Tensor>)>;

// Compares reverse-mode gradients of fn (a scalar-valued graph builder) with
// central finite differences (f(x+e)-f(x-e))/2e, componentwise over every
// element of every point tensor. Relative error uses a max(1,|analytic|)
// denominator. The numeric side re-runs fn forward-only and never touches the
// tape, so the two routes are independent.
FdReport finite_diff_check(const ScalarFn& fn, std::span<Tensor> point, double epsilon,
                           double tolerance);

struct GradientCase {
  std::string name;
  // Runs the case at `trials` random points, aggregates the worst error.
  std::function<FdReport(Rng&, int trials)> run;
};

// One case per registered tensor primitive, sampled away from
// non-differentiable loci (ReLU kinks, log domain edges).
std::vector<GradientCase> primitive_gradient_cases();

// Scalarizes an arbitrary tensor with a fixed random linear functional so the
// check exercises every output component.
Tensor random_probe_loss(const Tensor& out, Rng& rng);

}  // namespace rsc

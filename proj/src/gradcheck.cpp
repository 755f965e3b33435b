#include "rsc/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

namespace rsc {

Tensor random_probe_loss(const Tensor& out, Rng& rng) {
  std::vector<double> coeffs(static_cast<std::size_t>(out.size()));
  for (auto& c : coeffs) c = rng.uniform(-1.0, 1.0);
  Tensor probe = Tensor::from_data(Shape{static_cast<int>(out.size())}, std::move(coeffs));
  return sum(mul(reshape(out, {static_cast<int>(out.size())}), probe));
}

FdReport finite_diff_check(const ScalarFn& fn, std::span<Tensor> point, double epsilon,
                           double tolerance) {
  if (epsilon <= 0.0) throw std::invalid_argument("finite_diff_check: epsilon must be positive");
  FdReport report;

  Graph graph;
  Tensor root;
  {
    Graph::Scope scope(graph);
    root = fn(point);
  }
  if (!root.defined() || root.size() != 1) {
    throw std::invalid_argument("finite_diff_check: fn must produce a scalar");
  }
  graph.backward(root);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(point.size());
  for (auto& t : point) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  for (std::size_t p = 0; p < point.size(); ++p) {
    auto data = point[p].raw_data();
    for (std::int64_t i = 0; i < point[p].size(); ++i) {
      const double orig = data[i];
      data[i] = orig + epsilon;
      const double f_plus = fn(point).value();
      data[i] = orig - epsilon;
      const double f_minus = fn(point).value();
      data[i] = orig;
      if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
        report.non_finite = true;
        report.worst = "input#" + std::to_string(p) + "[" + std::to_string(i) + "]";
        report.pass = false;
        return report;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * epsilon);
      const double ana = analytic[p][static_cast<std::size_t>(i)];
      const double abs_err = std::abs(numeric - ana);
      const double rel_err = abs_err / std::max(1.0, std::abs(ana));
      if (rel_err > report.max_rel_err) {
        report.max_rel_err = rel_err;
        report.worst = "input#" + std::to_string(p) + "[" + std::to_string(i) + "]";
      }
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
    }
  }
  report.pass = report.max_rel_err < tolerance;
  return report;
}

namespace {

constexpr double kEps = 1e-5;
constexpr double kTol = 1e-4;

Tensor leaf(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> d(static_cast<std::size_t>(numel(shape)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

FdReport run_trials(Rng& rng, int trials,
                    const std::function<FdReport(Rng&)>& one) {
  FdReport worst;
  worst.pass = true;
  for (int t = 0; t < trials; ++t) {
    Rng sub = rng.derive("trial", static_cast<std::uint64_t>(t));
    FdReport r = one(sub);
    if (r.non_finite) return r;
    if (r.max_rel_err >= worst.max_rel_err) {
      worst.max_rel_err = r.max_rel_err;
      worst.max_abs_err = std::max(worst.max_abs_err, r.max_abs_err);
      worst.worst = r.worst;
    }
    worst.pass = worst.pass && r.pass;
  }
  return worst;
}

GradientCase make_case(std::string name, std::function<FdReport(Rng&)> one) {
  return {std::move(name), [one = std::move(one)](Rng& rng, int trials) {
            return run_trials(rng, trials, one);
          }};
}

}  // namespace

std::vector<GradientCase> primitive_gradient_cases() {
  std::vector<GradientCase> cases;

  cases.push_back(make_case("add", [](Rng& rng) {
    Tensor point[] = {leaf({3, 4}, rng), leaf({3, 4}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(add(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("add_scalar_broadcast", [](Rng& rng) {
    Tensor point[] = {leaf({1}, rng), leaf({5}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(add(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("add_row_broadcast", [](Rng& rng) {
    Tensor point[] = {leaf({4, 3}, rng), leaf({3}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(add(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("mul", [](Rng& rng) {
    Tensor point[] = {leaf({3, 4}, rng), leaf({3, 4}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(mul(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("mul_scalar_broadcast", [](Rng& rng) {
    Tensor point[] = {leaf({6}, rng), leaf({1}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(mul(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("scale", [](Rng& rng) {
    Tensor point[] = {leaf({7}, rng)};
    const double c = rng.uniform(-2.0, 2.0);
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe, c](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(scale(p[0], c), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("matmul", [](Rng& rng) {
    Tensor point[] = {leaf({3, 4}, rng), leaf({4, 2}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(matmul(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("matmul_vec", [](Rng& rng) {
    Tensor point[] = {leaf({5, 3}, rng), leaf({3}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(matmul(p[0], p[1]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("transpose", [](Rng& rng) {
    Tensor point[] = {leaf({3, 5}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(transpose(p[0]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("conv2d_stride1", [](Rng& rng) {
    Tensor point[] = {leaf({2, 6, 6}, rng), leaf({3, 2, 3, 3}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(conv2d(p[0], p[1], 1, 1), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("conv2d_stride2", [](Rng& rng) {
    Tensor point[] = {leaf({2, 8, 8}, rng), leaf({3, 2, 3, 3}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(conv2d(p[0], p[1], 2, 1), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("channel_affine", [](Rng& rng) {
    Tensor point[] = {leaf({3, 4, 4}, rng), leaf({3}, rng), leaf({3}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(channel_affine(p[0], p[1], p[2]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("relu", [](Rng& rng) {
    // keep probes away from the kink at 0
    std::vector<double> d(12);
    for (auto& v : d) {
      v = rng.uniform(0.1, 1.0);
      if (rng.uniform() < 0.5) v = -v;
    }
    Tensor point[] = {Tensor::from_data({12}, std::move(d), true)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(relu(p[0]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("global_avg_pool", [](Rng& rng) {
    Tensor point[] = {leaf({3, 4, 5}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(global_avg_pool(p[0]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("concat", [](Rng& rng) {
    Tensor point[] = {leaf({3}, rng), leaf({4}, rng), leaf({2}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          Tensor parts[] = {p[0], p[1], p[2]};
          return random_probe_loss(concat(parts), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("slice", [](Rng& rng) {
    Tensor point[] = {leaf({9}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(slice(p[0], 2, 5), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("reshape", [](Rng& rng) {
    Tensor point[] = {leaf({2, 6}, rng)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(reshape(p[0], {3, 4}), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("sum", [](Rng& rng) {
    Tensor point[] = {leaf({3, 3}, rng)};
    return finite_diff_check(
        [](std::span<const Tensor> p) { return sum(p[0]); }, point, kEps, kTol);
  }));

  cases.push_back(make_case("mean", [](Rng& rng) {
    Tensor point[] = {leaf({8}, rng)};
    return finite_diff_check(
        [](std::span<const Tensor> p) { return mean(p[0]); }, point, kEps, kTol);
  }));

  cases.push_back(make_case("squared_l2", [](Rng& rng) {
    Tensor point[] = {leaf({6}, rng)};
    return finite_diff_check(
        [](std::span<const Tensor> p) { return squared_l2(p[0]); }, point, kEps, kTol);
  }));

  cases.push_back(make_case("exp", [](Rng& rng) {
    Tensor point[] = {leaf({7}, rng, -2.0, 2.0)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(exp(p[0]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("log", [](Rng& rng) {
    Tensor point[] = {leaf({7}, rng, 0.5, 3.0)};
    Rng probe = rng.derive("probe");
    return finite_diff_check(
        [&probe](std::span<const Tensor> p) {
          Rng pr = probe;
          return random_probe_loss(log(p[0]), pr);
        },
        point, kEps, kTol);
  }));

  cases.push_back(make_case("cosine_similarity", [](Rng& rng) {
    Tensor point[] = {leaf({8}, rng), leaf({8}, rng)};
    return finite_diff_check(
        [](std::span<const Tensor> p) { return cosine_similarity(p[0], p[1]); }, point, kEps,
        1e-5);
  }));

  cases.push_back(make_case("log_sum_exp", [](Rng& rng) {
    Tensor point[] = {leaf({9}, rng, -3.0, 3.0)};
    return finite_diff_check(
        [](std::span<const Tensor> p) { return log_sum_exp(p[0]); }, point, kEps, kTol);
  }));

  return cases;
}

}  // namespace rsc

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "rsc/losses.hpp"
#include "rsc/rng.hpp"
#include "rsc/tensor.hpp"

using namespace rsc;

namespace {

// Independent (|Q|+1)-way cross-entropy over explicitly materialized logits.
double oracle_contrastive(const std::vector<double>& phi_i, const std::vector<double>& phi_j,
                          const std::vector<std::vector<double>>& queue, double tau) {
  auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
  };
  const double lp = cosine(phi_i, phi_j) / tau;
  double denom = std::exp(lp);
  for (const auto& q : queue) denom += std::exp(cosine(q, phi_j) / tau);
  return -std::log(std::exp(lp) / denom);
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  for (double& x : v) x /= n;
  return v;
}

PredBundle make_pred(const LabelSet& gt, int shape_dim, bool exact, Rng* rng = nullptr) {
  PredBundle p;
  p.shape_dim = shape_dim;
  p.joint_count = gt.joint_count;
  std::vector<double> params(gt.beta.begin(), gt.beta.end());
  params.insert(params.end(), gt.theta.begin(), gt.theta.end());
  params.insert(params.end(), gt.delta.begin(), gt.delta.end());
  std::vector<double> x3 = gt.joints3d;
  std::vector<double> j2 = gt.joints2d;
  if (!exact && rng) {
    for (auto& v : params) v += rng->uniform(-0.5, 0.5);
    for (auto& v : x3) v += rng->uniform(-0.5, 0.5);
    for (auto& v : j2) v += rng->uniform(-3, 3);
  }
  p.params = Tensor::from_data({static_cast<int>(params.size())}, params, true);
  p.joints3d = Tensor::from_data({gt.joint_count, 3}, x3, true);
  p.joints2d = Tensor::from_data({gt.joint_count, 2}, j2, true);
  return p;
}

LabelSet full_labels(int k, int d, Rng& rng) {
  LabelSet l;
  l.joint_count = k;
  l.has_3d = true;
  for (int i = 0; i < 2 * k; ++i) l.joints2d.push_back(rng.uniform(0, 64));
  for (int i = 0; i < 3 * k; ++i) l.joints3d.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < d; ++i) l.beta.push_back(rng.uniform(-1, 1));
  for (int i = 0; i < 3 * k; ++i) l.theta.push_back(rng.uniform(-0.5, 0.5));
  l.delta = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(40, 70)};
  return l;
}

}  // namespace

TEST_SUITE_BEGIN("losses");

TEST_CASE("basic loss is zero for a perfect prediction with full labels") {
  Rng rng(1);
  LabelSet gt = full_labels(4, 3, rng);
  PredBundle pred = make_pred(gt, 3, true);
  PredBundle preds[] = {pred};
  Tensor loss = basic_loss(preds, gt, {});
  CHECK(loss.value() == 0.0);
}

TEST_CASE("2D-only loss matches the closed form 5*(9+16)") {
  LabelSet gt;
  gt.joint_count = 1;
  gt.joints2d = {10.0, 20.0};
  gt.has_3d = false;

  PredBundle pred;
  pred.shape_dim = 2;
  pred.joint_count = 1;
  pred.params = Tensor::from_data({2 + 3 + 3}, std::vector<double>(8, 0.3), true);
  pred.joints3d = Tensor::from_data({1, 3}, {9, 9, 9}, true);
  pred.joints2d = Tensor::from_data({1, 2}, {13.0, 24.0}, true);  // off by (3,4)

  PredBundle preds[] = {pred};
  LossWeights w;
  w.lambda2 = 5.0;
  Tensor loss = basic_loss(preds, gt, w);
  CHECK(loss.value() == doctest::Approx(125.0).epsilon(1e-14));
}

TEST_CASE("a unit 3D offset on one joint adds lambda1") {
  Rng rng(2);
  LabelSet gt = full_labels(1, 2, rng);
  PredBundle pred = make_pred(gt, 2, true);
  auto x = pred.joints3d.raw_data();
  x[0] += 1.0;  // offset (1,0,0)
  PredBundle preds[] = {pred};
  Tensor loss = basic_loss(preds, gt, {});
  CHECK(loss.value() == doctest::Approx(5.0).epsilon(1e-13));
}

TEST_CASE("without 3D labels the first two terms vanish from the gradient") {
  Rng rng(3);
  LabelSet gt = full_labels(3, 2, rng);
  gt.has_3d = false;
  gt.joints3d.clear();
  gt.beta.clear();
  gt.theta.clear();

  PredBundle pred;
  pred.shape_dim = 2;
  pred.joint_count = 3;
  pred.params = Tensor::from_data({2 + 9 + 3}, std::vector<double>(14, 0.7), true);
  pred.joints3d = Tensor::from_data({3, 3}, std::vector<double>(9, 0.5), true);
  std::vector<double> j2(gt.joints2d);
  for (auto& v : j2) v += 2.0;
  pred.joints2d = Tensor::from_data({3, 2}, j2, true);

  Graph g;
  {
    Graph::Scope s(g);
    PredBundle preds[] = {pred};
    g.backward(basic_loss(preds, gt, {}));
  }
  for (double v : pred.params.grad()) CHECK(v == 0.0);
  for (double v : pred.joints3d.grad()) CHECK(v == 0.0);
  bool any = false;
  for (double v : pred.joints2d.grad()) any = any || v != 0.0;
  CHECK(any);
}

TEST_CASE("missing 2D labels are an error") {
  LabelSet gt;
  gt.joint_count = 2;
  gt.has_3d = false;
  PredBundle pred;
  pred.shape_dim = 1;
  pred.joint_count = 2;
  pred.params = Tensor::zeros({1 + 6 + 3}, true);
  pred.joints3d = Tensor::zeros({2, 3}, true);
  pred.joints2d = Tensor::zeros({2, 2}, true);
  PredBundle preds[] = {pred};
  CHECK_THROWS_AS(basic_loss(preds, gt, {}), std::invalid_argument);
}

TEST_CASE("ss_weight formula and the P=5 weight matrix") {
  CHECK(ss_weight(1, 3) == 2.0);
  CHECK(ss_weight(3, 1) == 0.0);
  CHECK(ss_weight(2, 2) == 0.0);
  int nonzero = 0;
  for (int i = 1; i <= 5; ++i) {
    for (int j = 1; j <= 5; ++j) {
      const double w = ss_weight(i, j);
      if (j > i) {
        CHECK(w == static_cast<double>(j - i));
        ++nonzero;
      } else {
        CHECK(w == 0.0);
      }
    }
  }
  CHECK(nonzero == 10);
}

TEST_CASE("self-supervision loss values and barrier semantics") {
  SUBCASE("identical outputs give zero in every mode") {
    Tensor a = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor b = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor c = Tensor::from_data({4}, {1, 2, 3, 4}, true);
    Tensor outs[] = {a, b, c};
    for (SsMode m : {SsMode::directional, SsMode::symmetric, SsMode::highest_only}) {
      CHECK(self_sup_loss(outs, m).value() == 0.0);
    }
  }
  SUBCASE("P=2 outputs differing by a unit vector give w12*1 = 1") {
    Tensor a = Tensor::from_data({3}, {0, 0, 0}, true);
    Tensor b = Tensor::from_data({3}, {1, 0, 0}, true);
    Tensor outs[] = {a, b};
    CHECK(self_sup_loss(outs, SsMode::directional).value() == doctest::Approx(1.0));
  }
  SUBCASE("directional gradients vanish exactly for the higher-resolution operand") {
    Rng rng(5);
    std::vector<Tensor> outs;
    for (int i = 0; i < 5; ++i) {
      std::vector<double> d(6);
      for (auto& v : d) v = rng.uniform(-1, 1);
      outs.push_back(Tensor::from_data({6}, d, true));
    }
    Graph g;
    {
      Graph::Scope s(g);
      g.backward(self_sup_loss(outs, SsMode::directional));
    }
    // resolution 1 only ever appears behind the barrier
    for (double v : outs[0].grad()) CHECK(v == 0.0);
    bool lowest_nonzero = false;
    for (double v : outs[4].grad()) lowest_nonzero = lowest_nonzero || v != 0.0;
    CHECK(lowest_nonzero);
  }
  SUBCASE("symmetric mode backpropagates into both operands") {
    Tensor a = Tensor::from_data({2}, {0.0, 0.0}, true);
    Tensor b = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor outs[] = {a, b};
    Graph g;
    {
      Graph::Scope s(g);
      g.backward(self_sup_loss(outs, SsMode::symmetric));
    }
    bool a_nonzero = false, b_nonzero = false;
    for (double v : a.grad()) a_nonzero = a_nonzero || v != 0.0;
    for (double v : b.grad()) b_nonzero = b_nonzero || v != 0.0;
    CHECK(a_nonzero);
    CHECK(b_nonzero);
  }
  SUBCASE("highest_only restricts pairs to i=1") {
    Tensor a = Tensor::from_data({1}, {0.0}, true);
    Tensor b = Tensor::from_data({1}, {1.0}, true);
    Tensor c = Tensor::from_data({1}, {3.0}, true);
    Tensor outs[] = {a, b, c};
    // pairs (1,2) and (1,3): 1*1 + 2*9 = 19; the (2,3) pair is excluded
    CHECK(self_sup_loss(outs, SsMode::highest_only).value() == doctest::Approx(19.0));
  }
  SUBCASE("fewer than two outputs is an error") {
    Tensor a = Tensor::from_data({2}, {1.0, 2.0}, true);
    Tensor outs[] = {a};
    CHECK_THROWS_AS(self_sup_loss(outs, SsMode::directional), std::invalid_argument);
  }
}

TEST_CASE("cross-module: barrier on the higher-resolution branch freezes its parameters") {
  // two distinct parameter sets produce the two branch outputs
  Tensor w_hi = Tensor::from_data({3}, {0.4, -0.2, 0.9}, true);
  Tensor w_lo = Tensor::from_data({3}, {-0.3, 0.8, 0.1}, true);
  Tensor x = Tensor::from_data({3}, {1.0, 2.0, -1.0});
  Graph g;
  {
    Graph::Scope s(g);
    Tensor out_hi = mul(w_hi, x);
    Tensor out_lo = mul(w_lo, x);
    Tensor outs[] = {out_hi, out_lo};
    g.backward(self_sup_loss(outs, SsMode::directional));
  }
  for (double v : w_hi.grad()) CHECK(v == 0.0);
  bool lo_nonzero = false;
  for (double v : w_lo.grad()) lo_nonzero = lo_nonzero || v != 0.0;
  CHECK(lo_nonzero);
}

TEST_CASE("contrastive loss with uniform similarities returns ln(Q+1)") {
  const std::vector<double> u = unit({1, 1, 1, 1});
  FeatureQueue q(4, 4);
  q.update_raw({u, u, u, u});
  Tensor phi_i = Tensor::from_data({4}, u);
  Tensor phi_j = Tensor::from_data({4}, u, true);
  Tensor g = contrastive_g(phi_i, phi_j, q, 0.1);
  CHECK(std::abs(g.value() - std::log(5.0)) < 1e-12);
}

TEST_CASE("identical unit pair against two orthogonal negatives at tau 0.1") {
  const std::vector<double> e0 = {1, 0, 0, 0};
  FeatureQueue q(2, 4);
  q.update_raw({{0, 1, 0, 0}, {0, 0, 1, 0}});
  Tensor phi_i = Tensor::from_data({4}, e0);
  Tensor phi_j = Tensor::from_data({4}, e0, true);
  Tensor g = contrastive_g(phi_i, phi_j, q, 0.1);
  const double expected = -std::log(std::exp(10.0) / (std::exp(10.0) + 2.0));
  CHECK(g.value() == doctest::Approx(expected).epsilon(1e-10));
  CHECK(g.value() == doctest::Approx(9.0799e-5).epsilon(1e-4));
}

TEST_CASE("contrastive loss equals the brute-force cross-entropy oracle") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const int dim = 2 + static_cast<int>(rng.uniform_int(0, 14));
    const int qn = 1 + static_cast<int>(rng.uniform_int(0, 63));
    const double tau = (trial % 3 == 0) ? 0.05 : (trial % 3 == 1 ? 0.1 : 1.0);
    std::vector<std::vector<double>> queue;
    for (int i = 0; i < qn; ++i) {
      std::vector<double> v(dim);
      for (auto& x : v) x = rng.uniform(-1, 1);
      queue.push_back(unit(v));
    }
    std::vector<double> pi(dim), pj(dim);
    for (auto& x : pi) x = rng.uniform(-1, 1);
    for (auto& x : pj) x = rng.uniform(-1, 1);

    FeatureQueue q(qn, dim);
    q.update_raw(queue);
    Tensor g = contrastive_g(Tensor::from_data({dim}, pi), Tensor::from_data({dim}, pj, true), q,
                             tau);
    const double expected = oracle_contrastive(pi, pj, queue, tau);
    CHECK(std::abs(g.value() - expected) < 1e-10);
    CHECK(g.value() >= 0.0);
  }
}

TEST_CASE("contrastive loss is scale-invariant in either argument") {
  Rng rng(13);
  std::vector<double> pi(8), pj(8);
  for (auto& x : pi) x = rng.uniform(-1, 1);
  for (auto& x : pj) x = rng.uniform(-1, 1);
  std::vector<std::vector<double>> queue;
  for (int i = 0; i < 6; ++i) {
    std::vector<double> v(8);
    for (auto& x : v) x = rng.uniform(-1, 1);
    queue.push_back(unit(v));
  }
  FeatureQueue q(6, 8);
  q.update_raw(queue);

  auto eval = [&](std::vector<double> a, std::vector<double> b) {
    return contrastive_g(Tensor::from_data({8}, a), Tensor::from_data({8}, b, true), q, 0.1)
        .value();
  };
  const double base = eval(pi, pj);
  std::vector<double> pi_scaled(pi), pj_scaled(pj);
  for (auto& x : pi_scaled) x *= 7.3;
  for (auto& x : pj_scaled) x *= 7.3;
  CHECK(std::abs(eval(pi_scaled, pj) - base) < 1e-12);
  CHECK(std::abs(eval(pi, pj_scaled) - base) < 1e-12);
}

TEST_CASE("contrastive loss is invariant under queue permutation") {
  Rng rng(17);
  std::vector<std::vector<double>> queue;
  for (int i = 0; i < 12; ++i) {
    std::vector<double> v(5);
    for (auto& x : v) x = rng.uniform(-1, 1);
    queue.push_back(unit(v));
  }
  std::vector<double> pi(5), pj(5);
  for (auto& x : pi) x = rng.uniform(-1, 1);
  for (auto& x : pj) x = rng.uniform(-1, 1);

  FeatureQueue q1(12, 5);
  q1.update_raw(queue);
  auto shuffled = queue;
  rng.shuffle(shuffled);
  FeatureQueue q2(12, 5);
  q2.update_raw(shuffled);

  const double a =
      contrastive_g(Tensor::from_data({5}, pi), Tensor::from_data({5}, pj, true), q1, 0.1).value();
  const double b =
      contrastive_g(Tensor::from_data({5}, pi), Tensor::from_data({5}, pj, true), q2, 0.1).value();
  CHECK(std::abs(a - b) < 1e-12);
}

TEST_CASE("contrastive loss decreases as the positive similarity grows") {
  FeatureQueue q(3, 3);
  q.update_raw({unit({1, 1, 0}), unit({0, 1, 1}), unit({1, 0, 1})});
  Tensor phi_j = Tensor::from_data({3}, unit({1, 0, 0}), true);
  double prev = 1e300;
  for (double angle : {1.2, 0.8, 0.4, 0.1, 0.0}) {
    std::vector<double> pi = {std::cos(angle), std::sin(angle), 0.0};
    const double v = contrastive_g(Tensor::from_data({3}, pi), phi_j, q, 0.1).value();
    CHECK(v < prev);
    prev = v;
  }
}

TEST_CASE("queue is FIFO with whole-batch eviction") {
  FeatureQueue q(8, 2);
  auto batch = [](double tag) {
    return std::vector<std::vector<double>>{{tag, 1}, {tag, 2}, {tag, 3}, {tag, 4}};
  };
  q.update_raw(batch(1));
  q.update_raw(batch(2));
  CHECK(q.size() == 8);
  q.update_raw(batch(3));
  CHECK(q.size() == 8);
  auto entries = q.entries();
  REQUIRE(entries.size() == 8);
  // batches 2 and 3 survive, in insertion order, unit-normalized
  for (int r = 0; r < 4; ++r) {
    CHECK(entries[r][0] == doctest::Approx(unit({2, r + 1.0})[0]).epsilon(1e-12));
  }
  for (int r = 0; r < 4; ++r) {
    CHECK(entries[4 + r][0] == doctest::Approx(unit({3, r + 1.0})[0]).epsilon(1e-12));
  }
  for (const auto& e : entries) {
    double n = 0;
    for (double v : e) n += v * v;
    CHECK(std::abs(std::sqrt(n) - 1.0) < 1e-12);
  }
}

TEST_CASE("queue rejects invalid batches") {
  FeatureQueue q(8, 2);
  CHECK_THROWS_AS(q.update_raw({{1, 0}, {0, 1}, {1, 1}}), std::invalid_argument);  // 3 does not divide 8
  std::vector<std::vector<double>> big(9, std::vector<double>{1, 0});
  CHECK_THROWS_AS(q.update_raw(big), std::invalid_argument);
  CHECK_THROWS_AS(q.update_raw({{0, 0}, {1, 0}}), std::runtime_error);  // zero norm
}

TEST_CASE("gradients never flow into queue contents") {
  FeatureQueue q(2, 3);
  Tensor f1 = Tensor::from_data({3}, {1, 0, 0}, true);
  Tensor f2 = Tensor::from_data({3}, {0, 1, 0}, true);
  Tensor batch[] = {f1, f2};
  q.update(batch);
  CHECK_FALSE(q.packed().requires_grad());

  Tensor phi_j = Tensor::from_data({3}, {0.5, 0.5, 0.1}, true);
  Graph g;
  {
    Graph::Scope s(g);
    g.backward(contrastive_g(f1, phi_j, q, 0.1));
  }
  // the enqueue sources get no gradient from their queued copies
  for (double v : f1.grad()) CHECK(v == 0.0);
  for (double v : f2.grad()) CHECK(v == 0.0);
  for (double v : q.packed().grad()) CHECK(v == 0.0);
}

TEST_CASE("feature loss variants at identical features") {
  Tensor a = Tensor::from_data({4}, {0.3, -0.2, 0.9, 0.1}, true);
  Tensor b = Tensor::from_data({4}, {0.3, -0.2, 0.9, 0.1}, true);
  Tensor feats[] = {a, b};
  CHECK(feature_loss(feats, nullptr, FeatVariant::mse, 0.1).value() == 0.0);
  CHECK(std::abs(feature_loss(feats, nullptr, FeatVariant::cosine, 0.1).value()) < 1e-12);
}

TEST_CASE("total loss composition") {
  Rng rng(23);
  const int k = 4, d = 3;
  LabelSet gt = full_labels(k, d, rng);

  std::vector<PredBundle> preds;
  for (int i = 0; i < 3; ++i) {
    PredBundle p = make_pred(gt, d, false, &rng);
    std::vector<double> feat(6);
    for (auto& v : feat) v = rng.uniform(-1, 1);
    p.feature = Tensor::from_data({6}, feat, true);
    preds.push_back(p);
  }
  FeatureQueue queue(6, 6);
  {
    std::vector<std::vector<double>> warm;
    for (int i = 0; i < 6; ++i) {
      std::vector<double> v(6);
      for (auto& x : v) x = rng.uniform(-1, 1);
      warm.push_back(v);
    }
    queue.update_raw(warm);
  }

  SUBCASE("all flags off equals the basic loss") {
    LossFlags flags;
    auto t = total_loss(preds, gt, nullptr, {}, flags, 0.1);
    Tensor b = basic_loss(std::span<const PredBundle>(preds), gt, {});
    CHECK(t.total.value() == doctest::Approx(b.value()).epsilon(1e-15));
  }
  SUBCASE("zero lambda_s and lambda_f reduce to the basic loss") {
    LossFlags flags;
    flags.ss = SsMode::directional;
    flags.feat = FeatVariant::contrastive;
    LossWeights w;
    w.lambda_s = 0.0;
    w.lambda_f = 0.0;
    auto t = total_loss(preds, gt, &queue, w, flags, 0.1);
    Tensor b = basic_loss(std::span<const PredBundle>(preds), gt, w);
    CHECK(t.total.value() == doctest::Approx(b.value()).epsilon(1e-12));
  }
  SUBCASE("full configuration matches an independently composed sum") {
    LossFlags flags;
    flags.ss = SsMode::directional;
    flags.feat = FeatVariant::contrastive;
    LossWeights w;  // paper defaults: 5, 5, 0.1, 0.1
    auto t = total_loss(preds, gt, &queue, w, flags, 0.1);

    const double b = basic_loss(std::span<const PredBundle>(preds), gt, w).value();
    std::vector<Tensor> outs, feats;
    for (auto& p : preds) {
      outs.push_back(p.params);
      feats.push_back(p.feature);
    }
    const double ss = self_sup_loss(outs, SsMode::directional).value();
    const double lf = feature_loss(feats, &queue, FeatVariant::contrastive, 0.1).value();
    CHECK(std::abs(t.total.value() - (b + 0.1 * ss + 0.1 * lf)) < 1e-12);
    CHECK(t.basic == doctest::Approx(b));
    CHECK(t.ss == doctest::Approx(ss));
    CHECK(t.feat == doctest::Approx(lf));
  }
  SUBCASE("contrastive with an empty queue is rejected") {
    LossFlags flags;
    flags.feat = FeatVariant::contrastive;
    FeatureQueue empty(4, 6);
    CHECK_THROWS_AS(total_loss(preds, gt, &empty, {}, flags, 0.1), std::invalid_argument);
    CHECK_THROWS_AS(total_loss(preds, gt, nullptr, {}, flags, 0.1), std::invalid_argument);
  }
}

TEST_SUITE_END();

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "rsc/network.hpp"
#include "rsc/rng.hpp"
#include "rsc/tensor.hpp"

using namespace rsc;

namespace {

NetConfig small_cfg() {
  NetConfig cfg;
  cfg.in_channels = 1;
  cfg.canonical_size = 16;
  cfg.stage_channels = {4, 6};
  cfg.blocks_per_stage = {1, 2};
  cfg.regressor_hidden = {16};
  cfg.regressor_iterations = 3;
  cfg.shape_dim = 4;
  cfg.joint_count = 5;
  return cfg;
}

ResolutionScheme small_scheme() {
  ResolutionScheme s;
  s.canonical_size = 16;
  s.bounds = {16, 10, 6, 4};
  s.validate();
  return s;
}

RaNet make_net(std::uint64_t seed = 7) {
  NetConfig cfg = small_cfg();
  return RaNet(cfg, small_scheme(), std::vector<double>(cfg.param_dim(), 0.25), seed);
}

Tensor rand_image(const NetConfig& cfg, Rng& rng) {
  std::vector<double> d(static_cast<std::size_t>(cfg.in_channels) * cfg.canonical_size *
                        cfg.canonical_size);
  for (auto& v : d) v = rng.uniform(0.0, 1.0);
  return Tensor::from_data({cfg.in_channels, cfg.canonical_size, cfg.canonical_size},
                           std::move(d));
}

}  // namespace

TEST_SUITE_BEGIN("network");

TEST_CASE("select_range reproduces the published split") {
  ResolutionScheme s = ResolutionScheme::paper();
  CHECK(s.select_range(224) == 1);
  CHECK(s.select_range(223) == 2);
  CHECK(s.select_range(176) == 2);
  CHECK(s.select_range(129) == 2);
  CHECK(s.select_range(128) == 3);
  CHECK(s.select_range(96) == 3);
  CHECK(s.select_range(65) == 3);
  CHECK(s.select_range(64) == 4);
  CHECK(s.select_range(52) == 4);
  CHECK(s.select_range(41) == 4);
  CHECK(s.select_range(40) == 5);
  CHECK(s.select_range(32) == 5);
  CHECK(s.select_range(24) == 5);
  CHECK_THROWS_AS(s.select_range(23), std::invalid_argument);
  CHECK_THROWS_AS(s.select_range(225), std::invalid_argument);
}

TEST_CASE("midpoints match the published evaluation points") {
  ResolutionScheme s = ResolutionScheme::paper();
  CHECK(s.midpoint(1) == 224);
  CHECK(s.midpoint(2) == 176);
  CHECK(s.midpoint(3) == 96);
  CHECK(s.midpoint(4) == 52);
  CHECK(s.midpoint(5) == 32);
}

TEST_CASE("desk-scale scheme scales the published bounds") {
  ResolutionScheme s = ResolutionScheme::scaled_from_paper(64);
  CHECK(s.bounds == std::vector<int>{64, 37, 18, 11, 7});
  // every sampled size stays inside its range
  Rng rng(3);
  for (int i = 1; i <= s.range_count(); ++i) {
    auto [lo, hi] = s.sample_range(i);
    REQUIRE(lo <= hi);
    for (int t = 0; t < 200; ++t) {
      const int size = static_cast<int>(rng.uniform_int(lo, hi));
      CHECK(s.select_range(size) == i);
    }
  }
}

TEST_CASE("alpha of ones reduces the resolution-aware forward to the baseline") {
  RaNet net = make_net();
  Rng rng(5);
  for (int t = 0; t < 10; ++t) {
    Tensor img = rand_image(net.config(), rng);
    for (int range = 1; range <= net.scheme().range_count(); ++range) {
      Features ra = net.forward_features(img, range);
      Features base = net.forward_features_baseline(img);
      REQUIRE(ra.phi.size() == base.phi.size());
      double max_diff = 0;
      for (std::int64_t i = 0; i < ra.prepool.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(ra.prepool.item(i) - base.prepool.item(i)));
      }
      CHECK(max_diff < 1e-9);
    }
  }
}

TEST_CASE("alpha of zeros passes the stem output through identity blocks") {
  NetConfig cfg = small_cfg();
  cfg.stage_channels = {5};  // single stage: no downsampling transitions
  cfg.blocks_per_stage = {3};
  ResolutionScheme scheme = small_scheme();
  RaNet net(cfg, scheme, std::vector<double>(cfg.param_dim(), 0.0), 11);
  for (int r = 1; r <= scheme.range_count(); ++r) {
    auto a = net.alpha_row(r).raw_data();
    std::fill(a.begin(), a.end(), 0.0);
  }
  Rng rng(9);
  Tensor img = rand_image(cfg, rng);
  Features f = net.forward_features(img, 2);
  Tensor z0 = conv2d(img, net.parameters(false)[0], 2, 1);  // stem is the first parameter
  REQUIRE(f.prepool.size() == z0.size());
  for (std::int64_t i = 0; i < z0.size(); ++i) {
    CHECK(f.prepool.item(i) == z0.item(i));
  }
}

TEST_CASE("perturbing another alpha row leaves a range's forward bit-identical") {
  RaNet net = make_net();
  Rng rng(13);
  Tensor img = rand_image(net.config(), rng);
  Features before = net.forward_features(img, 2);
  std::vector<double> ref(before.phi.data().begin(), before.phi.data().end());

  auto row3 = net.alpha_row(3).raw_data();
  for (auto& v : row3) v = 7.75;
  Features after = net.forward_features(img, 2);
  for (std::int64_t i = 0; i < after.phi.size(); ++i) {
    CHECK(after.phi.item(i) == ref[static_cast<std::size_t>(i)]);
  }
  // ...while range 3 itself now computes something different
  Features changed = net.forward_features(img, 3);
  double diff = 0;
  for (std::int64_t i = 0; i < changed.phi.size(); ++i) {
    diff = std::max(diff, std::abs(changed.phi.item(i) - ref[static_cast<std::size_t>(i)]));
  }
  CHECK(diff > 1e-8);
}

TEST_CASE("regressor with zero residual layers returns the initial mean") {
  RaNet net = make_net();  // final regressor layer is zero-initialized
  Rng rng(17);
  std::vector<double> phi(static_cast<std::size_t>(net.config().feature_dim()));
  for (auto& v : phi) v = rng.uniform(-1, 1);
  Tensor out = net.forward_params(Tensor::from_data({net.config().feature_dim()}, phi));
  for (std::int64_t i = 0; i < out.size(); ++i) CHECK(out.item(i) == 0.25);
}

TEST_CASE("one regressor iteration equals one manual refinement step") {
  NetConfig cfg = small_cfg();
  cfg.regressor_iterations = 1;
  RaNet net(cfg, small_scheme(), std::vector<double>(cfg.param_dim(), 0.1), 23);
  // give the final layer nonzero weights
  auto params = net.parameters(false);
  Rng rng(29);
  for (auto& p : params) {
    if (p.shape() == Shape{cfg.param_dim(), cfg.regressor_hidden.back()}) {
      auto d = p.raw_data();
      for (auto& v : d) v = rng.uniform(-0.2, 0.2);
    }
  }
  std::vector<double> phi_data(static_cast<std::size_t>(cfg.feature_dim()));
  for (auto& v : phi_data) v = rng.uniform(-1, 1);
  Tensor phi = Tensor::from_data({cfg.feature_dim()}, phi_data);
  Tensor got = net.forward_params(phi);

  // manual: mean + W1 relu(W0 [phi, mean] + b0) + b1, pulling tensors from the net
  std::vector<Tensor> ps = net.parameters(false);
  // regressor tensors are the last four before alpha: w0, b0, w1, b1
  const std::size_t n = ps.size();
  Tensor w0 = ps[n - 4], b0 = ps[n - 3], w1 = ps[n - 2], b1 = ps[n - 1];
  Tensor mean = net.mean_params();
  Tensor cat_parts[] = {phi, mean};
  Tensor manual = add(mean, add(matmul(w1, relu(add(matmul(w0, concat(cat_parts)), b0))), b1));
  REQUIRE(manual.size() == got.size());
  for (std::int64_t i = 0; i < got.size(); ++i) {
    CHECK(got.item(i) == doctest::Approx(manual.item(i)).epsilon(1e-12));
  }
}

TEST_CASE("forward is reproducible bit-exactly") {
  RaNet a = make_net(101), b = make_net(101);
  Rng rng(31);
  Tensor img = rand_image(a.config(), rng);
  Features fa = a.forward_features(img, 2);
  Features fb = b.forward_features(img, 2);
  for (std::int64_t i = 0; i < fa.phi.size(); ++i) CHECK(fa.phi.item(i) == fb.phi.item(i));
  Tensor pa = a.forward_params(fa.phi);
  Tensor pb = b.forward_params(fb.phi);
  for (std::int64_t i = 0; i < pa.size(); ++i) CHECK(pa.item(i) == pb.item(i));
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  RaNet net = make_net(55);
  // make the state non-trivial
  Rng rng(57);
  for (auto& p : net.parameters(true)) {
    auto d = p.raw_data();
    for (auto& v : d) v += rng.uniform(-0.01, 0.01);
  }
  const auto dir = std::filesystem::temp_directory_path();
  const std::string p1 = (dir / "rsc_net_a.rsckpt").string();
  const std::string p2 = (dir / "rsc_net_b.rsckpt").string();
  net.save(p1);
  RaNet loaded = RaNet::load(p1);
  loaded.save(p2);

  auto bytes = [](const std::string& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  };
  CHECK(bytes(p1) == bytes(p2));

  Rng img_rng(61);
  Tensor img = rand_image(net.config(), img_rng);
  Features fa = net.forward_features(img, 3);
  Features fb = loaded.forward_features(img, 3);
  for (std::int64_t i = 0; i < fa.phi.size(); ++i) CHECK(fa.phi.item(i) == fb.phi.item(i));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("invalid inputs are rejected") {
  RaNet net = make_net();
  Tensor bad = Tensor::zeros({1, 8, 8});
  CHECK_THROWS_AS(net.forward_features(bad, 1), std::invalid_argument);
  Rng rng(1);
  Tensor img = rand_image(net.config(), rng);
  CHECK_THROWS_AS(net.forward_features(img, 0), std::invalid_argument);
  CHECK_THROWS_AS(net.forward_features(img, 9), std::invalid_argument);
  CHECK_THROWS_AS(net.forward_params(Tensor::zeros({3})), std::invalid_argument);
}

TEST_SUITE_END();

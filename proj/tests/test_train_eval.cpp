#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "rsc/train.hpp"

using namespace rsc;

namespace {

struct Fixture {
  BodyModel model = generate_toy_model(606, 100, 12, 6);
  ResolutionScheme scheme = ResolutionScheme::scaled_from_paper(32);
  Dataset data;

  Fixture() {
    SceneConfig scene;
    scene.p3d = 1.0;
    data = generate_dataset(model, scheme, scene, 8, 99);
  }

  NetConfig net_cfg() const {
    NetConfig cfg;
    cfg.in_channels = 1;
    cfg.canonical_size = 32;
    cfg.stage_channels = {8, 16};
    cfg.blocks_per_stage = {1, 1};
    cfg.regressor_hidden = {32};
    cfg.regressor_iterations = 2;
    cfg.shape_dim = model.shape_dim;
    cfg.joint_count = model.joint_count;
    return cfg;
  }

  RaNet make_net(std::uint64_t seed = 5) const {
    return RaNet(net_cfg(), scheme, initial_mean_params(net_cfg(), data.meta), seed);
  }
};

std::vector<double> flatten_params(const RaNet& net) {
  std::vector<double> out;
  for (const auto& p : net.parameters(true)) {
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("train_eval");

TEST_CASE("procrustes alignment") {
  Rng rng(1);
  std::vector<double> gt(36);
  for (auto& v : gt) v = rng.uniform(-1, 1);

  SUBCASE("identity when prediction equals ground truth") {
    auto res = procrustes_align(gt, gt);
    CHECK(res.scale == doctest::Approx(1.0).epsilon(1e-12));
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) {
        CHECK(res.rotation[3 * r + c] == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-10));
      }
    for (double t : res.translation) CHECK(std::abs(t) < 1e-10);
    CHECK(mpjpe(gt, gt, true) < 1e-12);
  }

  SUBCASE("similarity-transformed copies align to near zero error") {
    for (int trial = 0; trial < 30; ++trial) {
      std::vector<double> aa = {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)};
      double r0[9];
      aa_to_matrix(aa.data(), r0);
      const double t0[3] = {rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-3, 3)};
      const double s0 = rng.uniform(0.3, 2.5);
      std::vector<double> pred(gt.size());
      for (int j = 0; j < 12; ++j) {
        for (int r = 0; r < 3; ++r) {
          pred[3 * j + r] = s0 * (r0[3 * r] * gt[3 * j] + r0[3 * r + 1] * gt[3 * j + 1] +
                                  r0[3 * r + 2] * gt[3 * j + 2]) +
                            t0[r];
        }
      }
      CHECK(mpjpe(pred, gt, true) < 1e-8);
      // rotation stays in SO(3)
      auto res = procrustes_align(pred, gt);
      double max_dev = 0;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          double s = 0;
          for (int m = 0; m < 3; ++m) s += res.rotation[3 * m + i] * res.rotation[3 * m + j];
          max_dev = std::max(max_dev, std::abs(s - (i == j ? 1.0 : 0.0)));
        }
      CHECK(max_dev < 1e-10);
      const auto& r = res.rotation;
      const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                         r[2] * (r[3] * r[7] - r[4] * r[6]);
      CHECK(det > 0);
    }
  }

  SUBCASE("doubling the prediction recovers scale one half") {
    std::vector<double> pred(gt.size());
    for (std::size_t i = 0; i < gt.size(); ++i) pred[i] = 2.0 * gt[i];
    auto res = procrustes_align(pred, gt);
    CHECK(res.scale == doctest::Approx(0.5).epsilon(1e-10));
    CHECK(mpjpe(pred, gt, true) < 1e-8);
  }

  SUBCASE("degenerate ground truth is rejected") {
    std::vector<double> flat(36, 1.0);
    CHECK_THROWS_AS(procrustes_align(gt, flat), std::invalid_argument);
    std::vector<double> two(6, 0.5);
    CHECK_THROWS_AS(procrustes_align(two, two), std::invalid_argument);
  }
}

TEST_CASE("mpjpe") {
  Rng rng(2);
  std::vector<double> gt(30);
  for (auto& v : gt) v = rng.uniform(-1, 1);

  SUBCASE("uniform (3,0,4) offset gives exactly 5") {
    std::vector<double> pred(gt);
    for (int j = 0; j < 10; ++j) {
      pred[3 * j] += 3.0;
      pred[3 * j + 2] += 4.0;
    }
    CHECK(std::abs(mpjpe(pred, gt, false) - 5.0) < 1e-12);
    CHECK(mpjpe(pred, gt, true) < 1e-9);  // translation absorbed by alignment
  }

  SUBCASE("alignment never hurts") {
    for (int t = 0; t < 200; ++t) {
      std::vector<double> pred(gt);
      for (auto& v : pred) v += rng.uniform(-0.5, 0.5);
      CHECK(mpjpe(pred, gt, true) <= mpjpe(pred, gt, false) + 1e-9);
    }
  }

  SUBCASE("shape mismatch is rejected") {
    std::vector<double> bad(27);
    CHECK_THROWS_AS(mpjpe(bad, gt, false), std::invalid_argument);
  }
}

TEST_CASE("make_stages builds cumulative curricula") {
  auto stages = make_stages(5, 2000, true);
  REQUIRE(stages.size() == 5);
  int total = 0;
  for (std::size_t k = 0; k < stages.size(); ++k) {
    CHECK(stages[k].ranges.size() == k + 1);
    for (std::size_t i = 0; i < stages[k].ranges.size(); ++i) {
      CHECK(stages[k].ranges[i] == static_cast<int>(i + 1));
    }
    total += stages[k].iterations;
  }
  CHECK(total == 2000);

  auto flat = make_stages(5, 123, false);
  REQUIRE(flat.size() == 1);
  CHECK(flat[0].ranges.size() == 5);
  CHECK(flat[0].iterations == 123);
}

TEST_CASE("evaluate") {
  Fixture fx;

  SUBCASE("an oracle that returns the generating parameters scores zero") {
    std::vector<BodyParams> truths;
    for (const auto& s : fx.data.samples) {
      if (s.labels.has_3d) truths.push_back(s.truth);
    }
    std::size_t call = 0;
    PoseForward oracle = [&](const Raster&, int) {
      return truths[call++ % truths.size()];
    };
    EvalReport rep = evaluate(oracle, fx.data, fx.scheme, fx.model);
    REQUIRE(static_cast<int>(rep.rows.size()) == fx.scheme.range_count());
    for (const auto& row : rep.rows) {
      CHECK(row.mpjpe < 1e-9);
      CHECK(row.mpjpe_pa < 1e-9);
      CHECK(row.count == static_cast<int>(truths.size()));
    }
  }

  SUBCASE("row layout follows the midpoints, range 1 optional") {
    RaNet net = fx.make_net();
    EvalReport with1 = evaluate(net_forward_fn(net, true), fx.data, fx.scheme, fx.model, true);
    EvalReport without1 = evaluate(net_forward_fn(net, true), fx.data, fx.scheme, fx.model, false);
    CHECK(with1.rows.size() == static_cast<std::size_t>(fx.scheme.range_count()));
    CHECK(without1.rows.size() == static_cast<std::size_t>(fx.scheme.range_count() - 1));
    CHECK(with1.rows[0].midpoint == fx.scheme.canonical_size);
    for (std::size_t i = 0; i < without1.rows.size(); ++i) {
      CHECK(without1.rows[i].midpoint == fx.scheme.midpoint(static_cast<int>(i) + 2));
      CHECK(without1.rows[i].mpjpe == with1.rows[i + 1].mpjpe);
    }
    // MPJPE-PA never exceeds MPJPE
    for (const auto& row : with1.rows) CHECK(row.mpjpe_pa <= row.mpjpe + 1e-9);
  }

  SUBCASE("sample order does not change the means") {
    RaNet net = fx.make_net();
    EvalReport a = evaluate(net_forward_fn(net, true), fx.data, fx.scheme, fx.model);
    Dataset shuffled = fx.data;
    std::reverse(shuffled.samples.begin(), shuffled.samples.end());
    EvalReport b = evaluate(net_forward_fn(net, true), shuffled, fx.scheme, fx.model);
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
      CHECK(std::abs(a.rows[i].mpjpe - b.rows[i].mpjpe) < 1e-12);
      CHECK(std::abs(a.rows[i].mpjpe_pa - b.rows[i].mpjpe_pa) < 1e-12);
    }
  }
}

TEST_CASE("training") {
  Fixture fx;

  SUBCASE("zero iterations leave the parameters at initialization") {
    RaNet net = fx.make_net(21);
    RaNet twin = fx.make_net(21);
    TrainConfig cfg;
    cfg.total_iterations = 0;
    train(net, fx.model, fx.data, cfg);
    CHECK(flatten_params(net) == flatten_params(twin));
  }

  SUBCASE("supervised-only training on a frozen batch reduces the loss") {
    RaNet net = fx.make_net(22);
    TrainConfig cfg;
    cfg.stages = {Stage{{1}, 100}};
    cfg.batch_size = static_cast<int>(fx.data.samples.size());
    cfg.flags.ss = SsMode::off;
    cfg.flags.feat = FeatVariant::off;
    cfg.adam.learning_rate = 1e-3;
    TrainResult res = train(net, fx.model, fx.data, cfg);
    REQUIRE(res.curve.size() == 100);
    for (const auto& row : res.curve) REQUIRE(std::isfinite(row.total));
    CHECK(res.curve[49].total < res.curve[0].total);
  }

  SUBCASE("identical seeds reproduce bit-identical training runs") {
    auto run = [&](std::uint64_t seed) {
      RaNet net = fx.make_net(seed);
      TrainConfig cfg;
      cfg.total_iterations = 12;
      cfg.batch_size = 2;
      cfg.queue_capacity = 120;
      cfg.flags.ss = SsMode::directional;
      cfg.flags.feat = FeatVariant::contrastive;
      cfg.seed = 77;
      TrainResult res = train(net, fx.model, fx.data, cfg);
      return std::make_pair(flatten_params(net), res.curve);
    };
    auto [pa, ca] = run(5);
    auto [pb, cb] = run(5);
    CHECK(pa == pb);
    REQUIRE(ca.size() == cb.size());
    for (std::size_t i = 0; i < ca.size(); ++i) {
      CHECK(ca[i].total == cb[i].total);
      CHECK(ca[i].basic == cb[i].basic);
    }
  }

  SUBCASE("gradients of inactive alpha rows are identically zero") {
    RaNet net = fx.make_net(30);
    TrainConfig cfg;
    cfg.stages = {Stage{{1}, 3}};  // only range 1 active
    cfg.batch_size = 2;
    train(net, fx.model, fx.data, cfg);
    for (int r = 2; r <= fx.scheme.range_count(); ++r) {
      Tensor row = net.alpha_row(r);
      for (std::int64_t i = 0; i < row.size(); ++i) CHECK(row.item(i) == 1.0);
      for (double g : row.grad()) CHECK(g == 0.0);
    }
    // the active row did move
    Tensor row1 = net.alpha_row(1);
    bool moved = false;
    for (std::int64_t i = 0; i < row1.size(); ++i) moved = moved || row1.item(i) != 1.0;
    CHECK(moved);
  }

  SUBCASE("scheme mismatch is rejected") {
    RaNet net = fx.make_net();
    Dataset other = fx.data;
    other.meta.bounds = {32, 20, 10, 5, 3};
    TrainConfig cfg;
    cfg.total_iterations = 1;
    CHECK_THROWS_AS(train(net, fx.model, other, cfg), std::invalid_argument);
  }
}

TEST_CASE("ablation cells") {
  SUBCASE("cell names resolve to the right flags") {
    TrainConfig base;
    auto ba = cell_config("Ba", base);
    CHECK_FALSE(ba.resolution_aware);
    CHECK_FALSE(ba.train_alpha);
    CHECK(ba.flags.ss == SsMode::off);
    CHECK(ba.flags.feat == FeatVariant::off);
    CHECK(ba.progressive);

    auto full = cell_config("RA+SS+CL", base);
    CHECK(full.resolution_aware);
    CHECK(full.train_alpha);
    CHECK(full.flags.ss == SsMode::directional);
    CHECK(full.flags.feat == FeatVariant::contrastive);

    auto wopt = cell_config("w/o PT", base);
    CHECK_FALSE(wopt.progressive);
    auto sso = cell_config("SS-o", base);
    CHECK(sso.flags.ss == SsMode::symmetric);
    auto ssh = cell_config("SS-h", base);
    CHECK(ssh.flags.ss == SsMode::highest_only);
    CHECK_THROWS_AS(cell_config("nope", base), std::invalid_argument);
    CHECK(known_cells().size() == 10);
  }

  SUBCASE("identical flag sets give identical reports") {
    Fixture fx;
    TrainConfig base;
    base.total_iterations = 6;
    base.batch_size = 2;
    base.seed = 11;
    auto res = run_ablation({"Ba", "Ba"}, base, fx.net_cfg(), fx.model, fx.data, fx.data, 3);
    REQUIRE(res.size() == 2);
    REQUIRE(res[0].report.rows.size() == res[1].report.rows.size());
    for (std::size_t i = 0; i < res[0].report.rows.size(); ++i) {
      CHECK(res[0].report.rows[i].mpjpe == res[1].report.rows[i].mpjpe);
      CHECK(res[0].report.rows[i].mpjpe_pa == res[1].report.rows[i].mpjpe_pa);
    }
    const std::string csv = eval_report_csv(res);
    CHECK(csv.rfind("cell,range_midpoint,mpjpe,mpjpe_pa,n\n", 0) == 0);
  }
}

TEST_CASE("loss curve csv format") {
  TrainResult res;
  res.curve.push_back({1, 1, 0.5, 0.25, 0.125, 0.875});
  const std::string csv = loss_curve_csv(res);
  CHECK(csv == "iteration,stage,L_b,L_s,L_f,total\n1,1,0.5,0.25,0.125,0.875\n");
}

TEST_CASE("composed pipeline passes the finite-difference suite") {
  Rng rng(321);
  auto c = pipeline_gradient_case();
  auto rep = c.run(rng, 10);
  INFO("max rel err " << rep.max_rel_err << " at " << rep.worst);
  CHECK(rep.pass);
  CHECK_FALSE(rep.non_finite);
}

TEST_SUITE_END();

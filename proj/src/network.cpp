#include "rsc/network.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "rsc/io_util.hpp"
#include "rsc/rng.hpp"

namespace rsc {

// ---- ResolutionScheme ------------------------------------------------------

void ResolutionScheme::validate() const {
  if (bounds.size() < 2) throw std::invalid_argument("scheme: need at least 2 bounds");
  if (bounds.front() != canonical_size) {
    throw std::invalid_argument("scheme: first bound must equal canonical_size");
  }
  for (std::size_t i = 1; i < bounds.size(); ++i) {
    if (bounds[i] >= bounds[i - 1]) {
      throw std::invalid_argument("scheme: bounds must be strictly descending");
    }
  }
  if (bounds.back() < 2) throw std::invalid_argument("scheme: smallest bound must be >= 2");
  if (bounds[0] - bounds[1] < 2) {
    throw std::invalid_argument("scheme: range 2 is empty (need bounds[0] >= bounds[1]+2)");
  }
}

int ResolutionScheme::select_range(int pixel_size) const {
  const int p = range_count();
  if (pixel_size == canonical_size) return 1;
  for (int i = 2; i <= p; ++i) {
    const int lo = bounds[static_cast<std::size_t>(i) - 1];
    const int hi = bounds[static_cast<std::size_t>(i) - 2];
    const bool in = (i == p) ? (pixel_size >= lo && pixel_size <= hi)
                             : (pixel_size > lo && pixel_size <= hi);
    if (in) return i;
  }
  throw std::invalid_argument("scheme: pixel size " + std::to_string(pixel_size) +
                              " outside [" + std::to_string(bounds.back()) + "," +
                              std::to_string(canonical_size) + "]");
}

int ResolutionScheme::midpoint(int range_index) const {
  if (range_index < 1 || range_index > range_count()) {
    throw std::invalid_argument("scheme: range index out of bounds");
  }
  if (range_index == 1) return canonical_size;
  return (bounds[static_cast<std::size_t>(range_index) - 2] +
          bounds[static_cast<std::size_t>(range_index) - 1]) /
         2;
}

std::pair<int, int> ResolutionScheme::sample_range(int range_index) const {
  const int p = range_count();
  if (range_index < 1 || range_index > p) {
    throw std::invalid_argument("scheme: range index out of bounds");
  }
  if (range_index == 1) return {canonical_size, canonical_size};
  const int lo = (range_index == p) ? bounds[static_cast<std::size_t>(p) - 1]
                                    : bounds[static_cast<std::size_t>(range_index) - 1] + 1;
  const int hi = (range_index == 2) ? bounds[0] - 1
                                    : bounds[static_cast<std::size_t>(range_index) - 2];
  return {lo, hi};
}

ResolutionScheme ResolutionScheme::paper() {
  ResolutionScheme s;
  s.canonical_size = 224;
  s.bounds = {224, 128, 64, 40, 24};
  s.validate();
  return s;
}

ResolutionScheme ResolutionScheme::scaled_from_paper(int canonical_size) {
  const ResolutionScheme p = paper();
  ResolutionScheme s;
  s.canonical_size = canonical_size;
  s.bounds.push_back(canonical_size);
  for (std::size_t i = 1; i < p.bounds.size(); ++i) {
    s.bounds.push_back(static_cast<int>(
        std::lround(static_cast<double>(canonical_size) * p.bounds[i] / p.canonical_size)));
  }
  s.validate();
  return s;
}

// ---- NetConfig ---------------------------------------------------------------

int NetConfig::block_count() const {
  int b = 0;
  for (int n : blocks_per_stage) b += n;
  return b;
}

void NetConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("net: in_channels must be >= 1");
  if (canonical_size < 8 || canonical_size % 2 != 0) {
    throw std::invalid_argument("net: canonical_size must be even and >= 8");
  }
  if (stage_channels.empty() || stage_channels.size() != blocks_per_stage.size()) {
    throw std::invalid_argument("net: stage_channels and blocks_per_stage must align");
  }
  for (int c : stage_channels)
    if (c < 1) throw std::invalid_argument("net: channel counts must be positive");
  for (int b : blocks_per_stage)
    if (b < 1) throw std::invalid_argument("net: each stage needs at least one block");
  if (regressor_iterations < 1) throw std::invalid_argument("net: regressor needs T >= 1");
  if (shape_dim < 1 || joint_count < 2) throw std::invalid_argument("net: bad body dimensions");
}

// ---- RaNet -------------------------------------------------------------------

namespace {

Tensor he_conv(int out_c, int in_c, int k, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(out_c) * in_c * k * k);
  const double stddev = std::sqrt(2.0 / (in_c * k * k));
  for (auto& v : w) v = rng.normal(0.0, stddev);
  return Tensor::from_data({out_c, in_c, k, k}, std::move(w), true);
}

Tensor he_linear(int out_d, int in_d, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(out_d) * in_d);
  const double stddev = std::sqrt(2.0 / in_d);
  for (auto& v : w) v = rng.normal(0.0, stddev);
  return Tensor::from_data({out_d, in_d}, std::move(w), true);
}

}  // namespace

RaNet::RaNet(NetConfig cfg, ResolutionScheme scheme, std::vector<double> mean_params,
             std::uint64_t seed)
    : cfg_(std::move(cfg)), scheme_(std::move(scheme)) {
  cfg_.validate();
  scheme_.validate();
  if (cfg_.canonical_size != scheme_.canonical_size) {
    throw std::invalid_argument("net: canonical size disagrees with the resolution scheme");
  }
  if (static_cast<int>(mean_params.size()) != cfg_.param_dim()) {
    throw std::invalid_argument("net: mean parameter vector has wrong length");
  }
  Rng root(seed);

  Rng stem_rng = root.derive("stem");
  stem_w_ = he_conv(cfg_.stage_channels[0], cfg_.in_channels, 3, stem_rng);

  int block_id = 0;
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    const int c = cfg_.stage_channels[s];
    for (int b = 0; b < cfg_.blocks_per_stage[s]; ++b, ++block_id) {
      Rng brng = root.derive("block", static_cast<std::uint64_t>(block_id));
      BlockParams blk;
      blk.g1 = Tensor::full({c}, 1.0, true);
      blk.b1 = Tensor::zeros({c}, true);
      blk.w1 = he_conv(c, c, 3, brng);
      blk.g2 = Tensor::full({c}, 1.0, true);
      blk.b2 = Tensor::zeros({c}, true);
      blk.w2 = he_conv(c, c, 3, brng);
      blocks_.push_back(std::move(blk));
    }
    if (s + 1 < cfg_.stage_channels.size()) {
      Rng trng = root.derive("transition", static_cast<std::uint64_t>(s));
      TransitionParams tr;
      tr.g = Tensor::full({c}, 1.0, true);
      tr.b = Tensor::zeros({c}, true);
      tr.w = he_conv(cfg_.stage_channels[s + 1], c, 3, trng);
      transitions_.push_back(std::move(tr));
    }
  }
  final_g_ = Tensor::full({cfg_.feature_dim()}, 1.0, true);
  final_b_ = Tensor::zeros({cfg_.feature_dim()}, true);

  // alpha starts at 1 so training begins at the plain residual network
  const int bcount = cfg_.block_count();
  for (int r = 0; r < scheme_.range_count(); ++r) {
    alpha_.push_back(Tensor::full({bcount}, 1.0, true));
  }

  // iterative regressor MLP; final layer zero so the first estimate is the mean
  std::vector<int> dims;
  dims.push_back(cfg_.feature_dim() + cfg_.param_dim());
  for (int h : cfg_.regressor_hidden) dims.push_back(h);
  dims.push_back(cfg_.param_dim());
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    Rng lrng = root.derive("regressor", static_cast<std::uint64_t>(l));
    const bool last = (l + 2 == dims.size());
    reg_w_.push_back(last ? Tensor::zeros({dims[l + 1], dims[l]}, true)
                          : he_linear(dims[l + 1], dims[l], lrng));
    reg_b_.push_back(Tensor::zeros({dims[l + 1]}, true));
  }
  mean_params_ = Tensor::from_data({cfg_.param_dim()}, std::move(mean_params));
}

Features RaNet::forward_impl(const Tensor& image, const Tensor* alpha_row) const {
  if (image.shape() != Shape{cfg_.in_channels, cfg_.canonical_size, cfg_.canonical_size}) {
    throw std::invalid_argument("net: image must be " +
                                shape_str({cfg_.in_channels, cfg_.canonical_size,
                                           cfg_.canonical_size}) +
                                ", got " + shape_str(image.shape()));
  }
  Tensor z = conv2d(image, stem_w_, 2, 1);  // z0
  int block_id = 0;
  std::size_t transition = 0;
  for (std::size_t s = 0; s < cfg_.stage_channels.size(); ++s) {
    for (int b = 0; b < cfg_.blocks_per_stage[s]; ++b, ++block_id) {
      const BlockParams& blk = blocks_[static_cast<std::size_t>(block_id)];
      Tensor r = conv2d(relu(channel_affine(z, blk.g1, blk.b1)), blk.w1, 1, 1);
      r = conv2d(relu(channel_affine(r, blk.g2, blk.b2)), blk.w2, 1, 1);
      if (alpha_row) {
        Tensor a = slice(*alpha_row, block_id, 1);
        z = add(z, mul(r, a));
      } else {
        z = add(z, r);
      }
    }
    if (s + 1 < cfg_.stage_channels.size()) {
      const TransitionParams& tr = transitions_[transition++];
      z = conv2d(relu(channel_affine(z, tr.g, tr.b)), tr.w, 2, 1);
    }
  }
  Features f;
  f.prepool = z;
  f.phi = global_avg_pool(relu(channel_affine(z, final_g_, final_b_)));
  return f;
}

Features RaNet::forward_features(const Tensor& image, int range_index) const {
  if (range_index < 1 || range_index > scheme_.range_count()) {
    throw std::invalid_argument("net: range index " + std::to_string(range_index) +
                                " out of [1," + std::to_string(scheme_.range_count()) + "]");
  }
  const Tensor& row = alpha_[static_cast<std::size_t>(range_index) - 1];
  return forward_impl(image, &row);
}

Features RaNet::forward_features_baseline(const Tensor& image) const {
  return forward_impl(image, nullptr);
}

Tensor RaNet::forward_params(const Tensor& phi) const {
  if (phi.shape() != Shape{cfg_.feature_dim()}) {
    throw std::invalid_argument("net: feature vector must be {" +
                                std::to_string(cfg_.feature_dim()) + "}, got " +
                                shape_str(phi.shape()));
  }
  for (double v : phi.data()) {
    if (!std::isfinite(v)) throw std::runtime_error("net: non-finite feature vector");
  }
  Tensor params = mean_params_;
  for (int t = 0; t < cfg_.regressor_iterations; ++t) {
    Tensor parts[] = {phi, params};
    Tensor h = concat(parts);
    for (std::size_t l = 0; l + 1 < reg_w_.size(); ++l) {
      h = relu(add(matmul(reg_w_[l], h), reg_b_[l]));
    }
    Tensor residual = add(matmul(reg_w_.back(), h), reg_b_.back());
    params = add(params, residual);
  }
  return params;
}

std::vector<Tensor> RaNet::parameters(bool include_alpha) const {
  std::vector<Tensor> out;
  out.push_back(stem_w_);
  for (const auto& b : blocks_) {
    out.push_back(b.g1);
    out.push_back(b.b1);
    out.push_back(b.w1);
    out.push_back(b.g2);
    out.push_back(b.b2);
    out.push_back(b.w2);
  }
  for (const auto& t : transitions_) {
    out.push_back(t.g);
    out.push_back(t.b);
    out.push_back(t.w);
  }
  out.push_back(final_g_);
  out.push_back(final_b_);
  for (std::size_t l = 0; l < reg_w_.size(); ++l) {
    out.push_back(reg_w_[l]);
    out.push_back(reg_b_[l]);
  }
  if (include_alpha) {
    for (const auto& a : alpha_) out.push_back(a);
  }
  return out;
}

Tensor RaNet::alpha_row(int range_index) const {
  if (range_index < 1 || range_index > scheme_.range_count()) {
    throw std::invalid_argument("net: range index out of bounds");
  }
  return alpha_[static_cast<std::size_t>(range_index) - 1];
}

// ---- checkpoint --------------------------------------------------------------

namespace {

constexpr char kMagic[] = "RSCKPT1";

struct Entry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

void append_tensor(std::vector<Entry>& out, const std::string& name, const Tensor& t) {
  out.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
}

void append_ints(std::vector<Entry>& out, const std::string& name, const std::vector<int>& v) {
  Entry e;
  e.name = name;
  e.shape = {static_cast<int>(v.size())};
  for (int x : v) e.data.push_back(static_cast<double>(x));
  out.push_back(std::move(e));
}

void append_scalar(std::vector<Entry>& out, const std::string& name, double v) {
  out.push_back({name, {1}, {v}});
}

}  // namespace

void RaNet::save(const std::string& path) const {
  std::vector<Entry> entries;
  append_scalar(entries, "config.in_channels", cfg_.in_channels);
  append_scalar(entries, "config.canonical_size", cfg_.canonical_size);
  append_ints(entries, "config.stage_channels", cfg_.stage_channels);
  append_ints(entries, "config.blocks_per_stage", cfg_.blocks_per_stage);
  append_ints(entries, "config.regressor_hidden", cfg_.regressor_hidden);
  append_scalar(entries, "config.regressor_iterations", cfg_.regressor_iterations);
  append_scalar(entries, "config.shape_dim", cfg_.shape_dim);
  append_scalar(entries, "config.joint_count", cfg_.joint_count);
  append_ints(entries, "scheme.bounds", scheme_.bounds);

  // alpha packed {P, B}
  {
    Entry e;
    e.name = "alpha";
    e.shape = {scheme_.range_count(), cfg_.block_count()};
    for (const auto& row : alpha_) {
      e.data.insert(e.data.end(), row.data().begin(), row.data().end());
    }
    entries.push_back(std::move(e));
  }

  append_tensor(entries, "stem.w", stem_w_);
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    append_tensor(entries, p + "g1", blocks_[b].g1);
    append_tensor(entries, p + "b1", blocks_[b].b1);
    append_tensor(entries, p + "w1", blocks_[b].w1);
    append_tensor(entries, p + "g2", blocks_[b].g2);
    append_tensor(entries, p + "b2", blocks_[b].b2);
    append_tensor(entries, p + "w2", blocks_[b].w2);
  }
  for (std::size_t t = 0; t < transitions_.size(); ++t) {
    const std::string p = "trans" + std::to_string(t) + ".";
    append_tensor(entries, p + "g", transitions_[t].g);
    append_tensor(entries, p + "b", transitions_[t].b);
    append_tensor(entries, p + "w", transitions_[t].w);
  }
  append_tensor(entries, "final.g", final_g_);
  append_tensor(entries, "final.b", final_b_);
  for (std::size_t l = 0; l < reg_w_.size(); ++l) {
    append_tensor(entries, "regressor.w" + std::to_string(l), reg_w_[l]);
    append_tensor(entries, "regressor.b" + std::to_string(l), reg_b_[l]);
  }
  append_tensor(entries, "regressor.mean", mean_params_);

  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write(kMagic, 7);
  write_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    write_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_u32(os, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) write_u32(os, static_cast<std::uint32_t>(d));
  }
  for (const auto& e : entries) {
    for (double v : e.data) write_f64(os, v);
  }
  if (!os) throw std::runtime_error("checkpoint: write failed: " + path);
}

RaNet RaNet::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[7];
  if (!is.read(magic, 7) || std::string(magic, 7) != kMagic) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  const std::uint32_t count = read_u32(is);
  std::vector<Entry> entries(count);
  for (auto& e : entries) {
    const std::uint32_t name_len = read_u32(is);
    e.name.resize(name_len);
    if (!is.read(e.name.data(), name_len)) throw std::runtime_error("checkpoint: truncated");
    const std::uint32_t ndim = read_u32(is);
    e.shape.resize(ndim);
    for (auto& d : e.shape) d = static_cast<int>(read_u32(is));
  }
  for (auto& e : entries) {
    e.data.resize(static_cast<std::size_t>(numel(e.shape)));
    for (auto& v : e.data) v = read_f64(is);
  }

  std::map<std::string, Entry*> by_name;
  for (auto& e : entries) by_name[e.name] = &e;
  auto get = [&](const std::string& name) -> Entry& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw std::runtime_error("checkpoint: missing entry " + name);
    return *it->second;
  };
  auto to_ints = [](const Entry& e) {
    std::vector<int> out;
    for (double v : e.data) out.push_back(static_cast<int>(v));
    return out;
  };

  NetConfig cfg;
  cfg.in_channels = static_cast<int>(get("config.in_channels").data[0]);
  cfg.canonical_size = static_cast<int>(get("config.canonical_size").data[0]);
  cfg.stage_channels = to_ints(get("config.stage_channels"));
  cfg.blocks_per_stage = to_ints(get("config.blocks_per_stage"));
  cfg.regressor_hidden = to_ints(get("config.regressor_hidden"));
  cfg.regressor_iterations = static_cast<int>(get("config.regressor_iterations").data[0]);
  cfg.shape_dim = static_cast<int>(get("config.shape_dim").data[0]);
  cfg.joint_count = static_cast<int>(get("config.joint_count").data[0]);

  ResolutionScheme scheme;
  scheme.bounds = to_ints(get("scheme.bounds"));
  scheme.canonical_size = scheme.bounds.empty() ? 0 : scheme.bounds[0];

  RaNet net(cfg, scheme, get("regressor.mean").data, /*seed=*/0);

  auto load_into = [&](const std::string& name, Tensor& t) {
    Entry& e = get(name);
    if (e.shape != t.shape()) {
      throw std::runtime_error("checkpoint: entry " + name + " has shape " + shape_str(e.shape) +
                               ", expected " + shape_str(t.shape()));
    }
    std::copy(e.data.begin(), e.data.end(), t.raw_data().begin());
  };

  load_into("stem.w", net.stem_w_);
  for (std::size_t b = 0; b < net.blocks_.size(); ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    load_into(p + "g1", net.blocks_[b].g1);
    load_into(p + "b1", net.blocks_[b].b1);
    load_into(p + "w1", net.blocks_[b].w1);
    load_into(p + "g2", net.blocks_[b].g2);
    load_into(p + "b2", net.blocks_[b].b2);
    load_into(p + "w2", net.blocks_[b].w2);
  }
  for (std::size_t t = 0; t < net.transitions_.size(); ++t) {
    const std::string p = "trans" + std::to_string(t) + ".";
    load_into(p + "g", net.transitions_[t].g);
    load_into(p + "b", net.transitions_[t].b);
    load_into(p + "w", net.transitions_[t].w);
  }
  load_into("final.g", net.final_g_);
  load_into("final.b", net.final_b_);
  for (std::size_t l = 0; l < net.reg_w_.size(); ++l) {
    load_into("regressor.w" + std::to_string(l), net.reg_w_[l]);
    load_into("regressor.b" + std::to_string(l), net.reg_b_[l]);
  }

  Entry& alpha = get("alpha");
  if (alpha.shape != Shape{net.scheme_.range_count(), net.cfg_.block_count()}) {
    throw std::runtime_error("checkpoint: alpha shape mismatch");
  }
  const int bcount = net.cfg_.block_count();
  for (int r = 0; r < net.scheme_.range_count(); ++r) {
    std::copy(alpha.data.begin() + static_cast<std::ptrdiff_t>(r) * bcount,
              alpha.data.begin() + static_cast<std::ptrdiff_t>(r + 1) * bcount,
              net.alpha_[static_cast<std::size_t>(r)].raw_data().begin());
  }
  return net;
}

}  // namespace rsc

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace rsc {

using Shape = std::vector<int>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on demand, same length as data
  bool needs_grad = false;   // gradient must flow to or through this node
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};
}  // namespace detail

// Value-semantic handle to a dense, row-major, 64-bit float tensor. Tensors
// are immutable once they participate in recorded operations; leaves may be
// mutated through raw_data() between graphs (optimizer updates, probes).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t size() const;
  int dim(int i) const;

  std::span<const double> data() const;
  std::span<double> raw_data();

  bool requires_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  double value() const;              // requires size() == 1
  double item(std::int64_t i) const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

struct OpRecord {
  const char* name;
  std::vector<Tensor> inputs;
  Tensor output;
  std::function<void()> backward;  // accumulates into inputs' grads
};

// Tape of primitive operations. Primitives record into the active graph; with
// no graph active they evaluate forward only. backward() walks the tape in
// exact reverse record order, which makes gradients deterministic.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph();

  class Scope {
   public:
    explicit Scope(Graph& g);
    ~Scope();
    Scope(const Scope&) = delete;

   private:
    Graph* prev_;
  };

  static Graph* active();

  void record(OpRecord rec);
  void backward(const Tensor& root);
  std::size_t op_count() const { return records_.size(); }
  void clear();
  void set_nan_check(bool on) { nan_check_ = on; }

 private:
  std::vector<OpRecord> records_;
  bool nan_check_ = true;
};

// ---- primitives ------------------------------------------------------------
// Binary add/mul broadcast rules: identical shapes, or one operand a scalar
// (size 1); add additionally broadcasts a length-C vector across the rows of
// an {R,C} matrix. Everything else in the project is composed from these.

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);       // multiply by a constant
Tensor add_const(const Tensor& a, double c);   // add a constant
Tensor sub(const Tensor& a, const Tensor& b);  // composed: add(a, scale(b,-1))

Tensor matmul(const Tensor& a, const Tensor& b);  // {m,k}x{k,n}; b may be {k}
Tensor transpose(const Tensor& a);                // {r,c} -> {c,r}

// x {C,H,W}, w {O,C,kh,kw}; zero padding, stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
// Per-channel y = gamma[c]*x + beta[c]; the frozen-affine normalization stand-in.
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

Tensor relu(const Tensor& x);             // subgradient at 0 is 0
Tensor global_avg_pool(const Tensor& x);  // {C,H,W} -> {C}

Tensor concat(std::span<const Tensor> parts);  // 1-D parts -> 1-D
Tensor slice(const Tensor& x, std::int64_t offset, std::int64_t len);  // flat view
Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);         // -> scalar
Tensor mean(const Tensor& x);        // -> scalar
Tensor squared_l2(const Tensor& x);  // sum of squares -> scalar

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);  // rejects non-positive input

Tensor cosine_similarity(const Tensor& a, const Tensor& b);  // -> scalar

// Forward identity; every gradient path through it vanishes.
Tensor stop_gradient(const Tensor& x);

// Numerically safe log(sum(exp(logits))) with constant max subtraction.
Tensor log_sum_exp(const Tensor& logits);

}  // namespace rsc

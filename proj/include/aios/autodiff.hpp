#pragma once

// Reverse-mode automatic differentiation over row-major double matrices.
//
// A Tape records every operation applied to its Vars. Calling backward()
// replays the records in reverse and accumulates gradients; gradients of
// Param leaves are added to Param::grad. Tapes are single-use and not
// thread-safe; build one per forward pass.

#include "aios/common.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace aios::ad {

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
};

// Owns named parameters in insertion order. Names are unique.
class ParamStore {
 public:
  Param& add(const std::string& name, Eigen::Index rows, Eigen::Index cols);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Param*> all();
  std::vector<const Param*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t num_scalars() const;

  void zero_grad();

 private:
  std::vector<std::unique_ptr<Param>> params_;
  std::unordered_map<std::string, Param*> index_;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr; }
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Mat value);
  Var input(Mat value, bool requires_grad);
  Var param(Param& p);

  // Records a node; fn is kept only if some input requires a gradient.
  Var record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Mat value, std::span<const Var> inputs, BackwardFn fn);

  const Mat& value(int id) const;
  bool needs_grad(int id) const { return nodes_[id].requires_grad; }
  // Gradient accumulator for node id, zero-initialized on first access.
  Mat& grad_acc(int id);
  // Gradient of node id, or an empty matrix if none reached it.
  const Mat& grad(int id) const { return nodes_[id].grad; }
  bool has_grad(int id) const { return nodes_[id].grad.size() != 0; }

  // Adds g to the gradient of v. Call before backward().
  void seed(Var v, const Mat& g);
  // Seeds a scalar node with 1 and propagates.
  void backward(Var scalar);
  // Propagates all seeded gradients and flushes parameter gradients.
  void backward();

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    const Mat* ref = nullptr;
    Param* param = nullptr;
    Mat grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;  // deque: values stay addressable while the tape grows
};

// Sparse row pattern: row i may attend to cols[row_ptr[i] .. row_ptr[i+1]).
struct SparsePattern {
  std::vector<int> row_ptr;
  std::vector<int> cols;
  int rows() const { return static_cast<int>(row_ptr.size()) - 1; }
};

// Feature-map geometry of a flattened multi-level pyramid.
struct LevelInfo {
  std::vector<int> heights;
  std::vector<int> widths;
  std::vector<int> starts;  // first flattened row of each level
  int num_levels() const { return static_cast<int>(heights.size()); }
  int total() const;
};

struct ConvShape {
  int height = 0;
  int width = 0;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

// ---- elementwise / shape ops ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast a 1×C row over all rows of a
Var min_elem(Var a, Var b);
Var relu(Var a);
Var sigmoid(Var a);
Var exp(Var a);
Var inverse_sigmoid(Var a, double eps = 1e-5);
// sigmoid(logit(p) + delta), computed so that delta == 0 returns p exactly.
Var sigmoid_shift(Var p, Var delta);
Var matmul(Var a, Var b);
Var linear(Var x, Var w, Var b);  // x·w + b
Var reshape(Var a, Eigen::Index rows, Eigen::Index cols);
Var gather_rows(Var a, std::vector<int> index);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index n);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index n);
Var block_mean(Var a, int block);  // mean of each run of `block` consecutive rows
Var sum(Var a);
Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights);

// Scalar node with a precomputed local gradient per input.
Var custom_scalar(double value, std::span<const Var> inputs, std::vector<Mat> local_grads);

// ---- neural-network ops ----
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var grouped_softmax(Var x, int group);
// Sinusoidal embedding of each column: `per_coord` features per input column.
Var sine_embed(Var x, int per_coord, double temperature = 20.0);
// Multi-head scaled dot-product attention; mask == nullptr means dense.
Var attention(Var q, Var k, Var v, int heads, const SparsePattern* mask);
// Sampling locations for deformable attention from (cx, cy, w, h) queries.
// off: N × (heads·levels·points·2); result has the same shape, clamped to [0,1].
Var sampling_locations(Var queries, Var offsets, int points);
// Bilinear multi-level sampling combined by per-sample weights.
// value: M × D flattened pyramid; loc: N × (H·L·P·2); weight: N × (H·L·P).
Var deform_sample(Var value, Var loc, Var weight, const LevelInfo& levels, int heads, int points);
// 2D convolution over an (H·W) × C_in row-major image; weight is (k·k·C_in) × C_out.
Var conv2d(Var x, Var weight, Var bias, const ConvShape& shape);

}  // namespace aios::ad

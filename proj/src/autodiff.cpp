#include "aios/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace aios::ad {

// ---------------------------------------------------------------- ParamStore

Param& ParamStore::add(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  p->adam_m = Mat::Zero(rows, cols);
  p->adam_v = Mat::Zero(rows, cols);
  Param* raw = p.get();
  params_.push_back(std::move(p));
  index_[name] = raw;
  return *raw;
}

Param& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *it->second;
}

const Param& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *it->second;
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Param*> ParamStore::all() const {
  std::vector<const Param*> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParamStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

int LevelInfo::total() const {
  int n = 0;
  for (int l = 0; l < num_levels(); ++l) n += heights[l] * widths[l];
  return n;
}

// ---------------------------------------------------------------------- Tape

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Mat value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_ && requires_grad;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Param& p) {
  Node n;
  n.ref = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Mat value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  bool req = false;
  if (grad_enabled_) {
    for (const Var& v : inputs) req = req || nodes_[v.id].requires_grad;
  }
  n.requires_grad = req;
  if (req) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

const Mat& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.ref ? *n.ref : n.value;
}

Mat& Tape::grad_acc(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) {
    const Mat& v = value(id);
    n.grad = Mat::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

void Tape::seed(Var v, const Mat& g) {
  if (!nodes_[v.id].requires_grad) return;
  Mat& acc = grad_acc(v.id);
  if (acc.rows() != g.rows() || acc.cols() != g.cols()) throw ShapeError("seed gradient shape mismatch");
  acc += g;
}

void Tape::backward(Var scalar) {
  if (value(scalar.id).size() != 1) throw ShapeError("backward() needs a scalar node");
  seed(scalar, Mat::Ones(1, 1));
  backward();
}

void Tape::backward() {
  for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) {
      if (n.param->grad.size() == 0) n.param->grad = Mat::Zero(n.grad.rows(), n.grad.cols());
      n.param->grad += n.grad;
    }
  }
}

// ------------------------------------------------------- elementwise / shape

namespace {

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "add");
  Mat out = a.value() + b.value();
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(a)) t.grad_acc(a) += g;
    if (t.needs_grad(b)) t.grad_acc(b) += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "sub");
  Mat out = a.value() - b.value();
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(a)) t.grad_acc(a) += g;
    if (t.needs_grad(b)) t.grad_acc(b) -= g;
  });
}

Var mul(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "mul");
  Mat out = a.value().cwiseProduct(b.value());
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(a)) t.grad_acc(a) += g.cwiseProduct(t.value(b));
    if (t.needs_grad(b)) t.grad_acc(b) += g.cwiseProduct(t.value(a));
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Mat out = a.value() * s;
  return t.record(std::move(out), {a}, [a = a.id, s](Tape& t, int self) {
    t.grad_acc(a) += t.grad(self) * s;
  });
}

Var add_row(Var a, Var row) {
  Tape& t = *a.tape;
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bad row shape");
  Mat out = a.value().rowwise() + row.value().row(0);
  return t.record(std::move(out), {a, row}, [a = a.id, r = row.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(a)) t.grad_acc(a) += g;
    if (t.needs_grad(r)) t.grad_acc(r) += g.colwise().sum();
  });
}

Var min_elem(Var a, Var b) {
  Tape& t = *a.tape;
  require_same_shape(a.value(), b.value(), "min_elem");
  Mat out = a.value().cwiseMin(b.value());
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    const Mat& va = t.value(a);
    const Mat& vb = t.value(b);
    Mat ga = (va.array() <= vb.array()).select(g, 0.0);
    if (t.needs_grad(a)) t.grad_acc(a) += ga;
    if (t.needs_grad(b)) t.grad_acc(b) += g - ga;
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  Mat out = a.value().cwiseMax(0.0);
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, int self) {
    t.grad_acc(a) += (t.value(a).array() > 0.0).select(t.grad(self), 0.0);
  });
}

Var sigmoid(Var a) {
  Tape& t = *a.tape;
  Mat out = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, int self) {
    const Mat& y = t.value(self);
    t.grad_acc(a) += (t.grad(self).array() * y.array() * (1.0 - y.array())).matrix();
  });
}

Var exp(Var a) {
  Tape& t = *a.tape;
  Mat out = a.value().array().exp().matrix();
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, int self) {
    t.grad_acc(a) += t.grad(self).cwiseProduct(t.value(self));
  });
}

Var inverse_sigmoid(Var a, double eps) {
  Tape& t = *a.tape;
  const Mat& x = a.value();
  Mat xc = x.cwiseMax(eps).cwiseMin(1.0 - eps);
  Mat out = (xc.array() / (1.0 - xc.array())).log().matrix();
  return t.record(std::move(out), {a}, [a = a.id, eps](Tape& t, int self) {
    const Mat& x = t.value(a);
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(a);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      double v = x.data()[i];
      if (v > eps && v < 1.0 - eps) acc.data()[i] += g.data()[i] / (v * (1.0 - v));
    }
  });
}

Var sigmoid_shift(Var p, Var delta) {
  Tape& t = *p.tape;
  if (p.rows() != delta.rows() || p.cols() != delta.cols()) throw ShapeError("sigmoid_shift: shape mismatch");
  const Mat& x = p.value();
  const Mat& d = delta.value();
  Mat out(x.rows(), x.cols());
  // p e^d / (p e^d + 1 - p) equals sigmoid(logit(p) + d) and returns p exactly when d == 0.
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = std::clamp(x.data()[i], 0.0, 1.0);
    const double e = v * std::exp(d.data()[i]);
    const double den = e + (1.0 - v);
    out.data()[i] = den > 0.0 ? e / den : v;
  }
  return t.record(std::move(out), {p, delta}, [p = p.id, delta = delta.id](Tape& t, int self) {
    const Mat& x = t.value(p);
    const Mat& y = t.value(self);
    const Mat& g = t.grad(self);
    const bool gp = t.needs_grad(p), gd = t.needs_grad(delta);
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      const double s = y.data()[i] * (1.0 - y.data()[i]);
      if (gd) t.grad_acc(delta).data()[i] += g.data()[i] * s;
      if (gp) {
        const double v = x.data()[i];
        const double q = v * (1.0 - v);
        if (q > 1e-12) t.grad_acc(p).data()[i] += g.data()[i] * s / q;
      }
    }
  });
}

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimension mismatch");
  Mat out;
  out.noalias() = a.value() * b.value();
  return t.record(std::move(out), {a, b}, [a = a.id, b = b.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(a)) t.grad_acc(a).noalias() += g * t.value(b).transpose();
    if (t.needs_grad(b)) t.grad_acc(b).noalias() += t.value(a).transpose() * g;
  });
}

Var linear(Var x, Var w, Var b) {
  Tape& t = *x.tape;
  if (x.cols() != w.rows()) {
    throw ShapeError("linear: input has " + std::to_string(x.cols()) + " features, weight expects " +
                     std::to_string(w.rows()));
  }
  Mat out;
  out.noalias() = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return t.record(std::move(out), {x, w, b}, [x = x.id, w = w.id, b = b.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    if (t.needs_grad(x)) t.grad_acc(x).noalias() += g * t.value(w).transpose();
    if (t.needs_grad(w)) t.grad_acc(w).noalias() += t.value(x).transpose() * g;
    if (t.needs_grad(b)) t.grad_acc(b) += g.colwise().sum();
  });
}

Var reshape(Var a, Eigen::Index rows, Eigen::Index cols) {
  Tape& t = *a.tape;
  if (rows * cols != a.value().size()) throw ShapeError("reshape: size mismatch");
  Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(a);
    Eigen::Map<Mat>(acc.data(), g.rows(), g.cols()) += g;
  });
}

Var gather_rows(Var a, std::vector<int> index) {
  Tape& t = *a.tape;
  const Mat& v = a.value();
  Mat out(static_cast<Eigen::Index>(index.size()), v.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= v.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = v.row(index[i]);
  }
  return t.record(std::move(out), {a}, [a = a.id, index = std::move(index)](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(a);
    for (std::size_t i = 0; i < index.size(); ++i) acc.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Tape& t = *parts[0].tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    ids.push_back(p.id);
    offsets.push_back(r);
    r += p.rows();
  }
  return t.record(std::move(out), parts, [ids, offsets](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.needs_grad(ids[i])) continue;
      Mat& acc = t.grad_acc(ids[i]);
      acc += g.middleRows(offsets[i], acc.rows());
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Tape& t = *parts[0].tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  for (const Var& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    ids.push_back(p.id);
    offsets.push_back(c);
    c += p.cols();
  }
  return t.record(std::move(out), parts, [ids, offsets](Tape& t, int self) {
    const Mat& g = t.grad(self);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (!t.needs_grad(ids[i])) continue;
      Mat& acc = t.grad_acc(ids[i]);
      acc += g.middleCols(offsets[i], acc.cols());
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index n) {
  Tape& t = *a.tape;
  if (start < 0 || start + n > a.rows()) throw ShapeError("slice_rows: out of range");
  Mat out = a.value().middleRows(start, n);
  return t.record(std::move(out), {a}, [a = a.id, start, n](Tape& t, int self) {
    t.grad_acc(a).middleRows(start, n) += t.grad(self);
  });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index n) {
  Tape& t = *a.tape;
  if (start < 0 || start + n > a.cols()) throw ShapeError("slice_cols: out of range");
  Mat out = a.value().middleCols(start, n);
  return t.record(std::move(out), {a}, [a = a.id, start, n](Tape& t, int self) {
    t.grad_acc(a).middleCols(start, n) += t.grad(self);
  });
}

Var block_mean(Var a, int block) {
  Tape& t = *a.tape;
  if (block <= 0 || a.rows() % block != 0) throw ShapeError("block_mean: rows not divisible by block");
  const Eigen::Index n = a.rows() / block;
  Mat out = Mat::Zero(n, a.cols());
  const Mat& v = a.value();
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int k = 0; k < block; ++k) out.row(i) += v.row(i * block + k);
  }
  out /= static_cast<double>(block);
  return t.record(std::move(out), {a}, [a = a.id, block](Tape& t, int self) {
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(a);
    const double inv = 1.0 / block;
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      for (int k = 0; k < block; ++k) acc.row(i * block + k) += g.row(i) * inv;
    }
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  Mat out(1, 1);
  out(0, 0) = a.value().sum();
  return t.record(std::move(out), {a}, [a = a.id](Tape& t, int self) {
    t.grad_acc(a).array() += t.grad(self)(0, 0);
  });
}

Var weighted_sum(std::span<const Var> scalars, std::span<const double> weights) {
  if (scalars.size() != weights.size() || scalars.empty()) throw ShapeError("weighted_sum: size mismatch");
  Tape& t = *scalars[0].tape;
  Mat out = Mat::Zero(1, 1);
  std::vector<int> ids;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    out(0, 0) += weights[i] * scalars[i].value()(0, 0);
    ids.push_back(scalars[i].id);
  }
  std::vector<double> w(weights.begin(), weights.end());
  return t.record(std::move(out), scalars, [ids, w](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.grad_acc(ids[i])(0, 0) += w[i] * g;
    }
  });
}

Var custom_scalar(double value, std::span<const Var> inputs, std::vector<Mat> local_grads) {
  if (inputs.empty()) throw ShapeError("custom_scalar: no inputs");
  if (inputs.size() != local_grads.size()) throw ShapeError("custom_scalar: gradient count mismatch");
  Tape& t = *inputs[0].tape;
  std::vector<int> ids;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    require_same_shape(inputs[i].value(), local_grads[i], "custom_scalar");
    ids.push_back(inputs[i].id);
  }
  Mat out(1, 1);
  out(0, 0) = value;
  return t.record(std::move(out), inputs, [ids, grads = std::move(local_grads)](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.needs_grad(ids[i])) t.grad_acc(ids[i]) += g * grads[i];
    }
  });
}

// --------------------------------------------------------- neural-net ops

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = *x.tape;
  const Mat& v = x.value();
  const Eigen::Index n = v.rows();
  const Eigen::Index d = v.cols();
  Mat xhat(n, d);
  Vec inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = v.row(i).mean();
    const double var = (v.row(i).array() - mean).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (v.row(i).array() - mean) * inv_std(i);
  }
  Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  return t.record(std::move(out), {x, gamma, beta},
                  [x = x.id, gm = gamma.id, bt = beta.id, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Tape& t, int self) {
                    const Mat& g = t.grad(self);
                    if (t.needs_grad(gm)) t.grad_acc(gm) += g.cwiseProduct(xhat).colwise().sum();
                    if (t.needs_grad(bt)) t.grad_acc(bt) += g.colwise().sum();
                    if (!t.needs_grad(x)) return;
                    Mat gx = (g.array().rowwise() * t.value(gm).row(0).array()).matrix();
                    Mat& acc = t.grad_acc(x);
                    for (Eigen::Index i = 0; i < gx.rows(); ++i) {
                      const double m1 = gx.row(i).mean();
                      const double m2 = gx.row(i).dot(xhat.row(i)) / static_cast<double>(gx.cols());
                      acc.row(i).array() += inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2);
                    }
                  });
}

Var grouped_softmax(Var x, int group) {
  Tape& t = *x.tape;
  if (group <= 0 || x.cols() % group != 0) throw ShapeError("grouped_softmax: bad group size");
  const Mat& v = x.value();
  Mat out(v.rows(), v.cols());
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    for (Eigen::Index s = 0; s < v.cols(); s += group) {
      auto seg = v.row(i).segment(s, group);
      const double m = seg.maxCoeff();
      auto e = (seg.array() - m).exp();
      out.row(i).segment(s, group) = e / e.sum();
    }
  }
  return t.record(std::move(out), {x}, [x = x.id, group](Tape& t, int self) {
    const Mat& y = t.value(self);
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(x);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      for (Eigen::Index s = 0; s < y.cols(); s += group) {
        auto ys = y.row(i).segment(s, group);
        auto gs = g.row(i).segment(s, group);
        const double dot = ys.dot(gs);
        acc.row(i).segment(s, group).array() += ys.array() * (gs.array() - dot);
      }
    }
  });
}

Var sine_embed(Var x, int per_coord, double temperature) {
  Tape& t = *x.tape;
  if (per_coord % 2 != 0) throw ShapeError("sine_embed: per_coord must be even");
  const int half = per_coord / 2;
  Vec freq(half);
  for (int k = 0; k < half; ++k) {
    freq(k) = 2.0 * std::numbers::pi / std::pow(temperature, 2.0 * k / per_coord);
  }
  const Mat& v = x.value();
  Mat out(v.rows(), v.cols() * per_coord);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    for (Eigen::Index c = 0; c < v.cols(); ++c) {
      for (int k = 0; k < half; ++k) {
        const double a = v(i, c) * freq(k);
        out(i, c * per_coord + 2 * k) = std::sin(a);
        out(i, c * per_coord + 2 * k + 1) = std::cos(a);
      }
    }
  }
  return t.record(std::move(out), {x}, [x = x.id, per_coord, half, freq](Tape& t, int self) {
    const Mat& y = t.value(self);
    const Mat& g = t.grad(self);
    Mat& acc = t.grad_acc(x);
    for (Eigen::Index i = 0; i < acc.rows(); ++i) {
      for (Eigen::Index c = 0; c < acc.cols(); ++c) {
        double s = 0.0;
        for (int k = 0; k < half; ++k) {
          const Eigen::Index j = c * per_coord + 2 * k;
          // d sin = f cos, d cos = -f sin
          s += freq(k) * (g(i, j) * y(i, j + 1) - g(i, j + 1) * y(i, j));
        }
        acc(i, c) += s;
      }
    }
  });
}

namespace {

struct AttnShape {
  Eigen::Index nq, nk, d, dh;
  int heads;
};

}  // namespace

Var attention(Var q, Var k, Var v, int heads, const SparsePattern* mask) {
  Tape& t = *q.tape;
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  if (Q.cols() != K.cols() || K.rows() != V.rows() || V.cols() != Q.cols()) {
    throw ShapeError("attention: incompatible q/k/v shapes");
  }
  if (heads <= 0 || Q.cols() % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  const AttnShape s{Q.rows(), K.rows(), Q.cols(), Q.cols() / heads, heads};
  const double scl = 1.0 / std::sqrt(static_cast<double>(s.dh));
  Mat out(s.nq, s.d);

  if (mask == nullptr) {
    std::vector<Mat> probs(heads);
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * s.dh;
      Mat scores;
      scores.noalias() = Q.middleCols(c0, s.dh) * K.middleCols(c0, s.dh).transpose();
      scores *= scl;
      for (Eigen::Index i = 0; i < s.nq; ++i) {
        const double m = scores.row(i).maxCoeff();
        scores.row(i) = (scores.row(i).array() - m).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      out.middleCols(c0, s.dh).noalias() = scores * V.middleCols(c0, s.dh);
      probs[h] = std::move(scores);
    }
    return t.record(std::move(out), {q, k, v},
                    [q = q.id, k = k.id, v = v.id, s, scl, probs = std::move(probs)](Tape& t, int self) {
                      const Mat& g = t.grad(self);
                      const Mat& Q = t.value(q);
                      const Mat& K = t.value(k);
                      const Mat& V = t.value(v);
                      for (int h = 0; h < s.heads; ++h) {
                        const Eigen::Index c0 = h * s.dh;
                        const Mat& P = probs[h];
                        Mat gO = g.middleCols(c0, s.dh);
                        if (t.needs_grad(v)) t.grad_acc(v).middleCols(c0, s.dh).noalias() += P.transpose() * gO;
                        if (!t.needs_grad(q) && !t.needs_grad(k)) continue;
                        Mat gP;
                        gP.noalias() = gO * V.middleCols(c0, s.dh).transpose();
                        Vec rs = gP.cwiseProduct(P).rowwise().sum();
                        Mat gS = (P.array() * (gP.array().colwise() - rs.array())).matrix() * scl;
                        if (t.needs_grad(q)) t.grad_acc(q).middleCols(c0, s.dh).noalias() += gS * K.middleCols(c0, s.dh);
                        if (t.needs_grad(k))
                          t.grad_acc(k).middleCols(c0, s.dh).noalias() += gS.transpose() * Q.middleCols(c0, s.dh);
                      }
                    });
  }

  if (mask->rows() != s.nq) throw ShapeError("attention: mask row count mismatch");
  const std::size_t nnz = mask->cols.size();
  std::vector<double> probs(nnz * static_cast<std::size_t>(heads));
  out.setZero();
  std::vector<double> sc;
  for (Eigen::Index i = 0; i < s.nq; ++i) {
    const int b = mask->row_ptr[i];
    const int e = mask->row_ptr[i + 1];
    sc.resize(static_cast<std::size_t>(e - b));
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * s.dh;
      double m = -1e300;
      for (int p = b; p < e; ++p) {
        const int j = mask->cols[p];
        const double val = Q.row(i).segment(c0, s.dh).dot(K.row(j).segment(c0, s.dh)) * scl;
        sc[p - b] = val;
        m = std::max(m, val);
      }
      double z = 0.0;
      for (int p = b; p < e; ++p) {
        sc[p - b] = std::exp(sc[p - b] - m);
        z += sc[p - b];
      }
      for (int p = b; p < e; ++p) {
        const double pr = sc[p - b] / z;
        probs[static_cast<std::size_t>(h) * nnz + p] = pr;
        out.row(i).segment(c0, s.dh) += pr * V.row(mask->cols[p]).segment(c0, s.dh);
      }
    }
  }
  return t.record(std::move(out), {q, k, v},
                  [q = q.id, k = k.id, v = v.id, s, scl, mask = *mask, probs = std::move(probs)](Tape& t, int self) {
                    const Mat& g = t.grad(self);
                    const Mat& Q = t.value(q);
                    const Mat& K = t.value(k);
                    const Mat& V = t.value(v);
                    const bool nq = t.needs_grad(q), nk = t.needs_grad(k), nv = t.needs_grad(v);
                    Mat* gq = nq ? &t.grad_acc(q) : nullptr;
                    Mat* gk = nk ? &t.grad_acc(k) : nullptr;
                    Mat* gv = nv ? &t.grad_acc(v) : nullptr;
                    const std::size_t nnz = mask.cols.size();
                    std::vector<double> gp;
                    for (Eigen::Index i = 0; i < s.nq; ++i) {
                      const int b = mask.row_ptr[i];
                      const int e = mask.row_ptr[i + 1];
                      gp.resize(static_cast<std::size_t>(e - b));
                      for (int h = 0; h < s.heads; ++h) {
                        const Eigen::Index c0 = h * s.dh;
                        const double* pr = &probs[static_cast<std::size_t>(h) * nnz];
                        auto go = g.row(i).segment(c0, s.dh);
                        double dot = 0.0;
                        for (int p = b; p < e; ++p) {
                          const int j = mask.cols[p];
                          if (nv) gv->row(j).segment(c0, s.dh) += pr[p] * go;
                          gp[p - b] = go.dot(V.row(j).segment(c0, s.dh));
                          dot += gp[p - b] * pr[p];
                        }
                        if (!nq && !nk) continue;
                        for (int p = b; p < e; ++p) {
                          const int j = mask.cols[p];
                          const double gs = pr[p] * (gp[p - b] - dot) * scl;
                          if (nq) gq->row(i).segment(c0, s.dh) += gs * K.row(j).segment(c0, s.dh);
                          if (nk) gk->row(j).segment(c0, s.dh) += gs * Q.row(i).segment(c0, s.dh);
                        }
                      }
                    }
                  });
}

Var sampling_locations(Var queries, Var offsets, int points) {
  Tape& t = *queries.tape;
  const Mat& Q = queries.value();
  const Mat& O = offsets.value();
  if (Q.cols() != 4 || O.rows() != Q.rows() || O.cols() % 2 != 0) {
    throw ShapeError("sampling_locations: bad shapes");
  }
  const double k = 0.5 / points;
  Mat out(O.rows(), O.cols());
  for (Eigen::Index i = 0; i < O.rows(); ++i) {
    for (Eigen::Index c = 0; c < O.cols(); c += 2) {
      out(i, c) = std::clamp(Q(i, 0) + O(i, c) * Q(i, 2) * k, 0.0, 1.0);
      out(i, c + 1) = std::clamp(Q(i, 1) + O(i, c + 1) * Q(i, 3) * k, 0.0, 1.0);
    }
  }
  return t.record(std::move(out), {queries, offsets}, [qi = queries.id, oi = offsets.id, k](Tape& t, int self) {
    const Mat& Q = t.value(qi);
    const Mat& O = t.value(oi);
    const Mat& g = t.grad(self);
    const bool nq = t.needs_grad(qi), no = t.needs_grad(oi);
    Mat* gq = nq ? &t.grad_acc(qi) : nullptr;
    Mat* go = no ? &t.grad_acc(oi) : nullptr;
    for (Eigen::Index i = 0; i < O.rows(); ++i) {
      for (Eigen::Index c = 0; c < O.cols(); c += 2) {
        for (int a = 0; a < 2; ++a) {
          const double raw = Q(i, a) + O(i, c + a) * Q(i, 2 + a) * k;
          if (raw < 0.0 || raw > 1.0) continue;
          const double gg = g(i, c + a);
          if (nq) {
            (*gq)(i, a) += gg;
            (*gq)(i, 2 + a) += gg * O(i, c + a) * k;
          }
          if (no) (*go)(i, c + a) += gg * Q(i, 2 + a) * k;
        }
      }
    }
  });
}

namespace {

struct Bilinear {
  int idx[4];
  double w[4];
  // d(weight)/d(px), d(weight)/d(py)
  double dx[4];
  double dy[4];
};

inline Bilinear bilinear_at(double x, double y, int start, int height, int width) {
  const double px = x * width - 0.5;
  const double py = y * height - 0.5;
  const double fx0 = std::floor(px);
  const double fy0 = std::floor(py);
  const double fx = px - fx0;
  const double fy = py - fy0;
  const int x0 = static_cast<int>(fx0);
  const int y0 = static_cast<int>(fy0);
  auto cx = [width](int v) { return std::clamp(v, 0, width - 1); };
  auto cy = [height](int v) { return std::clamp(v, 0, height - 1); };
  Bilinear b{};
  b.idx[0] = start + cy(y0) * width + cx(x0);
  b.idx[1] = start + cy(y0) * width + cx(x0 + 1);
  b.idx[2] = start + cy(y0 + 1) * width + cx(x0);
  b.idx[3] = start + cy(y0 + 1) * width + cx(x0 + 1);
  b.w[0] = (1 - fx) * (1 - fy);
  b.w[1] = fx * (1 - fy);
  b.w[2] = (1 - fx) * fy;
  b.w[3] = fx * fy;
  b.dx[0] = -(1 - fy);
  b.dx[1] = (1 - fy);
  b.dx[2] = -fy;
  b.dx[3] = fy;
  b.dy[0] = -(1 - fx);
  b.dy[1] = -fx;
  b.dy[2] = (1 - fx);
  b.dy[3] = fx;
  return b;
}

}  // namespace

Var deform_sample(Var value, Var loc, Var weight, const LevelInfo& levels, int heads, int points) {
  Tape& t = *value.tape;
  const Mat& Vm = value.value();
  const Mat& L = loc.value();
  const Mat& W = weight.value();
  const int nl = levels.num_levels();
  const Eigen::Index n = L.rows();
  const Eigen::Index d = Vm.cols();
  if (d % heads != 0) throw ShapeError("deform_sample: dim not divisible by heads");
  const Eigen::Index dh = d / heads;
  const Eigen::Index samples = static_cast<Eigen::Index>(heads) * nl * points;
  if (L.cols() != 2 * samples || W.cols() != samples || W.rows() != n || Vm.rows() != levels.total()) {
    throw ShapeError("deform_sample: bad shapes");
  }
  Mat out = Mat::Zero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int h = 0; h < heads; ++h) {
      auto orow = out.row(i).segment(h * dh, dh);
      for (int l = 0; l < nl; ++l) {
        for (int p = 0; p < points; ++p) {
          const Eigen::Index sidx = (static_cast<Eigen::Index>(h) * nl + l) * points + p;
          const Bilinear b = bilinear_at(L(i, 2 * sidx), L(i, 2 * sidx + 1), levels.starts[l], levels.heights[l],
                                         levels.widths[l]);
          const double a = W(i, sidx);
          for (int c = 0; c < 4; ++c) orow += (a * b.w[c]) * Vm.row(b.idx[c]).segment(h * dh, dh);
        }
      }
    }
  }
  return t.record(std::move(out), {value, loc, weight},
                  [vi = value.id, li = loc.id, wi = weight.id, levels, heads, points](Tape& t, int self) {
                    const Mat& Vm = t.value(vi);
                    const Mat& L = t.value(li);
                    const Mat& W = t.value(wi);
                    const Mat& g = t.grad(self);
                    const int nl = levels.num_levels();
                    const Eigen::Index dh = Vm.cols() / heads;
                    const bool nv = t.needs_grad(vi), nlc = t.needs_grad(li), nw = t.needs_grad(wi);
                    Mat* gv = nv ? &t.grad_acc(vi) : nullptr;
                    Mat* gl = nlc ? &t.grad_acc(li) : nullptr;
                    Mat* gw = nw ? &t.grad_acc(wi) : nullptr;
                    for (Eigen::Index i = 0; i < L.rows(); ++i) {
                      for (int h = 0; h < heads; ++h) {
                        auto go = g.row(i).segment(h * dh, dh);
                        for (int l = 0; l < nl; ++l) {
                          for (int p = 0; p < points; ++p) {
                            const Eigen::Index sidx = (static_cast<Eigen::Index>(h) * nl + l) * points + p;
                            const Bilinear b = bilinear_at(L(i, 2 * sidx), L(i, 2 * sidx + 1), levels.starts[l],
                                                           levels.heights[l], levels.widths[l]);
                            const double a = W(i, sidx);
                            double gsx = 0.0, gsy = 0.0, gsw = 0.0;
                            for (int c = 0; c < 4; ++c) {
                              const double dotc = go.dot(Vm.row(b.idx[c]).segment(h * dh, dh));
                              gsw += b.w[c] * dotc;
                              gsx += b.dx[c] * dotc;
                              gsy += b.dy[c] * dotc;
                              if (nv) gv->row(b.idx[c]).segment(h * dh, dh) += (a * b.w[c]) * go;
                            }
                            if (nw) (*gw)(i, sidx) += gsw;
                            if (nlc) {
                              (*gl)(i, 2 * sidx) += a * gsx * levels.widths[l];
                              (*gl)(i, 2 * sidx + 1) += a * gsy * levels.heights[l];
                            }
                          }
                        }
                      }
                    }
                  });
}

Var conv2d(Var x, Var weight, Var bias, const ConvShape& shape) {
  Tape& t = *x.tape;
  const Mat& X = x.value();
  const int k = shape.kernel;
  const int cin = shape.in_channels;
  if (X.rows() != static_cast<Eigen::Index>(shape.height) * shape.width || X.cols() != cin) {
    throw ShapeError("conv2d: input does not match declared shape");
  }
  if (weight.rows() != static_cast<Eigen::Index>(k) * k * cin || weight.cols() != shape.out_channels) {
    throw ShapeError("conv2d: weight shape mismatch");
  }
  const int ho = shape.out_height();
  const int wo = shape.out_width();
  Mat cols = Mat::Zero(static_cast<Eigen::Index>(ho) * wo, static_cast<Eigen::Index>(k) * k * cin);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * shape.stride - shape.pad + ky;
        if (iy < 0 || iy >= shape.height) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * shape.stride - shape.pad + kx;
          if (ix < 0 || ix >= shape.width) continue;
          cols.row(r).segment((ky * k + kx) * cin, cin) = X.row(static_cast<Eigen::Index>(iy) * shape.width + ix);
        }
      }
    }
  }
  Mat out;
  out.noalias() = cols * weight.value();
  out.rowwise() += bias.value().row(0);
  return t.record(std::move(out), {x, weight, bias},
                  [xi = x.id, wi = weight.id, bi = bias.id, shape, cols = std::move(cols)](Tape& t, int self) {
                    const Mat& g = t.grad(self);
                    if (t.needs_grad(wi)) t.grad_acc(wi).noalias() += cols.transpose() * g;
                    if (t.needs_grad(bi)) t.grad_acc(bi) += g.colwise().sum();
                    if (!t.needs_grad(xi)) return;
                    Mat gcols;
                    gcols.noalias() = g * t.value(wi).transpose();
                    Mat& gx = t.grad_acc(xi);
                    const int k = shape.kernel;
                    const int cin = shape.in_channels;
                    const int ho = shape.out_height();
                    const int wo = shape.out_width();
                    for (int oy = 0; oy < ho; ++oy) {
                      for (int ox = 0; ox < wo; ++ox) {
                        const Eigen::Index r = static_cast<Eigen::Index>(oy) * wo + ox;
                        for (int ky = 0; ky < k; ++ky) {
                          const int iy = oy * shape.stride - shape.pad + ky;
                          if (iy < 0 || iy >= shape.height) continue;
                          for (int kx = 0; kx < k; ++kx) {
                            const int ix = ox * shape.stride - shape.pad + kx;
                            if (ix < 0 || ix >= shape.width) continue;
                            gx.row(static_cast<Eigen::Index>(iy) * shape.width + ix) +=
                                gcols.row(r).segment((ky * k + kx) * cin, cin);
                          }
                        }
                      }
                    }
                  });
}

}  // namespace aios::ad

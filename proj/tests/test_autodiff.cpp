#include <doctest.h>

#include "aios/autodiff.hpp"
#include "aios/rng.hpp"

#include <cmath>
#include <functional>

using namespace aios;
using namespace aios::ad;

namespace {

using Builder = std::function<Var(Tape&, const std::vector<Var>&)>;

Mat random_mat(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  return Mat::NullaryExpr(r, c, [&]() { return rng.uniform(lo, hi); });
}

double eval(const std::vector<Mat>& inputs, const Builder& build, const Mat& proj) {
  Tape t(false);
  std::vector<Var> vars;
  for (const Mat& m : inputs) vars.push_back(t.input(m, false));
  return build(t, vars).value().cwiseProduct(proj).sum();
}

// Largest relative error between reverse-mode and central-difference gradients
// of sum(out .* proj) over all input entries.
double max_grad_error(std::vector<Mat> inputs, const Builder& build, Rng& rng, double h = 1e-6) {
  Mat proj;
  std::vector<Mat> grads;
  {
    Tape t(true);
    std::vector<Var> vars;
    for (const Mat& m : inputs) vars.push_back(t.input(m, true));
    const Var out = build(t, vars);
    proj = random_mat(rng, out.rows(), out.cols());
    t.seed(out, proj);
    t.backward();
    for (const Var& v : vars) grads.push_back(t.has_grad(v.id) ? t.grad(v.id) : Mat::Zero(v.rows(), v.cols()));
  }
  double worst = 0.0;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    for (Eigen::Index i = 0; i < inputs[a].size(); ++i) {
      const double orig = inputs[a].data()[i];
      inputs[a].data()[i] = orig + h;
      const double fp = eval(inputs, build, proj);
      inputs[a].data()[i] = orig - h;
      const double fm = eval(inputs, build, proj);
      inputs[a].data()[i] = orig;
      const double fd = (fp - fm) / (2 * h);
      const double an = grads[a].data()[i];
      worst = std::max(worst, std::abs(fd - an) / std::max(1e-3, std::max(std::abs(fd), std::abs(an))));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("autodiff: elementwise and shape ops") {
  Rng rng(1);
  const Mat a = random_mat(rng, 3, 4), b = random_mat(rng, 3, 4), row = random_mat(rng, 1, 4);
  CHECK(max_grad_error({a, b}, [](Tape&, const std::vector<Var>& v) { return mul(add(v[0], v[1]), sub(v[0], scale(v[1], 2.0))); }, rng) < 1e-6);
  CHECK(max_grad_error({a, row}, [](Tape&, const std::vector<Var>& v) { return sigmoid(add_row(v[0], v[1])); }, rng) < 1e-6);
  CHECK(max_grad_error({a, b}, [](Tape&, const std::vector<Var>& v) { return min_elem(relu(v[0]), exp(v[1])); }, rng) < 1e-6);
  const Mat p = random_mat(rng, 3, 4, 0.05, 0.95);
  CHECK(max_grad_error({p}, [](Tape&, const std::vector<Var>& v) { return inverse_sigmoid(v[0]); }, rng) < 1e-6);
  const Mat w = random_mat(rng, 4, 5), bias = random_mat(rng, 1, 5);
  CHECK(max_grad_error({a, w, bias}, [](Tape&, const std::vector<Var>& v) { return linear(v[0], v[1], v[2]); }, rng) < 1e-6);
  CHECK(max_grad_error({a, w}, [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); }, rng) < 1e-6);
  CHECK(max_grad_error({a, b}, [](Tape&, const std::vector<Var>& v) {
          const Var parts[] = {v[0], slice_rows(v[1], 1, 2), gather_rows(v[0], {2, 0, 2})};
          return block_mean(concat_rows(parts), 2);
        }, rng) < 1e-6);
  CHECK(max_grad_error({a, b}, [](Tape&, const std::vector<Var>& v) {
          const Var parts[] = {slice_cols(v[0], 1, 2), v[1]};
          return reshape(concat_cols(parts), 2, 9);
        }, rng) < 1e-6);
  CHECK(max_grad_error({a, b}, [](Tape&, const std::vector<Var>& v) {
          const Var s[] = {sum(v[0]), sum(mul(v[1], v[1]))};
          const double wts[] = {0.3, -2.0};
          return weighted_sum(s, wts);
        }, rng) < 1e-6);
}

TEST_CASE("autodiff: custom scalar and parameter gradient flush") {
  ParamStore store;
  Param& p = store.add("w", 2, 2);
  p.value << 1, 2, 3, 4;
  Tape t;
  const Var w = t.param(p);
  const Var s = custom_scalar(7.0, std::vector<Var>{w}, {Mat::Constant(2, 2, 0.5)});
  CHECK(s.value()(0, 0) == 7.0);
  t.backward(s);
  CHECK((p.grad - Mat::Constant(2, 2, 0.5)).norm() == 0.0);
  store.zero_grad();
  CHECK(p.grad.norm() == 0.0);
  CHECK(store.num_scalars() == 4);
}

TEST_CASE("autodiff: layer norm, grouped softmax and sine embedding") {
  Rng rng(2);
  const Mat x = random_mat(rng, 4, 8), g = random_mat(rng, 1, 8), b = random_mat(rng, 1, 8);
  CHECK(max_grad_error({x, g, b}, [](Tape&, const std::vector<Var>& v) { return layer_norm(v[0], v[1], v[2]); }, rng) < 1e-5);
  CHECK(max_grad_error({x}, [](Tape&, const std::vector<Var>& v) { return grouped_softmax(v[0], 4); }, rng) < 1e-6);
  const Mat pos = random_mat(rng, 3, 4, 0.0, 1.0);
  CHECK(max_grad_error({pos}, [](Tape&, const std::vector<Var>& v) { return sine_embed(v[0], 8); }, rng) < 1e-5);

  Tape t(false);
  const Var sm = grouped_softmax(t.input(x, false), 4);
  for (Eigen::Index i = 0; i < sm.rows(); ++i) {
    CHECK(sm.value().row(i).segment(0, 4).sum() == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(sm.value().row(i).segment(4, 4).sum() == doctest::Approx(1.0).epsilon(1e-14));
  }
}

TEST_CASE("autodiff: dense and masked attention") {
  Rng rng(3);
  const Mat q = random_mat(rng, 5, 8), k = random_mat(rng, 6, 8), v = random_mat(rng, 6, 8);
  CHECK(max_grad_error({q, k, v}, [](Tape&, const std::vector<Var>& in) { return attention(in[0], in[1], in[2], 2, nullptr); }, rng) < 1e-6);
  SparsePattern mask;
  mask.row_ptr = {0, 2, 3, 6, 7, 9};
  mask.cols = {0, 4, 1, 0, 2, 5, 3, 1, 5};
  CHECK(max_grad_error({q, k, v}, [&](Tape&, const std::vector<Var>& in) { return attention(in[0], in[1], in[2], 2, &mask); }, rng) < 1e-6);

  // A full mask reproduces dense attention.
  SparsePattern full;
  full.row_ptr = {0};
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 6; ++j) full.cols.push_back(j);
    full.row_ptr.push_back(static_cast<int>(full.cols.size()));
  }
  Tape t(false);
  const Var qa = t.input(q, false), ka = t.input(k, false), va = t.input(v, false);
  CHECK((attention(qa, ka, va, 2, nullptr).value() - attention(qa, ka, va, 2, &full).value()).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("autodiff: deformable sampling") {
  Rng rng(4);
  LevelInfo lv;
  lv.heights = {4, 2};
  lv.widths = {4, 2};
  lv.starts = {0, 16};
  const int heads = 2, points = 2;
  const Mat value = random_mat(rng, 20, 4);
  const Mat queries = (Mat(3, 4) << 0.4, 0.5, 0.3, 0.4, 0.3, 0.6, 0.2, 0.2, 0.55, 0.45, 0.5, 0.3).finished();
  const Mat off = random_mat(rng, 3, heads * 2 * points * 2);
  const Mat wlog = random_mat(rng, 3, heads * 2 * points);
  auto build = [&](Tape&, const std::vector<Var>& in) {
    const Var loc = sampling_locations(in[1], in[2], points);
    const Var w = grouped_softmax(in[3], 2 * points);
    return deform_sample(in[0], loc, w, lv, heads, points);
  };
  CHECK(max_grad_error({value, queries, off, wlog}, build, rng) < 1e-5);

  // Zero offsets at a grid node return that node's features.
  Tape t(false);
  LevelInfo one;
  one.heights = {4};
  one.widths = {4};
  one.starts = {0};
  const Mat v16 = random_mat(rng, 16, 2);
  const Mat q = (Mat(1, 4) << 2.5 / 4, 1.5 / 4, 0.2, 0.2).finished();
  const Var loc = sampling_locations(t.input(q, false), t.input(Mat::Zero(1, 2), false), 1);
  const Var s = deform_sample(t.input(v16, false), loc, t.input(Mat::Ones(1, 1), false), one, 1, 1);
  CHECK((s.value().row(0) - v16.row(1 * 4 + 2)).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("autodiff: strided convolution") {
  Rng rng(5);
  ConvShape cs;
  cs.height = 6;
  cs.width = 6;
  cs.in_channels = 2;
  cs.out_channels = 3;
  cs.stride = 2;
  const Mat x = random_mat(rng, 36, 2), w = random_mat(rng, 18, 3), b = random_mat(rng, 1, 3);
  CHECK(max_grad_error({x, w, b}, [&](Tape&, const std::vector<Var>& in) { return conv2d(in[0], in[1], in[2], cs); }, rng) < 1e-6);
  CHECK(cs.out_height() == 3);
}

#include "aios/nn.hpp"

#include <cmath>

namespace aios::nn {

void add_linear(ad::ParamStore& store, const std::string& prefix, int in, int out, Rng& rng, Init init, double bias) {
  ad::Param& w = store.add(prefix + ".w", in, out);
  ad::Param& b = store.add(prefix + ".b", 1, out);
  const double limit = std::sqrt(6.0 / (in + out));
  for (Eigen::Index i = 0; i < w.value.size(); ++i) {
    switch (init) {
      case Init::kXavier:
        w.value.data()[i] = rng.uniform(-limit, limit);
        break;
      case Init::kZero:
        w.value.data()[i] = 0.0;
        break;
      case Init::kSmall:
        w.value.data()[i] = rng.uniform(-limit, limit) * 1e-2;
        break;
    }
  }
  b.value.setConstant(bias);
}

void add_layer_norm(ad::ParamStore& store, const std::string& prefix, int dim) {
  store.add(prefix + ".g", 1, dim).value.setOnes();
  store.add(prefix + ".b", 1, dim).value.setZero();
}

void add_mlp(ad::ParamStore& store, const std::string& prefix, int in, int hidden, int out, Rng& rng, Init last) {
  add_linear(store, prefix + ".0", in, hidden, rng);
  add_linear(store, prefix + ".1", hidden, out, rng, last);
}

ad::Var linear(ad::Tape& t, ad::ParamStore& store, const std::string& prefix, ad::Var x) {
  return ad::linear(x, t.param(store.get(prefix + ".w")), t.param(store.get(prefix + ".b")));
}

ad::Var layer_norm(ad::Tape& t, ad::ParamStore& store, const std::string& prefix, ad::Var x) {
  return ad::layer_norm(x, t.param(store.get(prefix + ".g")), t.param(store.get(prefix + ".b")));
}

ad::Var mlp(ad::Tape& t, ad::ParamStore& store, const std::string& prefix, ad::Var x) {
  return linear(t, store, prefix + ".1", ad::relu(linear(t, store, prefix + ".0", x)));
}

}  // namespace aios::nn

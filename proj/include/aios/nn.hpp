#pragma once

// Small layer helpers over the tape: parameters are looked up by name prefix.

#include "aios/autodiff.hpp"
#include "aios/rng.hpp"

#include <string>

namespace aios::nn {

enum class Init { kXavier, kZero, kSmall };

// Creates prefix.w (in × out) and prefix.b (1 × out).
void add_linear(ad::ParamStore& store, const std::string& prefix, int in, int out, Rng& rng, Init init = Init::kXavier,
                double bias = 0.0);
// Creates prefix.g (ones) and prefix.b (zeros).
void add_layer_norm(ad::ParamStore& store, const std::string& prefix, int dim);
// Two-layer perceptron prefix.0 (in → hidden, ReLU) and prefix.1 (hidden → out).
void add_mlp(ad::ParamStore& store, const std::string& prefix, int in, int hidden, int out, Rng& rng,
             Init last = Init::kXavier);

ad::Var linear(ad::Tape& t, ad::ParamStore& store, const std::string& prefix, ad::Var x);
ad::Var layer_norm(ad::Tape& t, ad::ParamStore& store, const std::string& prefix, ad::Var x);
ad::Var mlp(ad::Tape& t, ad::ParamStore& store, const std::string& prefix, ad::Var x);

}  // namespace aios::nn

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

namespace macb {

using TensorMap = std::map<std::string, Tensor>;

// Builds the loss on a fresh tape from trainable params and constant inputs.
using GraphFn = std::function<ad::Var(ad::Tape&, const Bindings& params, const Bindings& inputs)>;

struct LossAndGrads {
  double loss = 0.0;
  ParamStore grads;  // same keys and shapes as the params
};

LossAndGrads forward_backward(const GraphFn& graph, const ParamStore& params, const TensorMap& inputs);

using ScalarFn = std::function<double(const ParamStore&)>;

// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every coordinate.
ParamStore finite_diff_grad(const ScalarFn& f, const ParamStore& params, double h);

// |analytic - numeric| / max(1, |analytic|)
double gradient_relative_error(double analytic, double numeric);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst;  // "<param>[<flat index>]"
  bool passed(double tol) const { return max_rel_error <= tol; }
};

// Compares forward_backward against central differences. With
// max_per_tensor > 0 at most that many seeded-random coordinates of each
// parameter tensor are probed.
GradCheckReport check_gradients(const GraphFn& graph, const ParamStore& params, const TensorMap& inputs,
                                double h = 1e-6, std::size_t max_per_tensor = 0, std::uint64_t seed = 0);

}  // namespace macb

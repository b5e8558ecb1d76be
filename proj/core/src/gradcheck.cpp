#include "macb/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "macb/error.hpp"
#include "macb/rng.hpp"

namespace macb {

namespace {

Bindings bind_inputs(ad::Tape& tape, const TensorMap& inputs) {
  Bindings b;
  for (const auto& [k, t] : inputs) b.set(k, tape.constant(t));
  return b;
}

double evaluate(const GraphFn& graph, const ParamStore& params, const TensorMap& inputs) {
  ad::Tape tape;
  const Bindings p = bind_constants(tape, params);
  const Bindings in = bind_inputs(tape, inputs);
  ad::Var loss = graph(tape, p, in);
  if (loss.value().size() != 1)
    throw ShapeError(tape.next_label("loss"), "loss must be scalar, got " + shape_str(loss.shape()));
  return loss.value()[0];
}

}  // namespace

LossAndGrads forward_backward(const GraphFn& graph, const ParamStore& params, const TensorMap& inputs) {
  ad::Tape tape;
  const Bindings p = bind_variables(tape, params);
  const Bindings in = bind_inputs(tape, inputs);
  ad::Var loss = graph(tape, p, in);
  if (loss.value().size() != 1)
    throw ShapeError(std::string(tape.op(loss.id())) + "#" + std::to_string(loss.id()),
                     "loss must be scalar, got " + shape_str(loss.shape()));
  tape.backward(loss);
  LossAndGrads out;
  out.loss = loss.value()[0];
  for (const auto& [name, v] : p.all()) out.grads.set(name, tape.grad(v));
  return out;
}

ParamStore finite_diff_grad(const ScalarFn& f, const ParamStore& params, double h) {
  if (!(h > 0.0)) throw ConfigError("finite_diff_grad: step must be positive");
  ParamStore probe = params;
  ParamStore grads = params.zeros_like();
  for (const auto& [name, t] : params) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double x = t[i];
      probe.at(name)[i] = x + h;
      const double fp = f(probe);
      probe.at(name)[i] = x - h;
      const double fm = f(probe);
      probe.at(name)[i] = x;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericalError("finite_diff_grad: non-finite evaluation at " + name + "[" + std::to_string(i) + "]");
      grads.at(name)[i] = (fp - fm) / (2.0 * h);
    }
  }
  return grads;
}

double gradient_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

GradCheckReport check_gradients(const GraphFn& graph, const ParamStore& params, const TensorMap& inputs, double h,
                                std::size_t max_per_tensor, std::uint64_t seed) {
  const auto analytic = forward_backward(graph, params, inputs).grads;
  std::vector<std::pair<std::string, std::size_t>> coords;
  Rng rng(seed);
  for (const auto& [name, t] : params) {
    std::vector<std::size_t> idx(t.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_per_tensor > 0 && idx.size() > max_per_tensor) {
      std::shuffle(idx.begin(), idx.end(), rng.engine());
      idx.resize(max_per_tensor);
    }
    for (auto i : idx) coords.emplace_back(name, i);
  }
  GradCheckReport rep;
  ParamStore probe = params;
  for (const auto& [name, i] : coords) {
    const double x = params.at(name)[i];
    probe.at(name)[i] = x + h;
    const double fp = evaluate(graph, probe, inputs);
    probe.at(name)[i] = x - h;
    const double fm = evaluate(graph, probe, inputs);
    probe.at(name)[i] = x;
    const double numeric = (fp - fm) / (2.0 * h);
    double err = gradient_relative_error(analytic.at(name)[i], numeric);
    if (err > 1e-6) {
      // A ReLU or clamp kink inside [x - h, x + h] spoils the central
      // difference; a much smaller step rules that out.
      const double hs = h * 1e-2;
      probe.at(name)[i] = x + hs;
      const double fps = evaluate(graph, probe, inputs);
      probe.at(name)[i] = x - hs;
      const double fms = evaluate(graph, probe, inputs);
      probe.at(name)[i] = x;
      err = std::min(err, gradient_relative_error(analytic.at(name)[i], (fps - fms) / (2.0 * hs)));
    }
    ++rep.coordinates;
    if (err >= rep.max_rel_error) {
      rep.max_rel_error = err;
      rep.worst = name + "[" + std::to_string(i) + "]";
    }
  }
  return rep;
}

}  // namespace macb

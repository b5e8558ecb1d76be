#include "macb/layers.hpp"

#include <cmath>

#include "macb/error.hpp"
#include "macb/rng.hpp"

namespace macb::nn {

using ad::Var;

Var linear(Var x, Var w, Var b) { return ad::add(ad::matmul(x, w), b); }
Var linear(Var x, Var w) { return ad::matmul(x, w); }

Var linear(const Bindings& p, const std::string& prefix, Var x) {
  Var y = ad::matmul(x, p[prefix + ".w"]);
  if (p.contains(prefix + ".b")) y = ad::add(y, p[prefix + ".b"]);
  return y;
}

Var layer_norm(const Bindings& p, const std::string& prefix, Var x) {
  return ad::add(ad::mul(ad::layer_norm(x), p[prefix + ".g"]), p[prefix + ".b"]);
}

Var l2_normalize_rows(Var x, double eps) {
  Var norm = ad::sqrt(ad::add_scalar(ad::sum_axis(ad::square(x), x.rank() - 1, true), eps));
  return ad::div(x, norm);
}

AttentionResult self_attention(const Bindings& p, const std::string& prefix, Var x, std::size_t heads) {
  const std::size_t d = x.dim(1);
  if (heads == 0 || d % heads != 0)
    throw ShapeError(prefix, "width " + std::to_string(d) + " not divisible by " + std::to_string(heads) + " heads");
  const std::size_t dh = d / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  Var q = ad::matmul(x, p[prefix + ".wq"]);
  Var k = ad::matmul(x, p[prefix + ".wk"]);
  Var v = ad::matmul(x, p[prefix + ".wv"]);
  AttentionResult r;
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : ad::slice(q, 1, h * dh, (h + 1) * dh);
    Var kh = heads == 1 ? k : ad::slice(k, 1, h * dh, (h + 1) * dh);
    Var vh = heads == 1 ? v : ad::slice(v, 1, h * dh, (h + 1) * dh);
    Var a = ad::softmax(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
    r.weights.push_back(a.value());
    outs.push_back(ad::matmul(a, vh));
  }
  Var cat = heads == 1 ? outs.front() : ad::concat(outs, 1);
  r.out = ad::matmul(cat, p[prefix + ".wo"]);
  return r;
}

void init_attention(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d) {
  for (const char* n : {".wq", ".wk", ".wv", ".wo"}) store.set(prefix + n, rng.xavier({d, d}, d, d));
}

void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d) {
  store.init_constant(prefix + ".g", {d}, 1.0);
  store.init_constant(prefix + ".b", {d}, 0.0);
}

}  // namespace macb::nn

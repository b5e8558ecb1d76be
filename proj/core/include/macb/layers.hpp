#pragma once

#include <string>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/param_store.hpp"

// Small building blocks composed from the autodiff primitives.
namespace macb::nn {

// x [N, in] * w [in, out] + b [out]
ad::Var linear(ad::Var x, ad::Var w, ad::Var b);
ad::Var linear(ad::Var x, ad::Var w);
// Looks up "<prefix>.w" and, if bound, "<prefix>.b".
ad::Var linear(const Bindings& p, const std::string& prefix, ad::Var x);

// Layer norm over the last axis followed by per-feature gain and shift.
ad::Var layer_norm(const Bindings& p, const std::string& prefix, ad::Var x);

// Divides each row by its L2 norm.
ad::Var l2_normalize_rows(ad::Var x, double eps = 1e-12);

struct AttentionResult {
  ad::Var out;                  // [N, d]
  std::vector<Tensor> weights;  // per head, [N, N], rows sum to 1
};

// Multi-head scaled dot-product self-attention over the rows of x [N, d]:
// heads attend over column slices of xWq, xWk, xWv; concat(heads) * Wo.
// Parameters "<prefix>.wq", ".wk", ".wv", ".wo" (all [d, d]).
AttentionResult self_attention(const Bindings& p, const std::string& prefix, ad::Var x, std::size_t heads);

void init_attention(ParamStore& store, Rng& rng, const std::string& prefix, std::size_t d);
void init_layer_norm(ParamStore& store, const std::string& prefix, std::size_t d);

}  // namespace macb::nn

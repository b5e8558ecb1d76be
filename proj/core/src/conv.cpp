#include "macb/conv.hpp"

#include <algorithm>
#include <array>
#include <memory>

#include "macb/error.hpp"

namespace macb::ad {

ConvSpec same_padding(const std::vector<std::size_t>& kernel, const std::vector<std::size_t>& dilation,
                      std::size_t groups) {
  ConvSpec s;
  s.groups = groups;
  s.dilation = dilation.empty() ? std::vector<std::size_t>(kernel.size(), 1) : dilation;
  for (std::size_t i = 0; i < kernel.size(); ++i) {
    const std::size_t extent = s.dilation[i] * (kernel[i] - 1);
    s.pad_lo.push_back(extent / 2);
    s.pad_hi.push_back(extent - extent / 2);
  }
  return s;
}

namespace {

// Geometry normalized to three spatial axes (leading axes of extent 1).
struct Geometry {
  std::size_t cin = 0, cout = 0, groups = 1, cin_g = 0, cout_g = 0;
  std::array<std::size_t, 3> in{1, 1, 1}, out{1, 1, 1}, k{1, 1, 1}, dil{1, 1, 1}, lo{0, 0, 0};

  std::size_t in_size() const { return in[0] * in[1] * in[2]; }
  std::size_t out_size() const { return out[0] * out[1] * out[2]; }
  std::size_t k_size() const { return k[0] * k[1] * k[2]; }

  // Valid output range [o0, o1) along axis a for kernel tap t.
  void range(std::size_t a, std::size_t t, std::size_t& o0, std::size_t& o1) const {
    const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(t * dil[a]) - static_cast<std::ptrdiff_t>(lo[a]);
    // input index = o + shift, must lie in [0, in)
    const std::ptrdiff_t lo_o = std::max<std::ptrdiff_t>(0, -shift);
    const std::ptrdiff_t hi_o = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(out[a]),
                                                         static_cast<std::ptrdiff_t>(in[a]) - shift);
    o0 = static_cast<std::size_t>(lo_o);
    o1 = hi_o > lo_o ? static_cast<std::size_t>(hi_o) : o0;
  }
  std::ptrdiff_t shift(std::size_t a, std::size_t t) const {
    return static_cast<std::ptrdiff_t>(t * dil[a]) - static_cast<std::ptrdiff_t>(lo[a]);
  }
};

Geometry make_geometry(const Shape& x, const Shape& w, const ConvSpec& spec, const std::string& where) {
  if (x.size() < 2 || x.size() > 4)
    throw ShapeError(where, "input must be [C, S...] with 1-3 spatial axes, got " + shape_str(x));
  const std::size_t r = x.size() - 1;
  if (w.size() != r + 2) throw ShapeError(where, "weight " + shape_str(w) + " does not match input " + shape_str(x));
  Geometry g;
  g.groups = spec.groups;
  g.cin = x[0];
  g.cout = w[0];
  if (g.groups == 0 || g.cin % g.groups != 0 || g.cout % g.groups != 0)
    throw ShapeError(where, "channels " + std::to_string(g.cin) + "->" + std::to_string(g.cout) +
                                " not divisible by groups " + std::to_string(g.groups));
  g.cin_g = g.cin / g.groups;
  g.cout_g = g.cout / g.groups;
  if (w[1] != g.cin_g)
    throw ShapeError(where, "weight expects " + std::to_string(w[1]) + " input channels per group, input has " +
                                std::to_string(g.cin_g));
  auto get = [](const std::vector<std::size_t>& v, std::size_t i, std::size_t def) {
    return v.empty() ? def : v.at(i);
  };
  for (const auto* v : {&spec.dilation, &spec.pad_lo, &spec.pad_hi})
    if (!v->empty() && v->size() != r) throw ShapeError(where, "conv spec rank does not match input");
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t a = 3 - r + i;
    g.in[a] = x[i + 1];
    g.k[a] = w[i + 2];
    g.dil[a] = get(spec.dilation, i, 1);
    if (g.dil[a] == 0) throw ShapeError(where, "dilation must be >= 1");
    g.lo[a] = get(spec.pad_lo, i, 0);
    const std::size_t padded = g.in[a] + g.lo[a] + get(spec.pad_hi, i, 0);
    const std::size_t extent = g.dil[a] * (g.k[a] - 1) + 1;
    if (extent > padded)
      throw ShapeError(where, "kernel extent " + std::to_string(extent) + " exceeds padded input " +
                                  std::to_string(padded) + " on spatial axis " + std::to_string(i));
    g.out[a] = padded - extent + 1;
  }
  return g;
}

// Visits every (output, input, weight) offset triple contributing to the
// convolution, vectorized along the innermost axis.
template <typename F>
void for_each_tap(const Geometry& g, F&& f) {
  const std::size_t insz = g.in_size(), outsz = g.out_size(), ksz = g.k_size();
  for (std::size_t co = 0; co < g.cout; ++co) {
    const std::size_t grp = co / g.cout_g;
    for (std::size_t icl = 0; icl < g.cin_g; ++icl) {
      const std::size_t ci = grp * g.cin_g + icl;
      const std::size_t wbase = (co * g.cin_g + icl) * ksz;
      for (std::size_t kz = 0; kz < g.k[0]; ++kz) {
        std::size_t z0, z1;
        g.range(0, kz, z0, z1);
        const auto sz = g.shift(0, kz);
        for (std::size_t ky = 0; ky < g.k[1]; ++ky) {
          std::size_t y0, y1;
          g.range(1, ky, y0, y1);
          const auto sy = g.shift(1, ky);
          for (std::size_t kx = 0; kx < g.k[2]; ++kx) {
            std::size_t x0, x1;
            g.range(2, kx, x0, x1);
            if (x0 >= x1) continue;
            const auto sx = g.shift(2, kx);
            const std::size_t widx = wbase + (kz * g.k[1] + ky) * g.k[2] + kx;
            for (std::size_t oz = z0; oz < z1; ++oz) {
              const std::size_t iz = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oz) + sz);
              for (std::size_t oy = y0; oy < y1; ++oy) {
                const std::size_t iy = static_cast<std::size_t>(static_cast<std::ptrdiff_t>(oy) + sy);
                const std::size_t obase = co * outsz + (oz * g.out[1] + oy) * g.out[2];
                const std::size_t ibase = ci * insz + (iz * g.in[1] + iy) * g.in[2];
                f(obase + x0, ibase + static_cast<std::size_t>(static_cast<std::ptrdiff_t>(x0) + sx), widx, x1 - x0);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv(Var input, Var weight, const ConvSpec& spec) {
  Tape& t = input.tape();
  if (&t != &weight.tape()) throw Error("conv: operands live on different tapes");
  const std::string where = t.next_label("conv");
  auto geo = std::make_shared<Geometry>(make_geometry(input.shape(), weight.shape(), spec, where));
  Shape out_shape{geo->cout};
  for (std::size_t i = 0; i + 1 < input.rank(); ++i) out_shape.push_back(geo->out[3 - (input.rank() - 1) + i]);
  Tensor out(out_shape);
  {
    const auto x = input.value().data();
    const auto w = weight.value().data();
    auto y = out.data();
    for_each_tap(*geo, [&](std::size_t o, std::size_t i, std::size_t k, std::size_t n) {
      const double wk = w[k];
      if (wk == 0.0) return;
      for (std::size_t j = 0; j < n; ++j) y[o + j] += wk * x[i + j];
    });
  }
  const std::size_t idx = input.id(), idw = weight.id();
  return t.record(std::move(out), {idx, idw}, "conv", [geo, idx, idw](Tape& tp, std::size_t self) {
    const auto g = tp.grad_span(self);
    const auto x = tp.value(idx).data();
    const auto w = tp.value(idw).data();
    double* gx = tp.accumulator(idx);
    double* gw = tp.accumulator(idw);
    for_each_tap(*geo, [&](std::size_t o, std::size_t i, std::size_t k, std::size_t n) {
      if (gx) {
        const double wk = w[k];
        for (std::size_t j = 0; j < n; ++j) gx[i + j] += wk * g[o + j];
      }
      if (gw) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += g[o + j] * x[i + j];
        gw[k] += s;
      }
    });
  });
}

namespace {
void require_spatial(Var x, std::size_t r, const char* op) {
  if (x.rank() != r + 1)
    throw ShapeError(x.tape().next_label(op), "expects input rank " + std::to_string(r + 1) + ", got " + shape_str(x.shape()));
}
}  // namespace

Var conv1d(Var input, Var weight, const ConvSpec& spec) {
  require_spatial(input, 1, "conv1d");
  return conv(input, weight, spec);
}
Var conv2d(Var input, Var weight, const ConvSpec& spec) {
  require_spatial(input, 2, "conv2d");
  return conv(input, weight, spec);
}
Var conv3d(Var input, Var weight, const ConvSpec& spec) {
  require_spatial(input, 3, "conv3d");
  return conv(input, weight, spec);
}

}  // namespace macb::ad

#include "macb/param_store.hpp"

#include <cstring>
#include <istream>
#include <ostream>

#include "macb/error.hpp"
#include "macb/rng.hpp"

namespace macb {

const Tensor& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params_) n += t.size();
  return n;
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [k, _] : params_) out.push_back(k);
  return out;
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(total_size());
  for (const auto& [_, t] : params_) flat.insert(flat.end(), t.data().begin(), t.data().end());
  return flat;
}

void ParamStore::unflatten(std::span<const double> flat) {
  if (flat.size() != total_size())
    throw ShapeError("ParamStore::unflatten",
                     "expected " + std::to_string(total_size()) + " values, got " + std::to_string(flat.size()));
  std::size_t off = 0;
  for (auto& [_, t] : params_) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), t.size(), t.data().begin());
    off += t.size();
  }
}

ParamStore ParamStore::zeros_like() const {
  ParamStore z;
  for (const auto& [k, t] : params_) z.set(k, Tensor(t.shape(), 0.0));
  return z;
}

void ParamStore::init_linear(Rng& rng, const std::string& prefix, std::size_t in, std::size_t out, bool bias) {
  set(prefix + ".w", rng.xavier({in, out}, in, out));
  if (bias) set(prefix + ".b", Tensor({out}, 0.0));
}

void ParamStore::init_constant(const std::string& name, Shape shape, double value) {
  set(name, Tensor(std::move(shape), value));
}

void write_params(std::ostream& os, const ParamStore& p) {
  os.write("MPRM", 4);
  io::write_u32(os, static_cast<std::uint32_t>(p.count()));
  for (const auto& [name, t] : p) {
    io::write_string(os, name);
    write_tensor(os, t);
  }
}

ParamStore read_params(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MPRM", 4) != 0) throw IoError("bad parameter-store magic");
  const auto n = io::read_u32(is);
  ParamStore p;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto name = io::read_string(is);
    p.set(name, read_tensor(is));
  }
  return p;
}

ad::Var Bindings::operator[](const std::string& name) const {
  auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("graph references undeclared name '" + name + "'");
  return it->second;
}

Bindings bind_variables(ad::Tape& tape, const ParamStore& params) {
  Bindings b;
  for (const auto& [k, t] : params) b.set(k, tape.variable(t));
  return b;
}

Bindings bind_constants(ad::Tape& tape, const ParamStore& params) {
  Bindings b;
  for (const auto& [k, t] : params) b.set(k, tape.constant(t));
  return b;
}

}  // namespace macb

#pragma once

#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "macb/autodiff.hpp"
#include "macb/tensor.hpp"

namespace macb {

class Rng;

/// Named tensors with deterministic (lexicographic) iteration order. Flattening
/// concatenates parameters in that order.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;

  void set(const std::string& name, Tensor value) { params_[name] = std::move(value); }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  void erase(const std::string& name) { params_.erase(name); }

  std::size_t count() const { return params_.size(); }
  std::size_t total_size() const;
  std::vector<std::string> names() const;

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }
  Map::iterator begin() { return params_.begin(); }
  Map::iterator end() { return params_.end(); }

  std::vector<double> flatten() const;
  // Overwrites every parameter from a flat vector of exactly total_size().
  void unflatten(std::span<const double> flat);
  ParamStore zeros_like() const;

  // Linear layer weights [in, out] (Glorot) and zero bias [out].
  void init_linear(Rng& rng, const std::string& prefix, std::size_t in, std::size_t out, bool bias = true);
  void init_constant(const std::string& name, Shape shape, double value);

  friend bool operator==(const ParamStore& a, const ParamStore& b) { return a.params_ == b.params_; }

 private:
  Map params_;
};

// Binary form: "MPRM", u32 count, then per entry a length-prefixed name and a
// tensor record.
void write_params(std::ostream& os, const ParamStore& p);
ParamStore read_params(std::istream& is);

/// Parameters or inputs placed on a tape, looked up by name.
class Bindings {
 public:
  Bindings() = default;
  void set(const std::string& name, ad::Var v) { vars_[name] = v; }
  ad::Var operator[](const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, ad::Var>& all() const { return vars_; }

 private:
  std::map<std::string, ad::Var> vars_;
};

// Trainable leaves for every parameter.
Bindings bind_variables(ad::Tape& tape, const ParamStore& params);
// Non-differentiable constants.
Bindings bind_constants(ad::Tape& tape, const ParamStore& params);

}  // namespace macb

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "macb/gradcheck.hpp"

// Finite-difference gradient checks for every differentiable operation and
// composite loss, grouped by module.
namespace macb::check {

struct CaseResult {
  std::string module;
  std::string name;
  std::size_t seeds = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  std::string worst;
  bool passed = false;
};

// autodiff, conv, encoders, macl, fusion, mslka, classify, pipeline
std::vector<std::string> modules();

// Runs every case of `module` ("all" for every module) over seeds 0..n-1.
std::vector<CaseResult> run(const std::string& module, std::size_t n_seeds, double tol = 1e-4);

}  // namespace macb::check

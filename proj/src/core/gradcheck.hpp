#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "core/rng.hpp"
#include "core/tape.hpp"

namespace colidr {

// Scalar-valued function of a list of input tensors, rebuilt on a fresh tape
// each call so finite differences see a pure function.
using TensorFn = std::function<Value(Tape&, const std::vector<Value>&)>;

struct FiniteDiffOptions {
  double h = 1e-4;
  // When set, only this many coordinates per input are probed (seeded
  // choice); the analytic gradient is still computed in full.
  std::optional<int> max_coords_per_input;
  std::uint64_t coord_seed = 0x5eed;
  // Tolerance the caller intends to certify. The check requires
  // perturbations away from ReLU/abs kinks and can only adjudicate
  // coordinates where its own numeric error (Richardson estimate from the
  // h and h/2 slopes; O(1) when a kink is straddled, O(h^2) otherwise) is
  // below half this budget. Coordinates the oracle cannot resolve are
  // skipped and counted, never scored. A wrong analytic gradient at a
  // resolvable coordinate is still caught: the budget scales with the
  // analytic magnitude, so tiny analytic vs large true slope fails loudly.
  double target_tolerance = 1e-4;
};

struct FiniteDiffReport {
  double max_rel_err = 0.0;
  int worst_input = -1;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped_unresolvable = 0;
};

// Central-difference check of reverse-mode gradients:
//   max over coords of |analytic - (f(x+h e_i) - f(x-h e_i)) / 2h|
//                      / (|analytic| + 1e-8)
FiniteDiffReport finite_diff_check(const TensorFn& fn, std::vector<Tensor> inputs,
                                   const FiniteDiffOptions& opts = {});

// Same check against module Parameters: fn builds the loss from the current
// parameter values; numeric probes perturb Parameter::value in place and
// restore it. Parameters are left with zeroed gradients.
using ParamFn = std::function<Value(Tape&)>;
FiniteDiffReport finite_diff_check_params(const ParamFn& fn,
                                          const std::vector<Parameter*>& params,
                                          const FiniteDiffOptions& opts = {});

}  // namespace colidr

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "wav2sleep/tensor.hpp"

namespace wav2sleep {

struct GradientError {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  // Coordinates within h of a non-differentiable point (max-pool ties): the
  // central difference misses the analytic gradient, the one-sided quotients
  // disagree, and one of them matches. Excluded from max_relative_error.
  std::size_t kinks = 0;
};

struct GradcheckResult {
  std::string name;
  std::size_t trials = 0;
  std::size_t coordinates = 0;
  std::size_t kinks = 0;
  double max_relative_error = 0.0;
  double tolerance = 1e-4;
  // At most one coordinate in a thousand may sit on a kink.
  bool passed() const { return max_relative_error < tolerance && kinks * 1000 <= coordinates; }
};

// Compares backward() against central differences with step h over every
// coordinate of every input. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-3). `loss` must rebuild
// the graph from the current input values on each call.
GradientError gradient_error(const std::function<Tensor<double>()>& loss,
                             std::vector<Tensor<double>> inputs, double tolerance = 1e-4,
                             double h = 1e-5);

// Seeded random trials for every differentiable primitive. With inject_fault,
// an extra primitive whose backward is deliberately wrong is included.
std::vector<GradcheckResult> check_primitives(std::size_t trials, std::uint64_t seed,
                                              bool inject_fault = false);

// End-to-end check of the tiny model (T=8, k=16, feature_dim=8) with a mixed
// modality batch, over all parameters and inputs.
GradcheckResult check_tiny_model(std::uint64_t seed);

}  // namespace wav2sleep

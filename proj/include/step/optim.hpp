#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <vector>

#include "step/tensor.hpp"

namespace step {

struct AdamState {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::int64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;

  // Zeroed moments shaped like params.
  static AdamState for_parameters(std::span<Parameter* const> params, double learning_rate);
};

// One bias-corrected Adam update, then zeroes every gradient. Throws if any
// gradient entry is non-finite (naming the parameter) before touching values.
void adam_step(std::span<Parameter* const> params, AdamState& state);

// Rescales all gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_grad_norm(std::span<Parameter* const> params, double max_norm);

void zero_grads(std::span<Parameter* const> params);

struct GradCheckOptions {
  double step = 1e-4;
  std::size_t samples = 100;  // coordinates drawn uniformly; all of them if fewer exist
  std::uint64_t seed = 0;
  double floor = 1e-8;  // lower bound of the relative-error denominator
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  double worst_analytic = 0.0;  // the pair behind max_relative_error
  double worst_numeric = 0.0;
};

// Compares analytic gradients to central differences.
// loss(true) must evaluate the loss and accumulate gradients into the params;
// loss(false) must only evaluate it. Relative error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, options.floor).
GradCheckResult grad_check(const std::function<double(bool with_gradient)>& loss,
                           std::span<Parameter* const> params, const GradCheckOptions& options = {});

// Parameter/optimizer serialization used by model checkpoints. Reading checks
// names and shapes against the destination and throws on any mismatch.
void write_parameters(std::ostream& out, std::span<Parameter* const> params);
void read_parameters(std::istream& in, std::span<Parameter* const> params);
void write_adam(std::ostream& out, const AdamState& state);
AdamState read_adam(std::istream& in, std::span<Parameter* const> params);

}  // namespace step

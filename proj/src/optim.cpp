#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>

#include "step/binary_io.hpp"
#include "step/error.hpp"
#include "step/optim.hpp"
#include "step/rng.hpp"

namespace step {

AdamState AdamState::for_parameters(std::span<Parameter* const> params, double learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  for (const Parameter* p : params) {
    s.m.emplace_back(p->value.rows, p->value.cols);
    s.v.emplace_back(p->value.rows, p->value.cols);
  }
  return s;
}

void zero_grads(std::span<Parameter* const> params) {
  for (Parameter* p : params) p->zero_grad();
}

void adam_step(std::span<Parameter* const> params, AdamState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw Error("adam_step: optimizer state does not match parameter list");
  }
  for (const Parameter* p : params) {
    if (!p->grad.all_finite()) throw Error("adam_step: non-finite gradient in parameter '" + p->name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(state.beta1, t);
  const double bc2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    auto& m = state.m[i].data;
    auto& v = state.v[i].data;
    auto& w = p.value.data;
    const auto& g = p.grad.data;
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon);
    }
    p.zero_grad();
  }
}

double clip_grad_norm(std::span<Parameter* const> params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    for (double g : p->grad.data) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      for (double& g : p->grad.data) g *= s;
    }
  }
  return norm;
}

GradCheckResult grad_check(const std::function<double(bool)>& loss, std::span<Parameter* const> params,
                           const GradCheckOptions& options) {
  zero_grads(params);
  loss(true);

  // (parameter index, flat coordinate)
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  std::size_t total = 0;
  for (const Parameter* p : params) total += p->value.size();
  if (total <= options.samples) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i]->value.size(); ++j) coords.emplace_back(i, j);
    }
  } else {
    Rng rng(derive_seed(options.seed, {0x67636b}));
    for (std::size_t s = 0; s < options.samples; ++s) {
      std::size_t flat = rng.below(total);
      std::size_t i = 0;
      while (flat >= params[i]->value.size()) flat -= params[i++]->value.size();
      coords.emplace_back(i, flat);
    }
  }

  GradCheckResult result;
  for (auto [i, j] : coords) {
    double& w = params[i]->value.data[j];
    const double saved = w;
    w = saved + options.step;
    const double up = loss(false);
    w = saved - options.step;
    const double down = loss(false);
    w = saved;
    const double numeric = (up - down) / (2.0 * options.step);
    const double analytic = params[i]->grad.data[j];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), options.floor});
    const double rel = std::abs(analytic - numeric) / denom;
    if (rel >= result.max_relative_error) {
      result.max_relative_error = rel;
      result.worst_analytic = analytic;
      result.worst_numeric = numeric;
    }
    ++result.coordinates;
  }
  zero_grads(params);
  return result;
}

namespace {
constexpr std::uint32_t kParamTag = 0x4d524150;  // "PARM"
constexpr std::uint32_t kAdamTag = 0x4d414441;   // "ADAM"

void write_matrix(BinaryWriter& w, const Matrix& m) {
  w.put<std::uint64_t>(m.rows);
  w.put<std::uint64_t>(m.cols);
  w.put_array(std::span<const double>(m.data));
}

void read_matrix_into(BinaryReader& r, Matrix& dst, const std::string& name) {
  const auto rows = r.get<std::uint64_t>();
  const auto cols = r.get<std::uint64_t>();
  if (rows != dst.rows || cols != dst.cols) {
    throw Error("checkpoint: shape mismatch for '" + name + "': file (" + std::to_string(rows) + "x" +
                std::to_string(cols) + ") vs model " + shape_string(dst));
  }
  r.get_array(std::span<double>(dst.data));
}
}  // namespace

void write_parameters(std::ostream& out, std::span<Parameter* const> params) {
  BinaryWriter w(out);
  w.put<std::uint32_t>(kParamTag);
  w.put<std::uint64_t>(params.size());
  for (const Parameter* p : params) {
    w.put_string(p->name);
    write_matrix(w, p->value);
  }
  w.check("parameters");
}

void read_parameters(std::istream& in, std::span<Parameter* const> params) {
  BinaryReader r(in, "checkpoint");
  if (r.get<std::uint32_t>() != kParamTag) throw Error("checkpoint: missing parameter block");
  const auto n = r.get<std::uint64_t>();
  if (n != params.size()) {
    throw Error("checkpoint: parameter count mismatch: file " + std::to_string(n) + " vs model " +
                std::to_string(params.size()));
  }
  for (Parameter* p : params) {
    const std::string name = r.get_string();
    if (name != p->name) throw Error("checkpoint: parameter name mismatch: file '" + name + "' vs model '" + p->name + "'");
    read_matrix_into(r, p->value, name);
    if (!p->value.all_finite()) throw Error("checkpoint: non-finite values in '" + name + "'");
    p->zero_grad();
  }
}

void write_adam(std::ostream& out, const AdamState& s) {
  BinaryWriter w(out);
  w.put<std::uint32_t>(kAdamTag);
  w.put<double>(s.learning_rate);
  w.put<double>(s.beta1);
  w.put<double>(s.beta2);
  w.put<double>(s.epsilon);
  w.put<std::int64_t>(s.step);
  w.put<std::uint64_t>(s.m.size());
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    write_matrix(w, s.m[i]);
    write_matrix(w, s.v[i]);
  }
  w.check("optimizer state");
}

AdamState read_adam(std::istream& in, std::span<Parameter* const> params) {
  BinaryReader r(in, "checkpoint");
  if (r.get<std::uint32_t>() != kAdamTag) throw Error("checkpoint: missing optimizer block");
  AdamState s;
  s.learning_rate = r.get<double>();
  s.beta1 = r.get<double>();
  s.beta2 = r.get<double>();
  s.epsilon = r.get<double>();
  s.step = r.get<std::int64_t>();
  const auto n = r.get<std::uint64_t>();
  if (n != params.size()) throw Error("checkpoint: optimizer state count mismatch");
  for (const Parameter* p : params) {
    s.m.emplace_back(p->value.rows, p->value.cols);
    s.v.emplace_back(p->value.rows, p->value.cols);
    read_matrix_into(r, s.m.back(), p->name + ".m");
    read_matrix_into(r, s.v.back(), p->name + ".v");
  }
  return s;
}

}  // namespace step

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <vector>

#include "duformer/rng.hpp"
#include "duformer/tensor.hpp"

namespace duformer {

struct GradCheckOptions {
  double eps = 1e-5;
  // Coordinates checked per input tensor; -1 checks all of them.
  int64_t max_coords_per_input = -1;
  uint64_t seed = 0x6866a1u;
};

// Central-difference gradient check, 64-bit only. `f` must be a pure function
// of the listed inputs (re-evaluated many times, reading the tensors in
// place), returning a scalar. Returns the maximum relative error
// |analytic - fd| / max(|analytic|, |fd|, 1e-8) over all checked coordinates.
inline double grad_check(const std::function<Tensor<double>()>& f,
                         const std::vector<Tensor<double>>& inputs, GradCheckOptions opt = {}) {
  if (!(opt.eps >= 1e-7 && opt.eps <= 1e-4))
    throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-4]");
  for (const auto& in : inputs)
    if (!in.requires_grad())
      throw std::invalid_argument("grad_check: all checked inputs must require grad");

  for (const auto& in : inputs) in.node()->grad.clear();
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tape<double>::Scope scope(tape);
    Tensor<double> loss = f();
    tape.backward(loss);
    for (const auto& in : inputs) analytic.push_back(in.grad());
  }

  SplitMix64 rng(opt.seed);
  double max_rel = 0.0;
  for (size_t t = 0; t < inputs.size(); ++t) {
    auto& data = inputs[t].node()->data;
    const int64_t n = static_cast<int64_t>(data.size());
    std::vector<int64_t> coords;
    if (opt.max_coords_per_input < 0 || opt.max_coords_per_input >= n) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      for (int64_t i = 0; i < opt.max_coords_per_input; ++i)
        coords.push_back(rng.next_int(0, n - 1));
    }
    for (int64_t c : coords) {
      const double x0 = data[static_cast<size_t>(c)];
      data[static_cast<size_t>(c)] = x0 + opt.eps;
      const double fp = f().item();
      data[static_cast<size_t>(c)] = x0 - opt.eps;
      const double fm = f().item();
      data[static_cast<size_t>(c)] = x0;
      const double fd = (fp - fm) / (2.0 * opt.eps);
      const double a = analytic[t][static_cast<size_t>(c)];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace duformer

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "mmsd/tensor.hpp"

namespace mmsd {

// Builds a scalar loss on the given tape. Must be deterministic (no dropout)
// so repeated evaluations are comparable.
using ScalarFn = std::function<Tensor(Tape&)>;

struct GradCheckEntry {
  std::string tensor;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  GradCheckEntry worst;
  std::size_t entries_checked = 0;
  double kink_gap = 0.0;  // from the analytic forward pass

  bool ok(double tol) const { return max_rel_error < tol; }
  std::string describe() const {
    return "max rel error " + std::to_string(max_rel_error) + " at " + worst.tensor + "[" +
           std::to_string(worst.index) + "] (ad=" + std::to_string(worst.analytic) +
           ", fd=" + std::to_string(worst.numeric) + ")";
  }
};

// Central-difference check of tape gradients: (f(x+h) - f(x-h)) / 2h against
// the recorded backward pass, entry by entry. Large tensors are subsampled
// (at least `min_entries` random entries per tensor). Double precision only.
inline GradCheckReport finite_diff_check(const ScalarFn& f, const std::vector<std::pair<std::string, Tensor>>& params,
                                         double step = 1e-5, std::size_t min_entries = 50,
                                         std::uint64_t sample_seed = 0) {
  for (auto& [name, t] : params) {
    Tensor(t).set_requires_grad(true);
    Tensor(t).zero_grad();
  }

  Tape tape;
  Tensor loss = f(tape);
  if (loss.numel() != 1) throw ContractError("finite_diff_check requires a scalar function");
  tape.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [name, t] : params) analytic.emplace_back(t.grad().begin(), t.grad().end());

  auto eval = [&]() {
    Tape t2;
    t2.set_grad_enabled(false);
    return f(t2)[0];
  };

  GradCheckReport report;
  report.kink_gap = tape.kink_gap();
  std::mt19937_64 rng(sample_seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor t = params[p].second;
    std::vector<std::size_t> idx(t.numel());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > min_entries) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(min_entries);
    }
    for (std::size_t i : idx) {
      double saved = t.values()[i];
      t.mutable_values()[i] = saved + step;
      double up = eval();
      t.mutable_values()[i] = saved - step;
      double down = eval();
      t.mutable_values()[i] = saved;
      double fd = (up - down) / (2.0 * step);
      double ad = analytic[p][i];
      // Below the 1e-8 floor both sides are zero at measurement resolution:
      // central differences of an O(1) function carry ~|f|*eps/2h of noise,
      // so an exact-zero gradient cannot be certified any tighter.
      double rel = (std::abs(ad) <= 1e-8 && std::abs(fd) <= 1e-8)
                       ? 0.0
                       : std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-8});
      ++report.entries_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {params[p].first, i, ad, fd, rel};
      }
    }
  }
  return report;
}

// Runs the forward pass once without gradients and reports the distance to
// the nearest relu/max/clamp kink, so callers can resample inputs whose
// finite differences would straddle a non-smooth point.
inline double probe_kink_gap(const ScalarFn& f) {
  Tape tape;
  tape.set_grad_enabled(false);
  f(tape);
  return tape.kink_gap();
}

}  // namespace mmsd

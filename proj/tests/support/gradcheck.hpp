#pragma once
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "derain/autodiff.hpp"
#include "derain/rng.hpp"

// Numerical gradient verification. The function under test maps a set of
// leaves to a scalar; analytic gradients from backward() are compared against
// central differences in double precision.

namespace gradcheck {

using derain::Rng;
using derain::nn::Shape;
using derain::nn::Tensor;
using derain::nn::Var;

struct Result {
  double max_rel_err = 0.0;
  int checked = 0;
  int skipped = 0;  // probes whose bracket straddles an activation kink
  std::string worst;  // "leaf[k] idx=i analytic=... numeric=..."

  // A pathological gradient cannot hide behind mass skipping: callers assert
  // that most probes were actually validated.
  double skip_fraction() const {
    const int total = checked + skipped;
    return total == 0 ? 0.0 : double(skipped) / double(total);
  }
};

inline double rel_err(double a, double n) {
  const double denom = std::max({std::abs(a), std::abs(n), 1e-6});
  return std::abs(a - n) / denom;
}

// leaves are modified in place while probing, then restored.
//
// Central differences assume a smooth bracket; a piecewise-linear activation
// whose break lands inside the bracket corrupts the estimate by O(step) no
// matter how correct the analytic gradient is, and a probe through a shared
// bias can sweep hundreds of pre-activations past their breaks at once,
// producing error plateaus that span whole decades of step size. Each probe
// is therefore taken at h/8 and h/64: the 8x scale ratio means kink
// contamination cannot stay coincident across both. Agreement certifies the
// bracket as smooth and the Richardson combination serves as the oracle;
// disagreement skips the probe (counted in `skipped`).
inline Result check(std::vector<Var<double>>& leaves,
                    const std::function<Var<double>()>& fn, double h = 1e-3,
                    int max_probes_per_leaf = 0) {
  Result r;
  Var<double> out = fn();
  derain::nn::backward(out);
  std::vector<Tensor<double>> grads;
  grads.reserve(leaves.size());
  for (auto& l : leaves) grads.push_back(l.grad());

  auto probe = [&](std::vector<double>& data, int i, double step) {
    const double saved = data[size_t(i)];
    data[size_t(i)] = saved + step;
    const double fp = fn().value().data[0];
    data[size_t(i)] = saved - step;
    const double fm = fn().value().data[0];
    data[size_t(i)] = saved;
    return (fp - fm) / (2.0 * step);
  };

  Rng pick(20260823);
  for (size_t k = 0; k < leaves.size(); ++k) {
    auto& data = leaves[k].node()->value.data;
    const int n = int(data.size());
    std::vector<int> idx(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
    if (max_probes_per_leaf > 0 && n > max_probes_per_leaf) {
      pick.shuffle(idx);
      idx.resize(size_t(max_probes_per_leaf));
    }
    for (int i : idx) {
      const double mid = probe(data, i, h / 8);
      const double fine = probe(data, i, h / 64);
      if (rel_err(mid, fine) > 1e-4) {
        ++r.skipped;
        continue;
      }
      const double numeric = (64.0 * fine - mid) / 63.0;
      const double analytic = grads[k].data[size_t(i)];
      const double e = rel_err(analytic, numeric);
      ++r.checked;
      if (e > r.max_rel_err) {
        r.max_rel_err = e;
        r.worst = "leaf[" + std::to_string(k) + "] idx=" + std::to_string(i) +
                  " analytic=" + std::to_string(analytic) +
                  " numeric=" + std::to_string(numeric);
      }
    }
  }
  return r;
}

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(s);
  for (auto& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

}  // namespace gradcheck

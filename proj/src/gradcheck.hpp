#pragma once

#include <functional>

#include "model.hpp"

namespace unext {

// Central finite differences against the tape gradient, all in 64-bit.
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         Tensor<double> x, double eps = 1e-4) {
  x.set_requires_grad(true);
  std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
  {
    Tape<double> tape;
    Tensor<double> y = f(x);
    if (y.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
    GradMap<double> grads = tape.backward(y);
    auto it = grads.find(x.id());
    if (it != grads.end()) analytic = it->second.flatten();
  }
  x.set_requires_grad(false);
  NoTape<double> guard;
  double worst = 0.0;
  for (int64_t i = 0; i < x.numel(); ++i) {
    const double orig = x.data()[i];
    x.data()[i] = orig + eps;
    const double fp = f(x).item();
    x.data()[i] = orig - eps;
    const double fm = f(x).item();
    x.data()[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[static_cast<size_t>(i)];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    worst = std::max(worst, err);
  }
  return worst;
}

// Same check against a scalar function of ambient state (a model forward),
// finite-differencing a sampled subset of coordinates of each listed tensor.
inline double grad_check_params(const std::function<Tensor<double>()>& f,
                                const std::vector<Tensor<double>*>& tensors,
                                int64_t coords_per_tensor, double eps, uint64_t seed) {
  std::unordered_map<uint64_t, std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> y = f();
    if (y.numel() != 1) throw ContractError("grad_check_params: f must be scalar-valued");
    GradMap<double> grads = tape.backward(y);
    for (Tensor<double>* t : tensors) {
      auto it = grads.find(t->id());
      analytic[t->id()] = it != grads.end()
                              ? it->second.flatten()
                              : std::vector<double>(static_cast<size_t>(t->numel()), 0.0);
    }
  }
  NoTape<double> guard;
  Rng rng(Rng::mix(seed, 0x6664ull));
  double worst = 0.0;
  for (Tensor<double>* t : tensors) {
    const auto& a = analytic[t->id()];
    const int64_t n = t->numel();
    for (int64_t k = 0; k < std::min(coords_per_tensor, n); ++k) {
      const int64_t i = coords_per_tensor >= n ? k : rng.uniform_int(0, n - 1);
      const double orig = t->data()[i];
      t->data()[i] = orig + eps;
      const double fp = f().item();
      t->data()[i] = orig - eps;
      const double fm = f().item();
      t->data()[i] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double av = a[static_cast<size_t>(i)];
      worst = std::max(worst, std::abs(av - numeric) / std::max(1.0, std::abs(av)));
    }
  }
  return worst;
}

// Named checks covering every differentiable operation plus the composite
// token-MLP block and a small end-to-end model; drives the CLI `gradcheck`
// subcommand and the verification suite.
struct OpCheck {
  std::string name;
  double max_err = 0.0;
  double tolerance = 1e-3;
  bool pass = false;
};

std::vector<std::string> gradcheck_op_names();
OpCheck run_gradcheck_op(const std::string& name, int seeds);
std::vector<OpCheck> run_gradcheck_suite(const std::string& only_op, int seeds);

}  // namespace unext

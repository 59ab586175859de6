#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "safe/tensor.hpp"

namespace testutil {

// central finite difference of f() w.r.t. element k of param
inline double fd_grad(const std::function<safe::Tensor()>& f, safe::Tensor& param, size_t k,
                      double h = 1e-5) {
  auto& d = param.mutable_data();
  double orig = d[k];
  d[k] = orig + h;
  double up = f().item();
  d[k] = orig - h;
  double dn = f().item();
  d[k] = orig;
  return (up - dn) / (2.0 * h);
}

inline double rel_err(double a, double b, double floor = 1e-2) {
  return std::abs(a - b) / std::max({floor, std::abs(a), std::abs(b)});
}

// checks every element of every listed parameter against finite differences
inline double max_grad_rel_err(const std::function<safe::Tensor()>& f,
                               std::vector<safe::Tensor*> params, double h = 1e-5) {
  for (safe::Tensor* p : params) {
    p->set_requires_grad(true);
    p->zero_grad();
  }
  safe::Tensor loss = f();
  safe::backward(loss);
  double worst = 0.0;
  for (safe::Tensor* p : params) {
    std::vector<double> autodiff = p->grad();
    for (size_t k = 0; k < autodiff.size(); ++k) {
      worst = std::max(worst, rel_err(autodiff[k], fd_grad(f, *p, k, h)));
    }
  }
  for (safe::Tensor* p : params) {
    p->zero_grad();
    p->set_requires_grad(false);
  }
  return worst;
}

inline bool close(double a, double b, double tol) { return std::abs(a - b) <= tol; }

}  // namespace testutil

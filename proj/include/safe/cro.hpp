#pragma once

#include <stdexcept>
#include <vector>

#include "safe/data.hpp"
#include "safe/model.hpp"
#include "safe/tensor.hpp"

namespace safe {

/// Raised when a gradient measurement cannot produce class ratios (zero
/// denominator); the caller falls back to the previous round's values.
struct DegenerateMeasurementError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// values[p*J + q] = L1 norm of the head-row-q gradient induced by class-p
/// monitoring samples.
struct GradMatrix {
  int classes = 0;
  std::vector<double> values;

  double at(int p, int q) const { return values[static_cast<size_t>(p) * classes + q]; }
};

struct CroConfig {
  double beta = 1.0;
};

/// Measures per-class head-weight gradient norms on the monitoring set.
/// The model is left bit-identical; only gradient buffers are touched.
GradMatrix measure_class_gradients(ModelParams& global_model, const SesSet& ses,
                                   const AceContextMatrix* context);

/// CR_p = g[p][p] / sum_{i != p} g[i][p]   (throws DegenerateMeasurementError
/// on a zero denominator)
std::vector<double> compute_cr(const GradMatrix& g);

/// Min-max normalization; an all-equal input maps to all zeros.
std::vector<double> normalize_cr(const std::vector<double>& cr);

/// mean over samples of -(eps_plus * beta * cr_tilde[y] + 1) * log(probs[y])
Tensor cr_weighted_loss(const Tensor& probs, const std::vector<int>& labels,
                        const std::vector<double>& cr_tilde, double beta, double eps_plus);

}  // namespace safe

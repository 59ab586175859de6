#pragma once

#include <vector>

#include "safe/model.hpp"
#include "safe/tensor.hpp"

namespace safe {

struct DivergenceReport {
  std::vector<double> per_stage;
  double mean = 0.0;
};

/// Linear centered kernel alignment between two activation matrices on the
/// same samples. Columns are mean-centered first; the result lies in [0,1].
double linear_cka(const Tensor& a_global, const Tensor& a_client);

DivergenceReport multi_scale_divergence(const ActivationCapture& cap_global,
                                        const ActivationCapture& cap_client);

/// Eq-style divergence-weighted blend of the backbone parameters:
/// client coefficient = (1 - eps_minus) * (1 - d_cka) / 2, global takes the
/// rest; writes the blend into `client`.
void fau_update(ModelParams& client, const ModelParams& global_model, double d_cka,
                double eps_minus);

}  // namespace safe

#include "safe/fau.hpp"

#include <cmath>
#include <stdexcept>

namespace safe {

namespace {

// column mean-centering into a plain buffer
std::vector<double> center_columns(const Tensor& m) {
  int r = m.dim(0), c = m.dim(1);
  std::vector<double> out(m.data());
  for (int j = 0; j < c; ++j) {
    double mean = 0.0;
    for (int i = 0; i < r; ++i) mean += out[static_cast<size_t>(i) * c + j];
    mean /= r;
    for (int i = 0; i < r; ++i) out[static_cast<size_t>(i) * c + j] -= mean;
  }
  return out;
}

double frob_sq_cross(const std::vector<double>& a, int r, int ca, const std::vector<double>& b,
                     int cb) {
  // || A^T B ||_F^2 without materializing the r x r kernel
  double total = 0.0;
  for (int i = 0; i < ca; ++i) {
    for (int j = 0; j < cb; ++j) {
      double dot = 0.0;
      for (int k = 0; k < r; ++k) {
        dot += a[static_cast<size_t>(k) * ca + i] * b[static_cast<size_t>(k) * cb + j];
      }
      total += dot * dot;
    }
  }
  return total;
}

}  // namespace

double linear_cka(const Tensor& a_global, const Tensor& a_client) {
  if (a_global.shape().size() != 2 || a_client.shape().size() != 2) {
    throw std::invalid_argument("linear_cka: inputs must be 2-D");
  }
  if (a_global.dim(0) != a_client.dim(0)) {
    throw std::invalid_argument("linear_cka: row counts differ");
  }
  int r = a_global.dim(0);
  if (r < 2) throw std::invalid_argument("linear_cka: need >= 2 rows");

  std::vector<double> g = center_columns(a_global);
  std::vector<double> c = center_columns(a_client);
  int cg = a_global.dim(1), cc = a_client.dim(1);

  double cross = frob_sq_cross(c, r, cc, g, cg);
  double norm_g = std::sqrt(frob_sq_cross(g, r, cg, g, cg));
  double norm_c = std::sqrt(frob_sq_cross(c, r, cc, c, cc));
  if (norm_g == 0.0 || norm_c == 0.0) {
    throw std::runtime_error("linear_cka: centered matrix is all zero, similarity undefined");
  }
  double v = cross / (norm_g * norm_c);
  // clamp numerical noise
  if (v < 0.0 && v > -1e-9) v = 0.0;
  if (v > 1.0 && v < 1.0 + 1e-9) v = 1.0;
  if (v < 0.0 || v > 1.0) throw std::runtime_error("linear_cka: value escaped [0,1]");
  return v;
}

DivergenceReport multi_scale_divergence(const ActivationCapture& cap_global,
                                        const ActivationCapture& cap_client) {
  if (cap_global.stages.size() != cap_client.stages.size()) {
    throw std::invalid_argument("multi_scale_divergence: stage count mismatch");
  }
  DivergenceReport rep;
  double total = 0.0;
  for (size_t s = 0; s < cap_global.stages.size(); ++s) {
    double v = linear_cka(cap_global.stages[s], cap_client.stages[s]);
    rep.per_stage.push_back(v);
    total += v;
  }
  rep.mean = total / static_cast<double>(cap_global.stages.size());
  return rep;
}

void fau_update(ModelParams& client, const ModelParams& global_model, double d_cka,
                double eps_minus) {
  if (d_cka < 0.0 || d_cka > 1.0) throw std::invalid_argument("fau_update: d_cka out of [0,1]");
  if (eps_minus < 0.0 || eps_minus > 1.0) {
    throw std::invalid_argument("fau_update: eps_minus out of [0,1]");
  }
  double client_coeff = 0.5 * (1.0 - eps_minus) * (1.0 - d_cka);
  double global_coeff = 1.0 - client_coeff;
  if (client_coeff < 0.0 || client_coeff > 0.5) {
    throw std::runtime_error("fau_update: coefficient escaped its range");
  }

  std::vector<const Tensor*> global_side;
  for_each_backbone_param(const_cast<ModelParams&>(global_model),
                          [&](const std::string&, Tensor& t) { global_side.push_back(&t); });
  size_t i = 0;
  for_each_backbone_param(client, [&](const std::string& name, Tensor& t) {
    const Tensor& g = *global_side[i++];
    if (g.shape() != t.shape()) {
      throw std::invalid_argument("fau_update: shape mismatch at " + name);
    }
    auto& dst = t.mutable_data();
    const auto& src = g.data();
    for (size_t k = 0; k < dst.size(); ++k) {
      dst[k] = client_coeff * dst[k] + global_coeff * src[k];
    }
  });
}

}  // namespace safe

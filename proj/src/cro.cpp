#include "safe/cro.hpp"

#include <algorithm>
#include <cmath>

namespace safe {

GradMatrix measure_class_gradients(ModelParams& global_model, const SesSet& ses,
                                   const AceContextMatrix* context) {
  int j = global_model.cfg.num_classes;
  std::vector<std::vector<int>> per_class(static_cast<size_t>(j));
  for (int i = 0; i < ses.data.size(); ++i) {
    per_class[static_cast<size_t>(ses.data.labels[static_cast<size_t>(i)])].push_back(i);
  }
  for (int c = 0; c < j; ++c) {
    if (per_class[static_cast<size_t>(c)].empty()) {
      throw std::invalid_argument("measure_class_gradients: class missing from SES");
    }
  }

  // only the head weight needs a gradient; everything else stays frozen
  set_param_grad_tracking(global_model, false);
  global_model.head_weight.set_requires_grad(true);

  GradMatrix g;
  g.classes = j;
  g.values.assign(static_cast<size_t>(j) * j, 0.0);
  int d = global_model.cfg.feature_dim();
  std::mt19937_64 rng(0);

  for (int p = 0; p < j; ++p) {
    Dataset batch = ses.data.subset(per_class[static_cast<size_t>(p)]);
    global_model.head_weight.zero_grad();
    ForwardResult fr = forward(global_model, batch.images, context, 1.0, false, rng);
    Tensor loss = cross_entropy(softmax(fr.logits), batch.labels);
    backward(loss);
    const auto& grad = global_model.head_weight.grad();
    for (int q = 0; q < j; ++q) {
      double l1 = 0.0;
      for (int k = 0; k < d; ++k) l1 += std::abs(grad[static_cast<size_t>(q) * d + k]);
      g.values[static_cast<size_t>(p) * j + q] = l1;
    }
  }
  global_model.head_weight.zero_grad();
  global_model.head_weight.set_requires_grad(false);
  return g;
}

std::vector<double> compute_cr(const GradMatrix& g) {
  int j = g.classes;
  std::vector<double> cr(static_cast<size_t>(j));
  for (int p = 0; p < j; ++p) {
    double denom = 0.0;
    for (int i = 0; i < j; ++i) {
      if (i != p) denom += g.at(i, p);
    }
    if (denom <= 0.0) {
      throw DegenerateMeasurementError("compute_cr: zero off-class gradient for class " +
                                       std::to_string(p));
    }
    cr[static_cast<size_t>(p)] = g.at(p, p) / denom;
  }
  return cr;
}

std::vector<double> normalize_cr(const std::vector<double>& cr) {
  if (cr.size() < 2) throw std::invalid_argument("normalize_cr: need >= 2 classes");
  double lo = *std::min_element(cr.begin(), cr.end());
  double hi = *std::max_element(cr.begin(), cr.end());
  std::vector<double> out(cr.size(), 0.0);
  if (hi > lo) {
    for (size_t i = 0; i < cr.size(); ++i) out[i] = (cr[i] - lo) / (hi - lo);
  }
  return out;
}

Tensor cr_weighted_loss(const Tensor& probs, const std::vector<int>& labels,
                        const std::vector<double>& cr_tilde, double beta, double eps_plus) {
  if (eps_plus < 0.0 || eps_plus > 1.0) {
    throw std::invalid_argument("cr_weighted_loss: eps_plus must be in [0,1]");
  }
  std::vector<double> weights(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= static_cast<int>(cr_tilde.size())) {
      throw std::invalid_argument("cr_weighted_loss: label out of range");
    }
    weights[i] = eps_plus * beta * cr_tilde[static_cast<size_t>(y)] + 1.0;
  }
  return nll_weighted(probs, labels, weights);
}

}  // namespace safe

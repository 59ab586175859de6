#include "safe/ace.hpp"

#include <cmath>
#include <stdexcept>

namespace safe {

double anneal_tau(int round, int total_rounds, const GumbelConfig& cfg) {
  if (total_rounds < 1 || round < 0 || round > total_rounds) {
    throw std::invalid_argument("anneal_tau: round out of range");
  }
  if (cfg.tau_end <= 0.0) throw std::invalid_argument("anneal_tau: tau_end must be positive");
  double t = static_cast<double>(round) / total_rounds;
  double blend = 0.5 * (1.0 + std::cos(M_PI * t));
  return cfg.tau_end + (cfg.tau_start - cfg.tau_end) * blend;
}

std::pair<Tensor, Tensor> gumbel_mask(const Tensor& x_c, double tau, bool training,
                                      std::mt19937_64& rng) {
  if (tau <= 0.0) throw std::invalid_argument("gumbel_mask: tau must be positive");
  if (!training) {
    Tensor soft = sigmoid(x_c);
    std::vector<double> hard(x_c.data().size());
    for (size_t i = 0; i < hard.size(); ++i) hard[i] = x_c.data()[i] >= 0.0 ? 1.0 : 0.0;
    return {Tensor::from_data(x_c.shape(), std::move(hard)), soft};
  }
  std::uniform_real_distribution<double> uni(1e-12, 1.0 - 1e-12);
  std::vector<double> noise(x_c.data().size());
  for (double& v : noise) {
    double u = uni(rng);
    v = std::log(u) - std::log1p(-u);  // standard logistic
  }
  Tensor eps = Tensor::from_data(x_c.shape(), std::move(noise));
  Tensor soft = sigmoid(scale(add(x_c, eps), 1.0 / tau));
  Tensor hard = straight_through(soft);
  return {hard, soft};
}

Tensor compose_context_rows(const Tensor& stage_matrix, const Tensor& own_embedding,
                            int owner_id) {
  int k = stage_matrix.dim(0);
  if (owner_id < 0 || owner_id >= k) {
    throw std::invalid_argument("compose_context_rows: owner out of range");
  }
  if (own_embedding.shape() != Shape{1, stage_matrix.dim(1)}) {
    throw std::invalid_argument("compose_context_rows: embedding dimension mismatch");
  }
  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(k));
  Tensor frozen = stage_matrix.detached();
  for (int i = 0; i < k; ++i) {
    rows.push_back(i == owner_id ? own_embedding : row(frozen, i));
  }
  return vstack(rows);
}

Tensor self_gate(const Tensor& mask, const Tensor& soft, const Tensor& x) {
  Tensor gain = add_scalar(mul(mask, sigmoid(soft)), 1.0);
  return mul_broadcast_channel(gain, x);
}

Tensor ace_forward(const Tensor& stage_features, const AceStageParams& params,
                   const Tensor& context_matrix, int owner_id, double tau, bool training,
                   std::mt19937_64& rng) {
  int n = stage_features.dim(0), h = stage_features.dim(2), w = stage_features.dim(3);
  int k = context_matrix.dim(0);
  int d = params.pointwise.dim(0);
  if (context_matrix.dim(1) != d) {
    throw std::invalid_argument("ace_forward: context dimension mismatch");
  }
  if (params.mix_kernel.dim(1) != k * d) {
    throw std::invalid_argument("ace_forward: client count mismatch with mix kernel");
  }

  Tensor ctx = owner_id >= 0
                   ? compose_context_rows(context_matrix, params.context_embedding, owner_id)
                   : context_matrix.detached();

  // pixels attend over the K transformed embeddings
  Tensor f_b = nchw_to_rows(conv2d(stage_features, params.pointwise, 1, 0));  // [P x D]
  Tensor q = add_rowvec(
      matmul(relu(add_rowvec(matmul(ctx, transpose(params.mlp_w1)), params.mlp_b1)),
             transpose(params.mlp_w2)),
      params.mlp_b2);  // [K x D]
  Tensor alpha = softmax(scale(matmul(f_b, transpose(q)), 1.0 / std::sqrt(d)));  // [P x K]

  std::vector<Tensor> blocks;
  blocks.reserve(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    blocks.push_back(matmul(col(alpha, i), row(q, i)));  // [P x D]
  }
  Tensor mixed = rows_to_nchw(hstack(blocks), n, h, w);  // [N x (K*D) x H x W]
  Tensor x_c = relu(group_norm(conv2d(mixed, params.mix_kernel, 1, 1), 1, params.mix_gn_gamma,
                               params.mix_gn_beta));
  auto [mask, soft] = gumbel_mask(x_c, tau, training, rng);
  return self_gate(mask, soft, stage_features);
}

}  // namespace safe

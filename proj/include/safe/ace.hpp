#pragma once

#include <random>
#include <utility>
#include <vector>

#include "safe/tensor.hpp"

namespace safe {

/// Trainable state of one ACE plug-in branch (one backbone stage).
struct AceStageParams {
  Tensor pointwise;          // [D x C x 1 x 1]
  Tensor mlp_w1, mlp_b1;     // D -> D
  Tensor mlp_w2, mlp_b2;     // D -> D
  Tensor mix_kernel;         // [1 x (K*D) x 3 x 3]
  Tensor mix_gn_gamma, mix_gn_beta;  // [1]
  Tensor context_embedding;  // [1 x D], this client's row
};

/// All clients' context embeddings, one K x D matrix per stage. When
/// owner_id >= 0 that row is taken live from the local AceStageParams so
/// gradients reach only it; every other row enters the graph detached.
struct AceContextMatrix {
  int owner_id = -1;
  std::vector<Tensor> stages;  // each [K x D], plain values
};

struct GumbelConfig {
  double tau_start = 1.0;
  double tau_end = 0.1;
};

/// Cosine interpolation of tau from tau_start (round 0) to tau_end (round L).
double anneal_tau(int round, int total_rounds, const GumbelConfig& cfg);

/// Differentiable binary foreground mask. Training draws standard-logistic
/// noise and binarizes with the straight-through convention; inference
/// thresholds x_c at zero with no sampling.
std::pair<Tensor, Tensor> gumbel_mask(const Tensor& x_c, double tau, bool training,
                                      std::mt19937_64& rng);

/// Builds the per-stage context matrix for the graph: the owner row comes
/// from own_embedding (gradient-active), all other rows are constants.
Tensor compose_context_rows(const Tensor& stage_matrix, const Tensor& own_embedding,
                            int owner_id);

/// The self-gated enhancement of the mask pipeline output: (1 + m * sigmoid(s)) * x.
Tensor self_gate(const Tensor& mask, const Tensor& soft, const Tensor& x);

/// Full ACE branch for one stage: pointwise projection, cross-attention of
/// pixels over the K context embeddings, 3x3 mix + GN + relu into a one-channel
/// score map, Gumbel mask, self-gated amplification of the stage features.
Tensor ace_forward(const Tensor& stage_features, const AceStageParams& params,
                   const Tensor& context_matrix, int owner_id, double tau, bool training,
                   std::mt19937_64& rng);

}  // namespace safe

#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "safe/ace.hpp"
#include "safe/tensor.hpp"

namespace safe {

struct ModelConfig {
  int input_channels = 1;
  int image_size = 16;
  std::vector<int> stage_channels = {8, 16};
  int num_classes = 8;
  bool ace_enabled = false;
  int ace_dim = 8;
  int ace_clients = 1;  // K, sizes the mix kernel and context matrix
  int gn_groups = 4;

  int num_stages() const { return static_cast<int>(stage_channels.size()); }
  int feature_dim() const { return stage_channels.back(); }
  void validate() const;
};

struct StageParams {
  Tensor conv;      // [C_out x C_in x 3 x 3]
  Tensor gn_gamma;  // [C_out]
  Tensor gn_beta;   // [C_out]
};

struct ModelParams {
  ModelConfig cfg;
  std::vector<StageParams> stages;
  std::vector<AceStageParams> ace;  // empty unless ace_enabled
  Tensor head_weight;               // [J x D_feat]
  Tensor head_bias;                 // [J]
};

/// Post-relu, pre-ACE activations per stage, each reshaped to (N*H*W) x C.
struct ActivationCapture {
  std::vector<Tensor> stages;
};

struct ForwardResult {
  Tensor logits;  // [N x J]
  ActivationCapture capture;
};

ModelParams init_model(const ModelConfig& cfg, std::mt19937_64& rng);
ModelParams clone_model(const ModelParams& p);

/// Deterministic iteration over every parameter; the order defines the
/// flatten/unflatten layout and the aggregation pairing.
void for_each_param(ModelParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const ModelParams& p,
                    const std::function<void(const std::string&, const Tensor&)>& fn);
/// Backbone subset: stage convs/GN plus ACE transform layers; excludes the
/// head and the client-owned context embedding.
void for_each_backbone_param(ModelParams& p,
                             const std::function<void(const std::string&, Tensor&)>& fn);

void set_param_grad_tracking(ModelParams& p, bool enabled);
void zero_param_grads(ModelParams& p);
int64_t param_count(const ModelConfig& cfg);

Tensor flatten_params(const ModelParams& p);                 // [1 x P]
void unflatten_params(const Tensor& vec, ModelParams& into); // inverse, shape-checked

ForwardResult forward(const ModelParams& params, const Tensor& batch,
                      const AceContextMatrix* context, double tau, bool training,
                      std::mt19937_64& rng);

std::vector<int> predict(const ModelParams& params, const Tensor& batch,
                         const AceContextMatrix* context);

}  // namespace safe

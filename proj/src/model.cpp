#include "safe/model.hpp"

#include <cmath>
#include <stdexcept>

namespace safe {

void ModelConfig::validate() const {
  if (stage_channels.empty()) throw std::invalid_argument("model: no stages configured");
  if (num_classes < 2) throw std::invalid_argument("model: need at least two classes");
  int down = 1 << (num_stages() - 1);
  if (image_size % down != 0) {
    throw std::invalid_argument("model: image_size must be divisible by 2^(stages-1)");
  }
  for (int c : stage_channels) {
    if (c % gn_groups != 0) {
      throw std::invalid_argument("model: stage channels must be divisible by gn_groups");
    }
  }
  if (ace_enabled && (ace_dim < 1 || ace_clients < 1)) {
    throw std::invalid_argument("model: invalid ACE dimensions");
  }
}

ModelParams init_model(const ModelConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  int cin = cfg.input_channels;
  for (int s = 0; s < cfg.num_stages(); ++s) {
    int cout = cfg.stage_channels[static_cast<size_t>(s)];
    StageParams sp;
    sp.conv = Tensor::randn({cout, cin, 3, 3}, rng, std::sqrt(2.0 / (cin * 9)));
    sp.gn_gamma = Tensor::full({cout}, 1.0);
    sp.gn_beta = Tensor::zeros({cout});
    p.stages.push_back(std::move(sp));
    if (cfg.ace_enabled) {
      int d = cfg.ace_dim, k = cfg.ace_clients;
      AceStageParams ap;
      ap.pointwise = Tensor::randn({d, cout, 1, 1}, rng, std::sqrt(2.0 / cout));
      ap.mlp_w1 = Tensor::randn({d, d}, rng, std::sqrt(2.0 / d));
      ap.mlp_b1 = Tensor::zeros({d});
      ap.mlp_w2 = Tensor::randn({d, d}, rng, std::sqrt(2.0 / d));
      ap.mlp_b2 = Tensor::zeros({d});
      ap.mix_kernel = Tensor::randn({1, k * d, 3, 3}, rng, std::sqrt(2.0 / (k * d * 9)));
      ap.mix_gn_gamma = Tensor::full({1}, 1.0);
      ap.mix_gn_beta = Tensor::zeros({1});
      ap.context_embedding = Tensor::randn({1, d}, rng, 0.1);
      p.ace.push_back(std::move(ap));
    }
    cin = cout;
  }
  p.head_weight = Tensor::randn({cfg.num_classes, cfg.feature_dim()}, rng,
                                std::sqrt(1.0 / cfg.feature_dim()));
  p.head_bias = Tensor::zeros({cfg.num_classes});
  return p;
}

ModelParams clone_model(const ModelParams& src) {
  ModelParams p;
  p.cfg = src.cfg;
  for (const auto& s : src.stages) {
    p.stages.push_back({s.conv.clone(), s.gn_gamma.clone(), s.gn_beta.clone()});
  }
  for (const auto& a : src.ace) {
    p.ace.push_back({a.pointwise.clone(), a.mlp_w1.clone(), a.mlp_b1.clone(), a.mlp_w2.clone(),
                     a.mlp_b2.clone(), a.mix_kernel.clone(), a.mix_gn_gamma.clone(),
                     a.mix_gn_beta.clone(), a.context_embedding.clone()});
  }
  p.head_weight = src.head_weight.clone();
  p.head_bias = src.head_bias.clone();
  return p;
}

namespace {

void visit_backbone(ModelParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (size_t s = 0; s < p.stages.size(); ++s) {
    std::string pre = "stage" + std::to_string(s) + ".";
    fn(pre + "conv", p.stages[s].conv);
    fn(pre + "gn_gamma", p.stages[s].gn_gamma);
    fn(pre + "gn_beta", p.stages[s].gn_beta);
    if (s < p.ace.size()) {
      auto& a = p.ace[s];
      fn(pre + "ace.pointwise", a.pointwise);
      fn(pre + "ace.mlp_w1", a.mlp_w1);
      fn(pre + "ace.mlp_b1", a.mlp_b1);
      fn(pre + "ace.mlp_w2", a.mlp_w2);
      fn(pre + "ace.mlp_b2", a.mlp_b2);
      fn(pre + "ace.mix_kernel", a.mix_kernel);
      fn(pre + "ace.mix_gn_gamma", a.mix_gn_gamma);
      fn(pre + "ace.mix_gn_beta", a.mix_gn_beta);
    }
  }
}

}  // namespace

void for_each_param(ModelParams& p,
                    const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_backbone(p, fn);
  for (size_t s = 0; s < p.ace.size(); ++s) {
    fn("stage" + std::to_string(s) + ".ace.context_embedding", p.ace[s].context_embedding);
  }
  fn("head.weight", p.head_weight);
  fn("head.bias", p.head_bias);
}

void for_each_param(const ModelParams& p,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
  for_each_param(const_cast<ModelParams&>(p),
                 [&](const std::string& name, Tensor& t) { fn(name, t); });
}

void for_each_backbone_param(ModelParams& p,
                             const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_backbone(p, fn);
}

void set_param_grad_tracking(ModelParams& p, bool enabled) {
  for_each_param(p, [enabled](const std::string&, Tensor& t) { t.set_requires_grad(enabled); });
}

void zero_param_grads(ModelParams& p) {
  for_each_param(p, [](const std::string&, Tensor& t) { t.zero_grad(); });
}

int64_t param_count(const ModelConfig& cfg) {
  std::mt19937_64 rng(0);
  ModelParams p = init_model(cfg, rng);
  int64_t n = 0;
  for_each_param(p, [&n](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

Tensor flatten_params(const ModelParams& p) {
  std::vector<double> flat;
  for_each_param(p, [&flat](const std::string&, const Tensor& t) {
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  });
  int n = static_cast<int>(flat.size());
  return Tensor::from_data({1, n}, std::move(flat));
}

void unflatten_params(const Tensor& vec, ModelParams& into) {
  const auto& src = vec.data();
  size_t off = 0;
  for_each_param(into, [&](const std::string& name, Tensor& t) {
    if (off + t.data().size() > src.size()) {
      throw std::invalid_argument("unflatten: vector too short at " + name);
    }
    std::copy(src.begin() + static_cast<long>(off),
              src.begin() + static_cast<long>(off + t.data().size()),
              t.mutable_data().begin());
    off += t.data().size();
  });
  if (off != src.size()) throw std::invalid_argument("unflatten: vector length mismatch");
}

ForwardResult forward(const ModelParams& params, const Tensor& batch,
                      const AceContextMatrix* context, double tau, bool training,
                      std::mt19937_64& rng) {
  const ModelConfig& cfg = params.cfg;
  if (batch.shape().size() != 4 || batch.dim(1) != cfg.input_channels ||
      batch.dim(2) != cfg.image_size || batch.dim(3) != cfg.image_size) {
    throw std::invalid_argument("forward: batch shape does not match model config");
  }
  if (cfg.ace_enabled && context == nullptr) {
    throw std::invalid_argument("forward: ACE enabled but no context matrix supplied");
  }

  ForwardResult res;
  Tensor x = batch;
  for (int s = 0; s < cfg.num_stages(); ++s) {
    const auto& sp = params.stages[static_cast<size_t>(s)];
    // stages after the first downsample by 2: odd-size pad keeps the 3x3
    // stride-2 conv output exactly half the input
    Tensor y = s == 0 ? conv2d(x, sp.conv, 1, 1)
                      : conv2d(pad_nchw(x, 1, 0, 1, 0), sp.conv, 2, 0);
    x = relu(group_norm(y, cfg.gn_groups, sp.gn_gamma, sp.gn_beta));
    res.capture.stages.push_back(nchw_to_rows(x).detached());
    if (cfg.ace_enabled) {
      x = ace_forward(x, params.ace[static_cast<size_t>(s)],
                      context->stages[static_cast<size_t>(s)], context->owner_id, tau, training,
                      rng);
    }
  }
  Tensor feat = global_avg_pool(x);
  res.logits = add_rowvec(matmul(feat, transpose(params.head_weight)), params.head_bias);
  return res;
}

std::vector<int> predict(const ModelParams& params, const Tensor& batch,
                         const AceContextMatrix* context) {
  std::mt19937_64 rng(0);  // inference path draws nothing
  ForwardResult r = forward(params, batch, context, 1.0, false, rng);
  int n = r.logits.dim(0), j = r.logits.dim(1);
  std::vector<int> preds(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double* lr = &r.logits.data()[static_cast<size_t>(i) * j];
    int best = 0;
    for (int c = 1; c < j; ++c)
      if (lr[c] > lr[best]) best = c;
    preds[static_cast<size_t>(i)] = best;
  }
  return preds;
}

}  // namespace safe

#include "safe/fed_runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "safe/dmr.hpp"
#include "safe/fau.hpp"
#include "safe/metrics.hpp"

namespace safe {

// ---- seed derivation ----

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b) {
  return splitmix64(master ^ splitmix64(a ^ splitmix64(b)));
}

// ---- shard-access audit ----

namespace {
std::mutex g_audit_mutex;
std::vector<ShardAccess> g_audit_log;

void audit_record(int owner, int accessor) {
  std::lock_guard<std::mutex> lk(g_audit_mutex);
  g_audit_log.push_back({owner, accessor});
}
}  // namespace

void audit_reset() {
  std::lock_guard<std::mutex> lk(g_audit_mutex);
  g_audit_log.clear();
}

std::vector<ShardAccess> audit_snapshot() {
  std::lock_guard<std::mutex> lk(g_audit_mutex);
  return g_audit_log;
}

// ---- config validation ----

void RunConfig::validate() const {
  if (clients < 1) throw std::invalid_argument("clients: must be >= 1");
  if (rounds < 0) throw std::invalid_argument("rounds: must be >= 0");
  if (local_epochs < 0) throw std::invalid_argument("local_epochs: must be >= 0");
  if (clients_per_round < 1 || clients_per_round > clients) {
    throw std::invalid_argument("clients_per_round: must be in [1, clients]");
  }
  if (fau_period < 1) throw std::invalid_argument("fau_period: must be >= 1");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate: must be > 0");
  if (batch_size < 1) throw std::invalid_argument("batch_size: must be >= 1");
  if (workers < 1) throw std::invalid_argument("workers: must be >= 1");
  if (!(cro.beta >= 0.0)) throw std::invalid_argument("cro.beta: must be >= 0");
  if (!(gumbel.tau_end > 0.0)) throw std::invalid_argument("ace.tau_end: must be > 0");
  if (!(gumbel.tau_start >= gumbel.tau_end)) {
    throw std::invalid_argument("ace.tau_start: must be >= ace.tau_end");
  }
  if (ace_dim < 1) throw std::invalid_argument("ace.dim: must be >= 1");
  if (data.classes < 2) throw std::invalid_argument("data.classes: must be >= 2");
  if (data.samples_per_class < 1) {
    throw std::invalid_argument("data.samples_per_class: must be >= 1");
  }
  if (!(data.imbalance_ratio >= 1.0)) {
    throw std::invalid_argument("data.imbalance_ratio: must be >= 1");
  }
  if (!(data.dirichlet_alpha > 0.0)) {
    throw std::invalid_argument("data.dirichlet_alpha: must be > 0");
  }
  if (data.ses_per_class < 1) throw std::invalid_argument("data.ses_per_class: must be >= 1");
  if (data.ses_per_class >= data.samples_per_class) {
    throw std::invalid_argument("data.ses_per_class: must be < data.samples_per_class");
  }
  ModelConfig mc;
  mc.image_size = data.image_size;
  mc.stage_channels = stage_channels;
  mc.num_classes = data.classes;
  mc.ace_enabled = toggles.ace;
  mc.ace_dim = ace_dim;
  mc.ace_clients = clients;
  try {
    mc.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("model: ") + e.what());
  }
}

double RoundRecord::mean_client_c_acc() const {
  if (client_c_acc.empty()) return 0.0;
  return std::accumulate(client_c_acc.begin(), client_c_acc.end(), 0.0) / client_c_acc.size();
}

double RoundRecord::mean_client_s_acc() const {
  if (client_s_acc.empty()) return 0.0;
  return std::accumulate(client_s_acc.begin(), client_s_acc.end(), 0.0) / client_s_acc.size();
}

// ---- helpers ----

namespace {

Dataset shard_subset(const ClientState& st, const std::vector<int>& idx, int accessor) {
  audit_record(st.client_id, accessor);
  return st.shard.dataset.subset(idx);
}

void paired_copy(ModelParams& dst, const ModelParams& src, bool head_only) {
  std::vector<const Tensor*> from;
  if (!head_only) {
    for_each_backbone_param(const_cast<ModelParams&>(src),
                            [&](const std::string&, Tensor& t) { from.push_back(&t); });
  }
  from.push_back(&src.head_weight);
  from.push_back(&src.head_bias);

  std::vector<Tensor*> to;
  if (!head_only) {
    for_each_backbone_param(dst, [&](const std::string&, Tensor& t) { to.push_back(&t); });
  }
  to.push_back(&dst.head_weight);
  to.push_back(&dst.head_bias);

  for (size_t i = 0; i < to.size(); ++i) {
    if (from[i]->shape() != to[i]->shape()) {
      throw std::invalid_argument("parameter copy: shape mismatch");
    }
    to[i]->mutable_data() = from[i]->data();
  }
}

ActivationCapture capture_on(const ModelParams& model, const Dataset& ds,
                             const AceContextMatrix* ctx) {
  std::mt19937_64 rng(0);  // inference path draws nothing
  return forward(model, ds.images, ctx, 1.0, false, rng).capture;
}

class AdamState {
 public:
  void step(ModelParams& p, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(0.9, t_);
    double bc2 = 1.0 - std::pow(0.999, t_);
    size_t i = 0;
    for_each_param(p, [&](const std::string&, Tensor& t) {
      if (slots_.size() <= i) {
        slots_.push_back({std::vector<double>(t.data().size(), 0.0),
                          std::vector<double>(t.data().size(), 0.0)});
      }
      Slot& s = slots_[i++];
      const auto& g = t.grad();
      auto& w = t.mutable_data();
      for (size_t k = 0; k < w.size(); ++k) {
        s.m[k] = 0.9 * s.m[k] + 0.1 * g[k];
        s.v[k] = 0.999 * s.v[k] + 0.001 * g[k] * g[k];
        w[k] -= lr * (s.m[k] / bc1) / (std::sqrt(s.v[k] / bc2) + 1e-8);
      }
    });
  }

 private:
  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  long t_ = 0;
};

}  // namespace

// ---- round-loop building blocks ----

std::vector<int> select_clients(int total, int k, std::mt19937_64& rng) {
  if (total < 1 || k < 1 || k > total) {
    throw std::invalid_argument("select_clients: need 1 <= k <= total");
  }
  std::vector<int> ids(static_cast<size_t>(total));
  std::iota(ids.begin(), ids.end(), 0);
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, total - 1);
    std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(pick(rng))]);
  }
  ids.resize(static_cast<size_t>(k));
  std::sort(ids.begin(), ids.end());
  return ids;
}

ModelParams aggregate(const std::vector<const ClientUpload*>& uploads, const ModelParams& base) {
  if (uploads.empty()) throw std::invalid_argument("aggregate: no uploads");
  std::vector<const ClientUpload*> order = uploads;
  std::sort(order.begin(), order.end(),
            [](const ClientUpload* a, const ClientUpload* b) { return a->client_id < b->client_id; });
  double total = 0.0;
  for (const ClientUpload* u : order) total += u->train_size;
  if (total <= 0.0) throw std::invalid_argument("aggregate: no training samples");

  ModelParams out = clone_model(base);

  std::vector<Tensor*> dst;
  for_each_backbone_param(out, [&](const std::string&, Tensor& t) { dst.push_back(&t); });
  dst.push_back(&out.head_weight);
  dst.push_back(&out.head_bias);

  std::vector<std::vector<const Tensor*>> srcs;
  for (const ClientUpload* u : order) {
    std::vector<const Tensor*> s;
    for_each_backbone_param(const_cast<ModelParams&>(u->params),
                            [&](const std::string&, Tensor& t) { s.push_back(&t); });
    s.push_back(&u->params.head_weight);
    s.push_back(&u->params.head_bias);
    srcs.push_back(std::move(s));
  }

  // anchored form acc = s_0 + sum_i w_i (s_i - s_0): algebraically the
  // weighted mean, and exact (not just close) when every upload agrees
  for (size_t j = 0; j < dst.size(); ++j) {
    auto& acc = dst[j]->mutable_data();
    acc = srcs[0][j]->data();
    for (size_t c = 1; c < order.size(); ++c) {
      double w = order[c]->train_size / total;
      const auto& s = srcs[c][j]->data();
      const auto& s0 = srcs[0][j]->data();
      if (s.size() != acc.size()) throw std::invalid_argument("aggregate: shape mismatch");
      for (size_t k = 0; k < acc.size(); ++k) acc[k] += w * (s[k] - s0[k]);
    }
  }
  return out;
}

ClientUpload client_update(ClientState& st, const Broadcast& b, const RunConfig& cfg,
                           int round) {
  if (st.shard.dataset.size() == 0) throw std::runtime_error("client_update: empty shard");
  const ModelParams& global = *b.global;

  ClientUpload up;
  up.client_id = st.client_id;
  up.train_size = static_cast<int>(st.train_idx.size());

  AceContextMatrix own_ctx;
  const AceContextMatrix* ctx = nullptr;
  if (st.model.cfg.ace_enabled) {
    own_ctx.owner_id = st.client_id;
    own_ctx.stages = b.context->stages;
    ctx = &own_ctx;
  }

  if (b.fau_round) {
    ActivationCapture local = capture_on(st.model, *b.ses_inputs, ctx);
    double sim = multi_scale_divergence(*b.global_ses, local).mean;
    fau_update(st.model, global, sim, b.eps_minus);
    paired_copy(st.model, global, /*head_only=*/true);
    up.d_cka = sim;
  } else {
    paired_copy(st.model, global, /*head_only=*/false);
  }

  if (cfg.local_epochs > 0 && !st.train_idx.empty()) {
    std::mt19937_64 rng(derive_seed(cfg.seed, 0x10000u + static_cast<uint64_t>(round),
                                    static_cast<uint64_t>(st.client_id)));
    set_param_grad_tracking(st.model, true);
    zero_param_grads(st.model);
    AdamState adam;
    double lr = cfg.learning_rate * (2 * round > cfg.rounds ? 0.5 : 1.0);
    std::vector<int> idx = st.train_idx;
    for (int e = 0; e < cfg.local_epochs; ++e) {
      std::shuffle(idx.begin(), idx.end(), rng);
      double loss_sum = 0.0;
      int batches = 0;
      for (size_t start = 0; start < idx.size(); start += static_cast<size_t>(cfg.batch_size)) {
        size_t stop = std::min(idx.size(), start + static_cast<size_t>(cfg.batch_size));
        std::vector<int> chunk(idx.begin() + static_cast<long>(start),
                               idx.begin() + static_cast<long>(stop));
        Dataset batch = shard_subset(st, chunk, st.client_id);
        ForwardResult fr = forward(st.model, batch.images, ctx, b.tau, true, rng);
        Tensor loss = cr_weighted_loss(softmax(fr.logits), batch.labels, b.cr_tilde,
                                       cfg.cro.beta, b.eps_plus);
        loss_sum += loss.item();
        ++batches;
        backward(loss);
        adam.step(st.model, lr);
        zero_param_grads(st.model);
      }
      up.epoch_mean_loss.push_back(batches > 0 ? loss_sum / batches : 0.0);
    }
    set_param_grad_tracking(st.model, false);
  }

  up.ses_capture = capture_on(st.model, *b.ses_inputs, ctx);
  up.params = clone_model(st.model);
  return up;
}

// ---- full training loop ----

namespace {

struct EvalResult {
  double cloud_c = 0.0, cloud_s = 0.0;
  std::vector<double> client_c, client_s;
  std::vector<std::vector<int>> cloud_conf;
};

EvalResult evaluate_all(const ModelParams& global, const std::vector<ClientState>& clients,
                        const AceContextMatrix* ctx, int classes) {
  EvalResult r;
  std::vector<int> all_preds, all_labels;
  for (const ClientState& st : clients) {
    if (st.test_idx.empty()) {
      r.client_c.push_back(0.0);
      r.client_s.push_back(0.0);
      continue;
    }
    Dataset test = shard_subset(st, st.test_idx, st.client_id);
    std::vector<int> gp = predict(global, test.images, ctx);
    all_preds.insert(all_preds.end(), gp.begin(), gp.end());
    all_labels.insert(all_labels.end(), test.labels.begin(), test.labels.end());
    std::vector<int> lp = predict(st.model, test.images, ctx);
    r.client_c.push_back(class_accuracy(lp, test.labels, classes));
    r.client_s.push_back(sample_accuracy(lp, test.labels));
  }
  if (!all_labels.empty()) {
    r.cloud_c = class_accuracy(all_preds, all_labels, classes);
    r.cloud_s = sample_accuracy(all_preds, all_labels);
    r.cloud_conf = confusion(all_preds, all_labels, classes);
  }
  return r;
}

void refresh_context_rows(AceContextMatrix& fc, const ClientUpload& up) {
  for (size_t s = 0; s < fc.stages.size(); ++s) {
    const auto& emb = up.params.ace[s].context_embedding.data();
    auto& m = fc.stages[s].mutable_data();
    size_t d = emb.size();
    std::copy(emb.begin(), emb.end(),
              m.begin() + static_cast<long>(static_cast<size_t>(up.client_id) * d));
  }
}

double safe_ratio_similarity(const std::vector<double>& cr, const std::vector<int>& dis_g) {
  for (int n : dis_g) {
    if (n <= 0) return 0.0;
  }
  return ratio_similarity(cr, dis_g);
}

struct PipelineOut {
  SesSet ses;
  std::vector<Shard> shards;
};

PipelineOut build_data(const RunConfig& cfg) {
  DataConfig dcfg = cfg.data;
  dcfg.clients = cfg.clients;
  dcfg.seed = derive_seed(cfg.seed, 1, 0);
  Dataset full = generate_synthetic(dcfg);
  auto [ses, rest] = reserve_ses(full, dcfg.ses_per_class, derive_seed(cfg.seed, 2, 0));
  Dataset skewed = induce_imbalance(rest, dcfg.imbalance_ratio, derive_seed(cfg.seed, 3, 0));
  std::vector<Shard> shards =
      dirichlet_partition(skewed, cfg.clients, dcfg.dirichlet_alpha, derive_seed(cfg.seed, 4, 0));
  return {std::move(ses), std::move(shards)};
}

}  // namespace

PartitionPreview partition_preview(const RunConfig& cfg) {
  cfg.validate();
  PipelineOut data = build_data(cfg);
  PartitionPreview pv;
  pv.totals_per_class.assign(static_cast<size_t>(cfg.data.classes), 0);
  for (const Shard& sh : data.shards) {
    pv.counts.push_back(sh.dis);
    for (size_t j = 0; j < sh.dis.size(); ++j) {
      pv.totals_per_class[j] += sh.dis[j];
    }
  }
  int lo = *std::min_element(pv.totals_per_class.begin(), pv.totals_per_class.end());
  int hi = *std::max_element(pv.totals_per_class.begin(), pv.totals_per_class.end());
  pv.achieved_ratio = lo > 0 ? static_cast<double>(hi) / lo
                             : std::numeric_limits<double>::infinity();
  return pv;
}

RunReport run_training(const RunConfig& cfg) {
  cfg.validate();
  auto t_begin = std::chrono::steady_clock::now();

  RunReport rep;
  rep.config = cfg;
  const int K = cfg.clients;
  const int T = cfg.rounds;
  const int J = cfg.data.classes;

  // data pipeline: synthesize, reserve the monitoring set, skew, partition
  PipelineOut data = build_data(cfg);
  SesSet& ses = data.ses;
  std::vector<Shard>& shards = data.shards;

  // model
  ModelConfig mcfg;
  mcfg.input_channels = 1;
  mcfg.image_size = cfg.data.image_size;
  mcfg.stage_channels = cfg.stage_channels;
  mcfg.num_classes = J;
  mcfg.ace_enabled = cfg.toggles.ace;
  mcfg.ace_dim = cfg.ace_dim;
  mcfg.ace_clients = K;
  std::mt19937_64 mrng(derive_seed(cfg.seed, 5, 0));
  ModelParams global = init_model(mcfg, mrng);

  // clients: persistent local models, 80/20 train-test split per shard
  std::vector<ClientState> clients(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) {
    ClientState& st = clients[static_cast<size_t>(i)];
    st.client_id = i;
    st.shard = std::move(shards[static_cast<size_t>(i)]);
    int n = st.shard.dataset.size();
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 srng(derive_seed(cfg.seed, 6, static_cast<uint64_t>(i)));
    std::shuffle(order.begin(), order.end(), srng);
    int n_test = n >= 2 ? std::max(1, n / 5) : 0;
    st.test_idx.assign(order.begin(), order.begin() + n_test);
    st.train_idx.assign(order.begin() + n_test, order.end());
    st.model = clone_model(global);
    if (mcfg.ace_enabled) {
      std::mt19937_64 erng(derive_seed(cfg.seed, 7, static_cast<uint64_t>(i)));
      for (auto& a : st.model.ace) {
        a.context_embedding = Tensor::randn({1, mcfg.ace_dim}, erng, 0.1);
      }
    }
  }

  // context matrix F_c (row i owned by client i)
  AceContextMatrix fc;
  fc.owner_id = -1;
  if (mcfg.ace_enabled) {
    for (int s = 0; s < mcfg.num_stages(); ++s) {
      std::vector<double> m(static_cast<size_t>(K) * mcfg.ace_dim, 0.0);
      for (int i = 0; i < K; ++i) {
        const auto& emb = clients[static_cast<size_t>(i)].model.ace[static_cast<size_t>(s)]
                              .context_embedding.data();
        std::copy(emb.begin(), emb.end(),
                  m.begin() + static_cast<long>(static_cast<size_t>(i) * emb.size()));
      }
      fc.stages.push_back(Tensor::from_data({K, mcfg.ace_dim}, std::move(m)));
    }
  }
  const AceContextMatrix* eval_ctx = mcfg.ace_enabled ? &fc : nullptr;

  // global train-split class counts, for the ratio-similarity diagnostic
  std::vector<int> dis_g(static_cast<size_t>(J), 0);
  for (const ClientState& st : clients) {
    for (int idx : st.train_idx) ++dis_g[static_cast<size_t>(st.shard.dataset.labels[static_cast<size_t>(idx)])];
  }

  std::vector<double> current_cr(static_cast<size_t>(J), 0.0);
  std::vector<double> last_d_cka(static_cast<size_t>(K), 0.0);
  std::vector<std::vector<double>> snapshots;

  auto make_record = [&](int round) {
    RoundRecord rec;
    rec.round = round;
    if (cfg.toggles.dmr) {
      rec.eps_plus = T >= 1 ? eps_plus(round, T) : 0.0;
      rec.eps_minus = T >= 1 ? eps_minus(round, T) : 1.0;
    } else {
      rec.eps_plus = 1.0;
      rec.eps_minus = 0.0;
    }
    rec.tau = T >= 1 ? anneal_tau(round, T, cfg.gumbel) : cfg.gumbel.tau_start;
    EvalResult ev = evaluate_all(global, clients, eval_ctx, J);
    rec.cloud_c_acc = ev.cloud_c;
    rec.cloud_s_acc = ev.cloud_s;
    rec.client_c_acc = ev.client_c;
    rec.client_s_acc = ev.client_s;
    rec.d_cka = last_d_cka;
    rec.cr_tilde = current_cr;
    rec.ratio_cosine = safe_ratio_similarity(current_cr, dis_g);
    rep.cloud_confusion = ev.cloud_conf;
    snapshots.push_back(flatten_params(global).data());
    rep.rounds.push_back(std::move(rec));
  };

  make_record(0);

  for (int l = 1; l <= T; ++l) {
    try {
      std::mt19937_64 sel_rng(derive_seed(cfg.seed, 8, static_cast<uint64_t>(l)));
      std::vector<int> selected = select_clients(K, cfg.clients_per_round, sel_rng);

      Broadcast b;
      b.global = &global;
      b.cr_tilde = cfg.toggles.cro ? current_cr : std::vector<double>(static_cast<size_t>(J), 0.0);
      b.context = eval_ctx;
      b.ses_inputs = &ses.data;
      b.eps_plus = cfg.toggles.dmr ? eps_plus(l, T) : 1.0;
      b.eps_minus = cfg.toggles.dmr ? eps_minus(l, T) : 0.0;
      b.tau = anneal_tau(l, T, cfg.gumbel);
      b.fau_round = cfg.toggles.fau && (l % cfg.fau_period == 0);
      ActivationCapture global_ses;
      if (b.fau_round) {
        global_ses = capture_on(global, ses.data, eval_ctx);
        b.global_ses = &global_ses;
      }

      // local updates, worker-count invariant via indexed result slots
      std::vector<ClientUpload> uploads(selected.size());
      int workers = std::min<int>(cfg.workers, static_cast<int>(selected.size()));
      if (workers <= 1) {
        for (size_t i = 0; i < selected.size(); ++i) {
          uploads[i] = client_update(clients[static_cast<size_t>(selected[i])], b, cfg, l);
        }
      } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
        for (int w = 0; w < workers; ++w) {
          pool.emplace_back([&, w]() {
            try {
              for (size_t i = static_cast<size_t>(w); i < selected.size();
                   i += static_cast<size_t>(workers)) {
                uploads[i] = client_update(clients[static_cast<size_t>(selected[i])], b, cfg, l);
              }
            } catch (...) {
              errors[static_cast<size_t>(w)] = std::current_exception();
            }
          });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
          if (e) std::rethrow_exception(e);
        }
      }

      std::vector<const ClientUpload*> ptrs;
      for (const auto& u : uploads) ptrs.push_back(&u);
      global = aggregate(ptrs, global);

      for (const auto& u : uploads) {
        if (mcfg.ace_enabled) refresh_context_rows(fc, u);
        if (u.d_cka >= 0.0) last_d_cka[static_cast<size_t>(u.client_id)] = u.d_cka;
      }

      try {
        GradMatrix gm = measure_class_gradients(global, ses, eval_ctx);
        current_cr = normalize_cr(compute_cr(gm));
      } catch (const DegenerateMeasurementError&) {
        // keep the previous round's estimate
      }

      make_record(l);
    } catch (const std::exception& e) {
      throw std::runtime_error("round " + std::to_string(l) + ": " + e.what());
    }
  }

  if (snapshots.size() >= 3) {
    auto traj = pca_trajectory(snapshots);
    for (size_t i = 0; i < rep.rounds.size(); ++i) rep.rounds[i].trajectory = traj[i];
  }

  rep.duration_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return rep;
}

}  // namespace safe

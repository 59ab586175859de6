#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "safe/ace.hpp"
#include "safe/cro.hpp"
#include "safe/data.hpp"
#include "safe/model.hpp"

namespace safe {

struct Toggles {
  bool cro = true;
  bool fau = true;
  bool dmr = true;
  bool ace = true;
};

struct RunConfig {
  int clients = 5;
  int rounds = 40;
  int local_epochs = 2;
  int clients_per_round = 5;
  int fau_period = 5;
  double learning_rate = 1e-3;  // halved after rounds/2
  int batch_size = 32;
  uint64_t seed = 0;
  int workers = 1;
  Toggles toggles;
  CroConfig cro;
  GumbelConfig gumbel;
  int ace_dim = 8;
  DataConfig data;  // `clients` and `seed` fields are overridden from this struct
  std::vector<int> stage_channels = {8, 16};

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

struct RoundRecord {
  int round = 0;
  double eps_plus = 0.0;
  double eps_minus = 1.0;
  double tau = 1.0;
  double cloud_c_acc = 0.0;
  double cloud_s_acc = 0.0;
  std::vector<double> client_c_acc;
  std::vector<double> client_s_acc;
  std::vector<double> d_cka;  // last known per client
  std::vector<double> cr_tilde;
  double ratio_cosine = 0.0;
  std::array<double, 2> trajectory{0.0, 0.0};  // global-model PCA point

  double mean_client_c_acc() const;
  double mean_client_s_acc() const;
};

struct RunReport {
  RunConfig config;
  std::vector<RoundRecord> rounds;  // rounds + 1 records, index == round
  std::vector<std::vector<int>> cloud_confusion;
  double duration_seconds = 0.0;
};

// ---- deterministic seed derivation ----
uint64_t splitmix64(uint64_t x);
uint64_t derive_seed(uint64_t master, uint64_t a, uint64_t b);

// ---- shard-access audit (privacy boundary checks in tests) ----
struct ShardAccess {
  int owner;
  int accessor;
};
void audit_reset();
std::vector<ShardAccess> audit_snapshot();

// ---- round-loop building blocks ----
struct ClientState {
  int client_id = 0;
  Shard shard;
  std::vector<int> train_idx;
  std::vector<int> test_idx;
  ModelParams model;  // persists across rounds (context embedding is client-owned)
};

struct Broadcast {
  const ModelParams* global = nullptr;
  std::vector<double> cr_tilde;                    // zeros when CRO is off
  const AceContextMatrix* context = nullptr;       // full F_c, owner -1
  const ActivationCapture* global_ses = nullptr;   // A_g, present on FAU rounds
  const Dataset* ses_inputs = nullptr;
  double eps_plus = 1.0;
  double eps_minus = 0.0;
  double tau = 1.0;
  bool fau_round = false;
};

struct ClientUpload {
  int client_id = 0;
  ModelParams params;             // post-training snapshot
  ActivationCapture ses_capture;  // post-training activations on SES
  double d_cka = -1.0;            // similarity measured at blend time; <0 if none
  int train_size = 0;
  std::vector<double> epoch_mean_loss;  // local training diagnostic
};

ClientUpload client_update(ClientState& client, const Broadcast& broadcast,
                           const RunConfig& cfg, int round);

/// Sample-count-weighted average of backbone + head over the uploads
/// (weights renormalized over the selected clients). Context embeddings are
/// never averaged; the output keeps `base`'s embeddings. Permutation-invariant
/// in the uploads.
ModelParams aggregate(const std::vector<const ClientUpload*>& uploads, const ModelParams& base);

/// Uniform sample of k distinct ids from [0, K), sorted.
std::vector<int> select_clients(int total, int k, std::mt19937_64& rng);

RunReport run_training(const RunConfig& cfg);

struct PartitionPreview {
  std::vector<std::vector<int>> counts;  // [clients][classes]
  std::vector<int> totals_per_class;
  double achieved_ratio = 1.0;  // max over min of per-class totals
};

/// Runs the data pipeline of run_training (same seeds) without training.
PartitionPreview partition_preview(const RunConfig& cfg);

}  // namespace safe

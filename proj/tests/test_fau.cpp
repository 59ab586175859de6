#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "safe/fau.hpp"
#include "safe/model.hpp"

using namespace safe;
using testutil::close;

namespace {

// random orthogonal d x d matrix via Gram-Schmidt
std::vector<double> random_orthogonal(int d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> q(static_cast<size_t>(d) * d);
  for (int col = 0; col < d; ++col) {
    std::vector<double> v(static_cast<size_t>(d));
    for (double& x : v) x = n(rng);
    for (int prev = 0; prev < col; ++prev) {
      double dot = 0;
      for (int i = 0; i < d; ++i) dot += v[static_cast<size_t>(i)] * q[static_cast<size_t>(i) * d + prev];
      for (int i = 0; i < d; ++i) v[static_cast<size_t>(i)] -= dot * q[static_cast<size_t>(i) * d + prev];
    }
    double norm = 0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (int i = 0; i < d; ++i) q[static_cast<size_t>(i) * d + col] = v[static_cast<size_t>(i)] / norm;
  }
  return q;
}

Tensor matmul_plain(const Tensor& a, const std::vector<double>& b, int bd) {
  int r = a.dim(0), c = a.dim(1);
  std::vector<double> out(static_cast<size_t>(r) * bd, 0.0);
  for (int i = 0; i < r; ++i) {
    for (int k = 0; k < c; ++k) {
      double av = a.data()[static_cast<size_t>(i) * c + k];
      for (int j = 0; j < bd; ++j) {
        out[static_cast<size_t>(i) * bd + j] += av * b[static_cast<size_t>(k) * bd + j];
      }
    }
  }
  return Tensor::from_data({r, bd}, std::move(out));
}

Tensor scaled(const Tensor& a, double c) {
  std::vector<double> out(a.data());
  for (double& v : out) v *= c;
  return Tensor::from_data(a.shape(), std::move(out));
}

ModelParams small_model(uint64_t seed) {
  ModelConfig cfg;
  cfg.num_classes = 4;
  cfg.ace_enabled = false;
  std::mt19937_64 rng(seed);
  return init_model(cfg, rng);
}

}  // namespace

TEST_CASE("cka of a matrix with itself is one") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = Tensor::randn({6 + trial, 3 + trial % 4}, rng);
    CHECK(close(linear_cka(a, a), 1.0, 1e-9));
  }
}

TEST_CASE("cka of centered orthogonal responses is zero") {
  Tensor a = Tensor::from_data({4, 1}, {1, 1, -1, -1});
  Tensor b = Tensor::from_data({4, 1}, {1, -1, 1, -1});
  CHECK(close(linear_cka(a, b), 0.0, 1e-12));
}

TEST_CASE("cka is invariant to orthogonal rotation and positive scaling") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    Tensor a = Tensor::randn({8, 3}, rng);
    Tensor b = Tensor::randn({8, 3}, rng);
    double base = linear_cka(a, b);
    std::vector<double> q = random_orthogonal(3, 50 + static_cast<uint64_t>(trial));
    CHECK(close(linear_cka(matmul_plain(a, q, 3), b), base, 1e-9));
    CHECK(close(linear_cka(scaled(a, 3.7), b), base, 1e-9));
    CHECK(close(linear_cka(a, scaled(b, 0.02)), base, 1e-9));
  }
}

TEST_CASE("cka range and symmetry over random pairs") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor a = Tensor::randn({5 + trial % 7, 2 + trial % 5}, rng);
    Tensor b = Tensor::randn({5 + trial % 7, 3 + trial % 4}, rng);
    double v = linear_cka(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(close(v, linear_cka(b, a), 1e-12));
  }
}

TEST_CASE("cka input validation") {
  std::mt19937_64 rng(4);
  Tensor a = Tensor::randn({4, 3}, rng);
  CHECK_THROWS_AS(linear_cka(Tensor::randn({4, 3, 1}, rng), a), std::invalid_argument);
  CHECK_THROWS_AS(linear_cka(a, Tensor::randn({5, 3}, rng)), std::invalid_argument);
  CHECK_THROWS_AS(linear_cka(Tensor::randn({1, 3}, rng), Tensor::randn({1, 3}, rng)),
                  std::invalid_argument);
  CHECK_THROWS_AS(linear_cka(Tensor::full({4, 3}, 2.5), a), std::runtime_error);
}

TEST_CASE("multi-scale similarity of identical captures is one") {
  std::mt19937_64 rng(5);
  ActivationCapture cap;
  cap.stages.push_back(Tensor::randn({10, 4}, rng));
  cap.stages.push_back(Tensor::randn({6, 8}, rng));
  DivergenceReport rep = multi_scale_divergence(cap, cap);
  CHECK(rep.per_stage.size() == 2);
  for (double v : rep.per_stage) CHECK(close(v, 1.0, 1e-9));
  CHECK(close(rep.mean, 1.0, 1e-9));

  ActivationCapture shallow;
  shallow.stages.push_back(cap.stages[0]);
  CHECK_THROWS_AS(multi_scale_divergence(cap, shallow), std::invalid_argument);
}

TEST_CASE("independently initialized models disagree on their activations") {
  ModelParams a = small_model(6);
  ModelParams b = small_model(77);
  std::mt19937_64 rng(8);
  Tensor batch = Tensor::randn({6, 1, 16, 16}, rng);
  std::mt19937_64 r1(0), r2(0);
  ActivationCapture ca = forward(a, batch, nullptr, 1.0, false, r1).capture;
  ActivationCapture cb = forward(b, batch, nullptr, 1.0, false, r2).capture;
  DivergenceReport rep = multi_scale_divergence(ca, cb);
  CHECK(rep.mean < 1.0 - 1e-6);
  CHECK(rep.mean >= 0.0);
  CHECK(close(multi_scale_divergence(ca, ca).mean, 1.0, 1e-9));
}

TEST_CASE("fau_update limit cases") {
  ModelParams global_model = small_model(9);

  // eps_minus = 1: client backbone becomes the global one exactly
  ModelParams client = small_model(10);
  fau_update(client, global_model, 0.3, 1.0);
  Tensor fc = flatten_params(client);
  Tensor fg = flatten_params(global_model);
  size_t head = static_cast<size_t>(
      global_model.head_weight.numel() + global_model.head_bias.numel());
  for (size_t i = 0; i < fc.data().size() - head; ++i) CHECK(fc.data()[i] == fg.data()[i]);

  // full similarity (d_cka = 1) also hands everything to the global model
  client = small_model(11);
  fau_update(client, global_model, 1.0, 0.0);
  Tensor fc2 = flatten_params(client);
  for (size_t i = 0; i < fc2.data().size() - head; ++i) CHECK(fc2.data()[i] == fg.data()[i]);

  // eps_minus = 0 and d_cka = 0: plain arithmetic mean
  client = small_model(12);
  Tensor before = flatten_params(client);
  fau_update(client, global_model, 0.0, 0.0);
  Tensor after = flatten_params(client);
  for (size_t i = 0; i < after.data().size() - head; ++i) {
    CHECK(close(after.data()[i], 0.5 * before.data()[i] + 0.5 * fg.data()[i], 1e-15));
  }
  // the head is not fau's business
  for (size_t i = after.data().size() - head; i < after.data().size(); ++i) {
    CHECK(after.data()[i] == before.data()[i]);
  }

  CHECK_THROWS(fau_update(client, global_model, -0.1, 0.5));
  CHECK_THROWS(fau_update(client, global_model, 0.5, 1.2));
}

TEST_CASE("fau_update keeps an already synchronized client in place") {
  ModelParams global_model = small_model(13);
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    ModelParams client = clone_model(global_model);
    fau_update(client, global_model, u(rng), u(rng));
    Tensor fc = flatten_params(client);
    Tensor fg = flatten_params(global_model);
    for (size_t i = 0; i < fc.data().size(); ++i) {
      CHECK(std::abs(fc.data()[i] - fg.data()[i]) < 1e-15);
    }
  }
}

TEST_CASE("the blend stays componentwise between client and global") {
  ModelParams global_model = small_model(15);
  std::mt19937_64 rng(16);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    ModelParams client = small_model(100 + static_cast<uint64_t>(trial));
    Tensor before = flatten_params(client);
    Tensor fg = flatten_params(global_model);
    fau_update(client, global_model, u(rng), u(rng));
    Tensor after = flatten_params(client);
    size_t head = static_cast<size_t>(
        global_model.head_weight.numel() + global_model.head_bias.numel());
    for (size_t i = 0; i < after.data().size() - head; ++i) {
      double lo = std::min(before.data()[i], fg.data()[i]);
      double hi = std::max(before.data()[i], fg.data()[i]);
      CHECK(after.data()[i] >= lo - 1e-12);
      CHECK(after.data()[i] <= hi + 1e-12);
    }
  }
}

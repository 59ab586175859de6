#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "safe/cro.hpp"
#include "safe/data.hpp"
#include "safe/model.hpp"

using namespace safe;
using testutil::close;

namespace {

ModelConfig plain_config(int classes) {
  ModelConfig cfg;
  cfg.num_classes = classes;
  cfg.ace_enabled = false;
  return cfg;
}

SesSet balanced_ses(int classes, int per_class, uint64_t seed) {
  DataConfig dc;
  dc.classes = classes;
  dc.samples_per_class = per_class;
  dc.seed = seed;
  return SesSet{generate_synthetic(dc), per_class};
}

// GAP features of a batch, via a clone whose head is the identity map
Tensor extract_features(const ModelParams& model, const Tensor& images) {
  ModelParams probe = clone_model(model);
  int d = model.cfg.feature_dim();
  probe.cfg.num_classes = d;
  std::vector<double> eye(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = 1.0;
  probe.head_weight = Tensor::from_data({d, d}, std::move(eye));
  probe.head_bias = Tensor::zeros({d});
  std::mt19937_64 rng(0);
  return forward(probe, images, nullptr, 1.0, false, rng).logits;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int i, int j) { return v[static_cast<size_t>(i)] < v[static_cast<size_t>(j)]; });
    std::vector<double> r(v.size());
    for (size_t k = 0; k < idx.size(); ++k) r[static_cast<size_t>(idx[k])] = static_cast<double>(k);
    return r;
  };
  std::vector<double> ra = ranks(a), rb = ranks(b);
  double n = static_cast<double>(a.size());
  double ma = (n - 1) / 2, num = 0, da = 0, db = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (ra[i] - ma) * (rb[i] - ma);
    da += (ra[i] - ma) * (ra[i] - ma);
    db += (rb[i] - ma) * (rb[i] - ma);
  }
  return num / std::sqrt(da * db);
}

}  // namespace

TEST_CASE("measured gradient norms match the closed-form softmax head gradient") {
  int j = 4;
  ModelConfig cfg = plain_config(j);
  std::mt19937_64 rng(1);
  ModelParams model = init_model(cfg, rng);
  SesSet ses = balanced_ses(j, 3, 2);

  GradMatrix g = measure_class_gradients(model, ses, nullptr);
  REQUIRE(g.classes == j);

  int d = cfg.feature_dim();
  for (int p = 0; p < j; ++p) {
    std::vector<int> idx;
    for (int i = 0; i < ses.data.size(); ++i) {
      if (ses.data.labels[static_cast<size_t>(i)] == p) idx.push_back(i);
    }
    Dataset batch = ses.data.subset(idx);
    Tensor feat = extract_features(model, batch.images);
    int n = batch.size();
    // logits, softmax, and dL/dW = (probs - onehot)^T F / n, all in scalar code
    std::vector<double> gw(static_cast<size_t>(j) * d, 0.0);
    for (int i = 0; i < n; ++i) {
      std::vector<double> z(static_cast<size_t>(j));
      for (int q = 0; q < j; ++q) {
        double s = model.head_bias.data()[static_cast<size_t>(q)];
        for (int k = 0; k < d; ++k) {
          s += model.head_weight.data()[static_cast<size_t>(q) * d + k] *
               feat.data()[static_cast<size_t>(i) * d + k];
        }
        z[static_cast<size_t>(q)] = s;
      }
      double zmax = *std::max_element(z.begin(), z.end()), zsum = 0;
      for (double& v : z) zsum += (v = std::exp(v - zmax));
      for (int q = 0; q < j; ++q) {
        double delta = z[static_cast<size_t>(q)] / zsum - (q == p ? 1.0 : 0.0);
        for (int k = 0; k < d; ++k) {
          gw[static_cast<size_t>(q) * d + k] +=
              delta * feat.data()[static_cast<size_t>(i) * d + k] / n;
        }
      }
    }
    for (int q = 0; q < j; ++q) {
      double l1 = 0;
      for (int k = 0; k < d; ++k) l1 += std::abs(gw[static_cast<size_t>(q) * d + k]);
      CHECK(close(g.at(p, q), l1, 1e-10));
    }
  }
}

TEST_CASE("measurement leaves the model bit-identical and grad-free") {
  ModelConfig cfg = plain_config(4);
  std::mt19937_64 rng(3);
  ModelParams model = init_model(cfg, rng);
  Tensor before = flatten_params(model);
  SesSet ses = balanced_ses(4, 2, 4);
  measure_class_gradients(model, ses, nullptr);
  Tensor after = flatten_params(model);
  CHECK(before.data() == after.data());
  for_each_param(model, [](const std::string&, Tensor& t) {
    CHECK_FALSE(t.requires_grad());
  });
}

TEST_CASE("measurement rejects a monitoring set missing a class") {
  ModelConfig cfg = plain_config(4);
  std::mt19937_64 rng(5);
  ModelParams model = init_model(cfg, rng);
  SesSet ses = balanced_ses(4, 2, 6);
  std::vector<int> keep;
  for (int i = 0; i < ses.data.size(); ++i) {
    if (ses.data.labels[static_cast<size_t>(i)] != 3) keep.push_back(i);
  }
  ses.data = ses.data.subset(keep);
  CHECK_THROWS_AS(measure_class_gradients(model, ses, nullptr), std::invalid_argument);
}

TEST_CASE("compute_cr hand examples") {
  GradMatrix ones;
  ones.classes = 3;
  ones.values.assign(9, 1.0);
  std::vector<double> cr = compute_cr(ones);
  for (double v : cr) CHECK(close(v, 0.5, 1e-15));  // 1 / (J-1)

  GradMatrix diag2 = ones;
  for (int p = 0; p < 3; ++p) diag2.values[static_cast<size_t>(p) * 3 + p] = 2.0;
  for (double v : compute_cr(diag2)) CHECK(close(v, 1.0, 1e-15));

  GradMatrix dead;
  dead.classes = 2;
  dead.values = {1.0, 0.0, 0.0, 1.0};  // column 0 has no off-class mass
  CHECK_THROWS_AS(compute_cr(dead), DegenerateMeasurementError);
}

TEST_CASE("compute_cr agrees with a direct scalar reimplementation") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int trial = 0; trial < 20; ++trial) {
    int j = 2 + trial % 5;
    GradMatrix g;
    g.classes = j;
    g.values.resize(static_cast<size_t>(j) * j);
    for (double& v : g.values) v = u(rng);
    std::vector<double> cr = compute_cr(g);
    for (int p = 0; p < j; ++p) {
      double denom = 0;
      for (int i = 0; i < j; ++i) {
        if (i != p) denom += g.values[static_cast<size_t>(i) * j + p];
      }
      CHECK(close(cr[static_cast<size_t>(p)], g.values[static_cast<size_t>(p) * j + p] / denom,
                  1e-12));
    }
  }
}

TEST_CASE("a zeroed head makes self and cross rows symmetric per class") {
  // with W = 0 and b = 0 the softmax is uniform, so |dL/dW_p| = |dL/dW_q|
  // on every class-p batch: |0.5 - 1| = |0.5 - 0| for J = 2
  ModelConfig cfg = plain_config(2);
  std::mt19937_64 rng(8);
  ModelParams model = init_model(cfg, rng);
  std::fill(model.head_weight.mutable_data().begin(), model.head_weight.mutable_data().end(), 0.0);
  std::fill(model.head_bias.mutable_data().begin(), model.head_bias.mutable_data().end(), 0.0);
  SesSet ses = balanced_ses(2, 3, 9);
  GradMatrix g = measure_class_gradients(model, ses, nullptr);
  CHECK(close(g.at(0, 0), g.at(0, 1), 1e-12));
  CHECK(close(g.at(1, 0), g.at(1, 1), 1e-12));
}

TEST_CASE("normalize_cr examples and properties") {
  std::vector<double> out = normalize_cr({2.0, 4.0, 6.0});
  CHECK(out == std::vector<double>{0.0, 0.5, 1.0});
  for (double v : normalize_cr({3.0, 3.0, 3.0})) CHECK(v == 0.0);
  CHECK_THROWS(normalize_cr({1.0}));

  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> cr(static_cast<size_t>(2 + trial % 6));
    for (double& v : cr) v = u(rng);
    std::vector<double> n = normalize_cr(cr);
    double lo = *std::min_element(n.begin(), n.end());
    double hi = *std::max_element(n.begin(), n.end());
    CHECK(lo == 0.0);
    CHECK((hi == 1.0 || hi == 0.0));
    for (size_t a = 0; a < cr.size(); ++a) {
      for (size_t b = 0; b < cr.size(); ++b) {
        if (cr[a] < cr[b]) CHECK(n[a] <= n[b]);
      }
    }
  }
}

TEST_CASE("cr_weighted_loss reduces to plain cross entropy when unweighted") {
  std::mt19937_64 rng(11);
  Tensor logits = Tensor::randn({5, 4}, rng);
  Tensor probs = softmax(logits);
  std::vector<int> labels = {0, 3, 1, 2, 2};
  std::vector<double> cr = {0.2, 0.9, 0.1, 0.7};
  double ce = cross_entropy(probs, labels).item();
  CHECK(close(cr_weighted_loss(probs, labels, cr, 1.0, 0.0).item(), ce, 1e-15));
  CHECK(close(cr_weighted_loss(probs, labels, {0, 0, 0, 0}, 1.0, 0.7).item(), ce, 1e-15));
}

TEST_CASE("cr_weighted_loss hand value and error contracts") {
  // single sample, true-class probability e^{-1}, weight eps*beta*cr+1 = 2
  double p = std::exp(-1.0);
  Tensor probs = Tensor::from_data({1, 2}, {p, 1.0 - p});
  CHECK(close(cr_weighted_loss(probs, {0}, {1.0, 0.0}, 1.0, 1.0).item(), 2.0, 1e-12));
  CHECK_THROWS(cr_weighted_loss(probs, {0}, {1.0, 0.0}, 1.0, 1.5));
  CHECK_THROWS(cr_weighted_loss(probs, {2}, {1.0, 0.0}, 1.0, 0.5));
}

TEST_CASE("rare classes earn higher contribution ratios after training") {
  int positive_direction = 0, trials = 10;
  for (int trial = 0; trial < trials; ++trial) {
    uint64_t seed = 100 + static_cast<uint64_t>(trial);
    DataConfig dc;
    dc.classes = 4;
    dc.samples_per_class = 12;
    dc.seed = seed;
    Dataset imb = induce_imbalance(generate_synthetic(dc), 8.0, seed + 1);
    std::vector<int> counts = imb.histogram();

    ModelConfig cfg = plain_config(4);
    std::mt19937_64 rng(seed + 2);
    ModelParams model = init_model(cfg, rng);
    set_param_grad_tracking(model, true);
    for (int step = 0; step < 60; ++step) {
      std::mt19937_64 frng(0);
      ForwardResult fr = forward(model, imb.images, nullptr, 1.0, true, frng);
      backward(cross_entropy(softmax(fr.logits), imb.labels));
      for_each_param(model, [](const std::string&, Tensor& t) {
        auto& d = t.mutable_data();
        const auto& g = t.grad();
        for (size_t i = 0; i < d.size(); ++i) d[i] -= 0.05 * g[i];
        t.zero_grad();
      });
    }
    set_param_grad_tracking(model, false);

    SesSet ses = balanced_ses(4, 4, seed + 3);
    std::vector<double> cr = compute_cr(measure_class_gradients(model, ses, nullptr));
    std::vector<double> freq(counts.begin(), counts.end());
    if (spearman(freq, cr) < 0.0) ++positive_direction;  // rare class => high CR
  }
  CHECK(positive_direction >= 8);
}

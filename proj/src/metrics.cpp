#include "safe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace safe {

double sample_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("sample_accuracy: empty or mismatched inputs");
  }
  int correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

double class_accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                      int classes) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("class_accuracy: empty or mismatched inputs");
  }
  std::vector<int> total(static_cast<size_t>(classes), 0), correct(static_cast<size_t>(classes), 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    int y = labels[i];
    if (y < 0 || y >= classes) throw std::invalid_argument("class_accuracy: label out of range");
    ++total[static_cast<size_t>(y)];
    if (preds[i] == y) ++correct[static_cast<size_t>(y)];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    if (total[static_cast<size_t>(c)] > 0) {
      sum += static_cast<double>(correct[static_cast<size_t>(c)]) / total[static_cast<size_t>(c)];
      ++present;
    }
  }
  return present > 0 ? sum / present : 0.0;
}

std::vector<std::vector<int>> confusion(const std::vector<int>& preds,
                                        const std::vector<int>& labels, int classes) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("confusion: empty or mismatched inputs");
  }
  std::vector<std::vector<int>> m(static_cast<size_t>(classes),
                                  std::vector<int>(static_cast<size_t>(classes), 0));
  for (size_t i = 0; i < preds.size(); ++i) {
    ++m[static_cast<size_t>(labels[i])][static_cast<size_t>(preds[i])];
  }
  return m;
}

double ratio_similarity(const std::vector<double>& cr_tilde, const std::vector<int>& dis_g) {
  if (cr_tilde.size() != dis_g.size() || cr_tilde.size() < 2) {
    throw std::invalid_argument("ratio_similarity: bad input sizes");
  }
  std::vector<double> inv(dis_g.size());
  for (size_t i = 0; i < dis_g.size(); ++i) {
    if (dis_g[i] <= 0) throw std::invalid_argument("ratio_similarity: empty class count");
    inv[i] = 1.0 / dis_g[i];
  }
  double lo = *std::min_element(inv.begin(), inv.end());
  double hi = *std::max_element(inv.begin(), inv.end());
  if (hi > lo) {
    for (double& v : inv) v = (v - lo) / (hi - lo);
  } else {
    std::fill(inv.begin(), inv.end(), 1.0);  // uniform counts: direction only
  }

  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < inv.size(); ++i) {
    dot += cr_tilde[i] * inv[i];
    na += cr_tilde[i] * cr_tilde[i];
    nb += inv[i] * inv[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {

// top eigenvector of X^T X via power iteration, with an optional deflated
// direction (v1, lambda1); returns {eigenvector, eigenvalue}
std::pair<std::vector<double>, double> power_component(
    const std::vector<std::vector<double>>& x, const std::vector<double>* v1, double lambda1,
    std::mt19937_64& rng) {
  size_t p = x[0].size();
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(p);
  for (double& e : v) e = dist(rng);
  double lambda = 0.0;
  for (int iter = 0; iter < 500; ++iter) {
    // w = X^T (X v) - lambda1 * (v1 . v) v1
    std::vector<double> w(p, 0.0);
    for (const auto& row : x) {
      double dot = 0.0;
      for (size_t i = 0; i < p; ++i) dot += row[i] * v[i];
      for (size_t i = 0; i < p; ++i) w[i] += dot * row[i];
    }
    if (v1 != nullptr) {
      double dot = 0.0;
      for (size_t i = 0; i < p; ++i) dot += (*v1)[i] * v[i];
      for (size_t i = 0; i < p; ++i) w[i] -= lambda1 * dot * (*v1)[i];
    }
    double norm = 0.0;
    for (double e : w) norm += e * e;
    norm = std::sqrt(norm);
    if (norm < 1e-15) return {std::vector<double>(p, 0.0), 0.0};
    double new_lambda = norm;
    for (size_t i = 0; i < p; ++i) w[i] /= norm;
    double delta = 0.0;
    for (size_t i = 0; i < p; ++i) delta = std::max(delta, std::abs(w[i] - v[i]));
    double delta_neg = 0.0;
    for (size_t i = 0; i < p; ++i) delta_neg = std::max(delta_neg, std::abs(w[i] + v[i]));
    v = std::move(w);
    bool converged = std::min(delta, delta_neg) < 1e-9;
    lambda = new_lambda;
    if (converged) break;
  }
  return {v, lambda};
}

void fix_sign(std::vector<double>& v) {
  for (double e : v) {
    if (std::abs(e) > 1e-12) {
      if (e < 0.0) {
        for (double& f : v) f = -f;
      }
      return;
    }
  }
}

}  // namespace

std::vector<std::array<double, 2>> pca_trajectory(
    const std::vector<std::vector<double>>& snapshots) {
  if (snapshots.size() < 3) throw std::invalid_argument("pca_trajectory: need >= 3 snapshots");
  size_t p = snapshots[0].size();
  for (const auto& s : snapshots) {
    if (s.size() != p) throw std::invalid_argument("pca_trajectory: ragged snapshots");
  }
  std::vector<double> mean(p, 0.0);
  for (const auto& s : snapshots) {
    for (size_t i = 0; i < p; ++i) mean[i] += s[i];
  }
  for (double& m : mean) m /= static_cast<double>(snapshots.size());
  std::vector<std::vector<double>> x(snapshots.size(), std::vector<double>(p));
  for (size_t r = 0; r < snapshots.size(); ++r) {
    for (size_t i = 0; i < p; ++i) x[r][i] = snapshots[r][i] - mean[i];
  }

  std::mt19937_64 rng(0xACE5EEDULL);
  auto [v1, l1] = power_component(x, nullptr, 0.0, rng);
  auto [v2, l2] = power_component(x, &v1, l1, rng);
  // treat anything at numerical-noise scale relative to the top component as rank deficiency
  if (l2 < 1e-12 * std::max(l1, 1.0)) std::fill(v2.begin(), v2.end(), 0.0);
  fix_sign(v1);
  fix_sign(v2);

  std::vector<std::array<double, 2>> points;
  points.reserve(snapshots.size());
  for (const auto& row : x) {
    double a = 0.0, b = 0.0;
    for (size_t i = 0; i < p; ++i) {
      a += row[i] * v1[i];
      b += row[i] * v2[i];
    }
    points.push_back({a, b});
  }
  return points;
}

}  // namespace safe

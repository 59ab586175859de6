#pragma once

#include <array>
#include <vector>

namespace safe {

/// Fraction of all predictions that are correct.
double sample_accuracy(const std::vector<int>& preds, const std::vector<int>& labels);
/// Mean per-class recall over classes present in the labels.
double class_accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                      int classes);
/// Row = true class, column = predicted class.
std::vector<std::vector<int>> confusion(const std::vector<int>& preds,
                                        const std::vector<int>& labels, int classes);

/// Cosine similarity between the CR estimate and the min-max-normalized
/// inverse class frequency; 0 when the estimate is all-zero.
double ratio_similarity(const std::vector<double>& cr_tilde, const std::vector<int>& dis_g);

/// Projects parameter snapshots onto their first two principal components
/// (power iteration with deflation; sign fixed by the first nonzero loading).
std::vector<std::array<double, 2>> pca_trajectory(
    const std::vector<std::vector<double>>& snapshots);

}  // namespace safe

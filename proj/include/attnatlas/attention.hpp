#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <vector>

#include "attnatlas/core.hpp"

namespace attnatlas {

/// Scaled bilinear scores <q_i, k_j> / sqrt(d) for every query/key row pair.
template <typename DerivedQ, typename DerivedK>
Eigen::Matrix<typename DerivedQ::Scalar, Eigen::Dynamic, Eigen::Dynamic>
raw_scores(const Eigen::MatrixBase<DerivedQ>& q_rows, const Eigen::MatrixBase<DerivedK>& k_rows, Eigen::Index d) {
  using Scalar = typename DerivedQ::Scalar;
  if (d < 1 || q_rows.cols() != d || k_rows.cols() != d)
    throw Error("raw_scores: dimension mismatch");
  return (q_rows * k_rows.transpose()) / std::sqrt(static_cast<Scalar>(d));
}

/// Numerically stable softmax of each row restricted to the entries where
/// `admissible(i, j)` holds; all other entries are exactly zero.
template <typename Derived, typename Pred>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic>
masked_row_softmax(const Eigen::MatrixBase<Derived>& scores, Pred admissible) {
  using Scalar = typename Derived::Scalar;
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> out =
      Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(scores.rows(), scores.cols());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Scalar mx = -std::numeric_limits<Scalar>::infinity();
    for (Eigen::Index j = 0; j < scores.cols(); ++j)
      if (admissible(i, j)) mx = std::max(mx, scores(i, j));
    if (!std::isfinite(mx)) continue;
    Scalar total = 0;
    for (Eigen::Index j = 0; j < scores.cols(); ++j) {
      if (admissible(i, j)) {
        out(i, j) = std::exp(scores(i, j) - mx);
        total += out(i, j);
      }
    }
    out.row(i) /= total;
  }
  return out;
}

/// Attention of one sequence. Rows are queries and columns keys, each labelled
/// by sequence position and token id.
struct AttentionMatrix {
  int sequence_id = 0;
  std::vector<int> query_positions;
  std::vector<int> key_positions;
  std::vector<int> query_tokens;
  std::vector<int> key_tokens;
  Matrix scores;
  Matrix weights;
  Mask mask = Mask::none;
  /// Rows left with no attention mass after hiding keys.
  std::vector<bool> zero_rows;

  Eigen::Index num_queries() const { return weights.rows(); }
  Eigen::Index num_keys() const { return weights.cols(); }
  bool admissible(Eigen::Index i, Eigen::Index j) const {
    return mask == Mask::none || key_positions[j] <= query_positions[i];
  }
};

struct AttentionEdge {
  int query_token = 0;
  int key_token = 0;
  int query_position = 0;
  int key_position = 0;
  double weight = 0.0;
  bool to_cls = false;

  bool operator==(const AttentionEdge&) const = default;
};

/// Row-wise softmax. Positions default to 0..n-1 and token ids to positions.
/// Without a causal mask the matrix may be rectangular; keys are then 0..m-1.
AttentionMatrix softmax_attention(const Matrix& scores, Mask mask, std::vector<int> positions = {});

/// Attention matrices for every sequence of a head, computed from its raw scores.
std::vector<AttentionMatrix> head_attention(const HeadTensors& h, Mask mask);

/// Per query row, the k heaviest admissible edges carrying nonzero weight; ties
/// go to the lower key position.
std::vector<AttentionEdge> top_k_edges(const AttentionMatrix& a, int k);

/// Drops hidden query rows, zeroes hidden key columns and renormalizes each
/// surviving row; rows with no remaining mass are returned as zeros and flagged.
AttentionMatrix renormalize_hidden(const AttentionMatrix& a, const std::set<int>& hidden_keys,
                                   const std::set<int>& hidden_queries);

struct AggregatePattern {
  Matrix mean;           // max_len x max_len, zero where nothing contributed
  Eigen::MatrixXi count; // sequences contributing to each cell
};

/// Mean attention weight as a function of (query position, key position).
AggregatePattern aggregate_pattern(const std::vector<AttentionMatrix>& sequences, int max_len = 64);

enum class ImageEdgeMode { strongest, threshold };

/// Image View edges: the argmax key of every row, or every edge strictly above
/// `threshold`. Edges into `cls_key_position` are flagged.
std::vector<AttentionEdge> image_edges(const AttentionMatrix& a, ImageEdgeMode mode, double threshold = 0.1,
                                       std::optional<int> cls_key_position = std::nullopt);

}  // namespace attnatlas

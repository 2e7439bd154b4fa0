#include "attnatlas/attention.hpp"

#include <algorithm>
#include <numeric>

namespace attnatlas {

namespace {

std::vector<int> iota_positions(Eigen::Index n) {
  std::vector<int> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

}  // namespace

AttentionMatrix softmax_attention(const Matrix& scores, Mask mask, std::vector<int> positions) {
  // rectangular only makes sense without a causal mask (one query against many keys)
  if (scores.rows() != scores.cols() && mask == Mask::causal)
    throw Error("softmax_attention: causal score matrix must be square");
  if (positions.empty()) positions = iota_positions(scores.rows());
  if (static_cast<Eigen::Index>(positions.size()) != scores.rows())
    throw Error("softmax_attention: position count does not match matrix size");

  AttentionMatrix a;
  a.query_positions = positions;
  a.key_positions = scores.rows() == scores.cols() ? positions : iota_positions(scores.cols());
  a.query_tokens = a.query_positions;
  a.key_tokens = a.key_positions;
  a.scores = scores;
  a.mask = mask;
  a.weights = masked_row_softmax(scores, [&](Eigen::Index i, Eigen::Index j) { return a.admissible(i, j); });
  a.zero_rows.assign(static_cast<std::size_t>(scores.rows()), false);
  return a;
}

std::vector<AttentionMatrix> head_attention(const HeadTensors& h, Mask mask) {
  std::vector<AttentionMatrix> out;
  const auto n_q = static_cast<int>(h.num_queries());
  for (const auto& s : sequence_slices(h)) {
    const auto n = static_cast<Eigen::Index>(s.positions.size());
    Matrix q(n, h.dim()), k(n, h.dim());
    for (Eigen::Index i = 0; i < n; ++i) {
      q.row(i) = h.queries.row(s.query_rows[i]);
      k.row(i) = h.keys.row(s.key_rows[i]);
    }
    auto a = softmax_attention(raw_scores(q, k, h.dim()), mask, s.positions);
    a.sequence_id = s.sequence_id;
    for (Eigen::Index i = 0; i < n; ++i) {
      a.query_tokens[i] = static_cast<int>(s.query_rows[i]);
      a.key_tokens[i] = n_q + static_cast<int>(s.key_rows[i]);
    }
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

AttentionEdge make_edge(const AttentionMatrix& a, Eigen::Index i, Eigen::Index j) {
  return {a.query_tokens[i], a.key_tokens[j], a.query_positions[i], a.key_positions[j], a.weights(i, j), false};
}

}  // namespace

std::vector<AttentionEdge> top_k_edges(const AttentionMatrix& a, int k) {
  if (k < 1) throw Error("top_k_edges: k must be at least 1");
  std::vector<AttentionEdge> out;
  std::vector<Eigen::Index> cols;
  for (Eigen::Index i = 0; i < a.num_queries(); ++i) {
    cols.clear();
    for (Eigen::Index j = 0; j < a.num_keys(); ++j)
      if (a.admissible(i, j) && a.weights(i, j) > 0.0) cols.push_back(j);
    const auto take = std::min<std::size_t>(cols.size(), static_cast<std::size_t>(k));
    std::partial_sort(cols.begin(), cols.begin() + static_cast<std::ptrdiff_t>(take), cols.end(),
                      [&](Eigen::Index x, Eigen::Index y) {
                        if (a.weights(i, x) != a.weights(i, y)) return a.weights(i, x) > a.weights(i, y);
                        return a.key_positions[x] < a.key_positions[y];
                      });
    for (std::size_t t = 0; t < take; ++t) out.push_back(make_edge(a, i, cols[t]));
  }
  return out;
}

AttentionMatrix renormalize_hidden(const AttentionMatrix& a, const std::set<int>& hidden_keys,
                                   const std::set<int>& hidden_queries) {
  std::vector<Eigen::Index> keep;
  for (Eigen::Index i = 0; i < a.num_queries(); ++i)
    if (!hidden_queries.contains(a.query_positions[i])) keep.push_back(i);

  AttentionMatrix out;
  out.sequence_id = a.sequence_id;
  out.key_positions = a.key_positions;
  out.key_tokens = a.key_tokens;
  out.mask = a.mask;
  const auto n = static_cast<Eigen::Index>(keep.size());
  out.scores.resize(n, a.num_keys());
  out.weights.resize(n, a.num_keys());
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto i = keep[r];
    out.query_positions.push_back(a.query_positions[i]);
    out.query_tokens.push_back(a.query_tokens[i]);
    out.scores.row(r) = a.scores.row(i);
    out.weights.row(r) = a.weights.row(i);
    bool flagged = !a.zero_rows.empty() && a.zero_rows[i];

    bool lost_mass = false;
    for (Eigen::Index j = 0; j < a.num_keys(); ++j) {
      if (hidden_keys.contains(a.key_positions[j]) && out.weights(r, j) != 0.0) {
        out.weights(r, j) = 0.0;
        lost_mass = true;
      }
    }
    if (lost_mass) {
      const double mass = out.weights.row(r).sum();
      if (mass > 0.0) {
        out.weights.row(r) /= mass;
      } else {
        out.weights.row(r).setZero();
        flagged = true;
      }
    }
    out.zero_rows.push_back(flagged);
  }
  return out;
}

AggregatePattern aggregate_pattern(const std::vector<AttentionMatrix>& sequences, int max_len) {
  if (sequences.empty()) throw Error("aggregate_pattern: at least one sequence is required");
  if (max_len < 1) throw Error("aggregate_pattern: max_len must be positive");
  AggregatePattern p{Matrix::Zero(max_len, max_len), Eigen::MatrixXi::Zero(max_len, max_len)};
  for (const auto& a : sequences) {
    for (Eigen::Index i = 0; i < a.num_queries(); ++i) {
      const int qp = a.query_positions[i];
      if (qp < 0 || qp >= max_len) continue;
      for (Eigen::Index j = 0; j < a.num_keys(); ++j) {
        const int kp = a.key_positions[j];
        if (kp < 0 || kp >= max_len) continue;
        p.mean(qp, kp) += a.weights(i, j);
        p.count(qp, kp) += 1;
      }
    }
  }
  for (Eigen::Index r = 0; r < max_len; ++r)
    for (Eigen::Index c = 0; c < max_len; ++c)
      if (p.count(r, c) > 0) p.mean(r, c) /= p.count(r, c);
  return p;
}

std::vector<AttentionEdge> image_edges(const AttentionMatrix& a, ImageEdgeMode mode, double threshold,
                                       std::optional<int> cls_key_position) {
  std::vector<AttentionEdge> out;
  auto emit = [&](Eigen::Index i, Eigen::Index j) {
    auto e = make_edge(a, i, j);
    e.to_cls = cls_key_position && a.key_positions[j] == *cls_key_position;
    out.push_back(e);
  };
  for (Eigen::Index i = 0; i < a.num_queries(); ++i) {
    if (mode == ImageEdgeMode::strongest) {
      Eigen::Index best = -1;
      for (Eigen::Index j = 0; j < a.num_keys(); ++j) {
        if (!a.admissible(i, j)) continue;
        if (best < 0 || a.weights(i, j) > a.weights(i, best) ||
            (a.weights(i, j) == a.weights(i, best) && a.key_positions[j] < a.key_positions[best]))
          best = j;
      }
      if (best >= 0 && a.weights(i, best) > 0.0) emit(i, best);
    } else {
      for (Eigen::Index j = 0; j < a.num_keys(); ++j)
        if (a.admissible(i, j) && a.weights(i, j) > threshold) emit(i, j);
    }
  }
  return out;
}

}  // namespace attnatlas

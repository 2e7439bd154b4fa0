#include "attnatlas/core.hpp"

#include <map>
#include <set>
#include <sstream>
#include <tuple>

namespace attnatlas {

std::string to_string(Modality m) { return m == Modality::text ? "text" : "image"; }

std::string to_string(AttentionDirection d) {
  return d == AttentionDirection::causal ? "causal" : "bidirectional";
}

std::string to_string(Role r) { return r == Role::query ? "query" : "key"; }

Modality modality_from_string(const std::string& s) {
  if (s == "text") return Modality::text;
  if (s == "image") return Modality::image;
  throw Error("unknown modality '" + s + "'");
}

AttentionDirection direction_from_string(const std::string& s) {
  if (s == "bidirectional") return AttentionDirection::bidirectional;
  if (s == "causal") return AttentionDirection::causal;
  throw Error("unknown attention_direction '" + s + "'");
}

Role role_from_string(const std::string& s) {
  if (s == "query") return Role::query;
  if (s == "key") return Role::key;
  throw Error("unknown role '" + s + "'");
}

std::vector<std::string> validate_model(const ModelDescriptor& m) {
  std::vector<std::string> out;
  if (m.num_layers < 1) out.push_back("num_layers must be positive");
  if (m.heads_per_layer < 1) out.push_back("heads_per_layer must be positive");
  if (m.head_dim < 1) out.push_back("head_dim must be positive");
  if (m.attention_direction == AttentionDirection::causal && m.modality != Modality::text)
    out.push_back("causal attention is only permitted for text models");
  return out;
}

std::vector<SequenceSlice> sequence_slices(const HeadTensors& h) {
  std::map<int, SequenceSlice> by_seq;
  std::map<int, std::map<int, std::pair<Eigen::Index, Eigen::Index>>> rows;
  const auto n_q = h.num_queries();
  for (std::size_t i = 0; i < h.tokens.size(); ++i) {
    const auto& t = h.tokens[i];
    auto& slot = rows[t.sequence_id][t.position];
    if (t.role == Role::query) {
      slot.first = static_cast<Eigen::Index>(i);
    } else {
      slot.second = static_cast<Eigen::Index>(i) - n_q;
    }
  }
  std::vector<SequenceSlice> out;
  out.reserve(rows.size());
  for (const auto& [sid, by_pos] : rows) {
    SequenceSlice s;
    s.sequence_id = sid;
    for (const auto& [pos, qk] : by_pos) {
      s.positions.push_back(pos);
      s.query_rows.push_back(qk.first);
      s.key_rows.push_back(qk.second);
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

template <typename Derived>
void check_finite(const Eigen::MatrixBase<Derived>& m, const char* what,
                  std::vector<std::string>& out) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (!std::isfinite(m(r, c))) {
        std::ostringstream os;
        os << what << " entry at row " << r << ", column " << c << " is not finite";
        out.push_back(os.str());
      }
    }
  }
}

}  // namespace

std::vector<std::string> validate_head(const HeadTensors& h, const ModelDescriptor& m) {
  std::vector<std::string> out;
  const std::string where = "head l" + std::to_string(h.layer) + "_h" + std::to_string(h.head) + ": ";
  auto fail = [&](const std::string& msg) { out.push_back(where + msg); };

  if (h.queries.cols() != h.keys.cols()) {
    fail("query dimension " + std::to_string(h.queries.cols()) + " differs from key dimension " +
         std::to_string(h.keys.cols()));
  } else if (h.queries.cols() != m.head_dim) {
    fail("vector dimension " + std::to_string(h.queries.cols()) + " does not match head_dim " +
         std::to_string(m.head_dim));
  }
  if (h.layer < 0 || h.layer >= m.num_layers || h.head < 0 || h.head >= m.heads_per_layer)
    fail("layer/head index outside the model descriptor");
  if (h.wq.has_value() != h.wk.has_value()) {
    fail("wq and wk must be both present or both absent");
  } else if (h.wq && (h.wq->rows() != h.wk->rows() || h.wq->cols() != h.wk->cols())) {
    fail("wq and wk shapes differ");
  }

  const auto n_q = h.num_queries();
  const auto n_total = static_cast<std::size_t>(n_q + h.num_keys());
  if (h.tokens.size() != n_total) {
    fail("token count " + std::to_string(h.tokens.size()) + " does not match row count " +
         std::to_string(n_total));
    return out;
  }

  {
    std::vector<std::string> bad;
    check_finite(h.queries, "query", bad);
    check_finite(h.keys, "key", bad);
    if (h.wq) {
      check_finite(*h.wq, "wq", bad);
      check_finite(*h.wk, "wk", bad);
    }
    for (auto& b : bad) fail(b);
  }

  std::set<std::tuple<int, int, Role>> seen;
  std::map<int, std::pair<std::set<int>, std::set<int>>> positions;
  for (std::size_t i = 0; i < h.tokens.size(); ++i) {
    const auto& t = h.tokens[i];
    const std::string tok = "token " + std::to_string(i) + ": ";
    const Role expected = static_cast<Eigen::Index>(i) < n_q ? Role::query : Role::key;
    if (t.token_id != static_cast<int>(i)) fail(tok + "token_id " + std::to_string(t.token_id) + " out of order");
    if (t.role != expected) fail(tok + "role " + to_string(t.role) + " does not match its row block");
    if (t.position < 0) fail(tok + "negative position");
    if (!(t.norm_prescale >= 0.0) || !std::isfinite(t.norm_prescale)) fail(tok + "norm_prescale must be finite and non-negative");
    if (!seen.insert({t.sequence_id, t.position, t.role}).second)
      fail(tok + "duplicate (sequence, position, role)");
    if (t.row.has_value() != t.col.has_value()) fail(tok + "row and col must be both present or both absent");
    if ((t.row && *t.row < 0) || (t.col && *t.col < 0)) fail(tok + "negative row/col");
    if (m.modality == Modality::text && t.row) fail(tok + "text token carries an image row/col");
    if (m.modality == Modality::image && !t.row && !t.is_special) fail(tok + "image patch lacks row/col");
    auto& [qpos, kpos] = positions[t.sequence_id];
    (t.role == Role::query ? qpos : kpos).insert(t.position);
  }
  for (const auto& [sid, qk] : positions) {
    if (qk.first != qk.second)
      fail("sequence " + std::to_string(sid) + ": query and key positions do not align");
  }
  return out;
}

void assign_prescale_norms(HeadTensors& h) {
  const auto n_q = h.num_queries();
  for (std::size_t i = 0; i < h.tokens.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    h.tokens[i].norm_prescale = r < n_q ? h.queries.row(r).norm() : h.keys.row(r - n_q).norm();
  }
}

}  // namespace attnatlas

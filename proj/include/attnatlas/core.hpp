#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace attnatlas {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// Raised for precondition violations and unrecoverable numeric failures.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

enum class Modality { text, image };
enum class AttentionDirection { bidirectional, causal };
enum class Role { query, key };
enum class Mask { none, causal };

std::string to_string(Modality m);
std::string to_string(AttentionDirection d);
std::string to_string(Role r);
Modality modality_from_string(const std::string& s);
AttentionDirection direction_from_string(const std::string& s);
Role role_from_string(const std::string& s);

inline Mask mask_for(AttentionDirection d) {
  return d == AttentionDirection::causal ? Mask::causal : Mask::none;
}

struct ModelDescriptor {
  std::string model_id;
  Modality modality = Modality::text;
  AttentionDirection attention_direction = AttentionDirection::bidirectional;
  int num_layers = 1;
  int heads_per_layer = 1;
  int head_dim = 1;

  int num_heads() const { return num_layers * heads_per_layer; }
};

/// Violations of the ModelDescriptor invariants; empty when valid.
std::vector<std::string> validate_model(const ModelDescriptor& m);

struct TokenRecord {
  int token_id = 0;
  int sequence_id = 0;
  int position = 0;
  Role role = Role::query;
  std::string display_text;
  std::optional<int> row;
  std::optional<int> col;
  std::optional<std::array<std::uint8_t, 3>> patch_rgb;
  std::optional<std::string> semantic_label;
  bool is_special = false;
  double norm_prescale = 0.0;

  bool operator==(const TokenRecord&) const = default;
};

/// Query/key vectors of one (layer, head). Queries own token ids 0..n_q-1,
/// keys own n_q..n_q+n_k-1.
struct HeadTensors {
  int layer = 0;
  int head = 0;
  Matrix queries;
  Matrix keys;
  std::vector<TokenRecord> tokens;
  std::optional<Matrix> wq;
  std::optional<Matrix> wk;

  Eigen::Index num_queries() const { return queries.rows(); }
  Eigen::Index num_keys() const { return keys.rows(); }
  Eigen::Index dim() const { return queries.cols(); }

  const TokenRecord& query_token(Eigen::Index row) const { return tokens[row]; }
  const TokenRecord& key_token(Eigen::Index row) const { return tokens[num_queries() + row]; }
};

/// The pair (v, c): keys are translated by v, queries scaled by c and keys by 1/c.
struct NormalizationParams {
  Vector translation;
  double scale = 1.0;
};

/// Query/key row indices of one sequence, ordered by position. Query and key
/// positions align one-to-one for valid heads.
struct SequenceSlice {
  int sequence_id = 0;
  std::vector<int> positions;
  std::vector<Eigen::Index> query_rows;
  std::vector<Eigen::Index> key_rows;
};

/// Groups a head's rows by sequence, in ascending sequence_id order.
std::vector<SequenceSlice> sequence_slices(const HeadTensors& h);

/// Returns every violated invariant; an empty list means the head is usable.
std::vector<std::string> validate_head(const HeadTensors& h, const ModelDescriptor& m);

/// Sets each token's norm_prescale to the L2 norm of its current vector.
void assign_prescale_norms(HeadTensors& h);

}  // namespace attnatlas

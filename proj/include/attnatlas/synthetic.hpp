#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "attnatlas/core.hpp"
#include "attnatlas/store.hpp"

namespace attnatlas {

/// Parameters of a generated export. Text sequences draw words from a small
/// fixed vocabulary so searches have repeated hits; image sequences are a
/// CLS token followed by grid x grid patches.
struct FixtureSpec {
  std::string model_id = "fixture";
  std::string dataset = "synthetic";
  Modality modality = Modality::text;
  AttentionDirection direction = AttentionDirection::bidirectional;
  int num_layers = 2;
  int heads_per_layer = 2;
  int head_dim = 4;
  int num_sequences = 3;
  int min_length = 5;
  int max_length = 8;
  int image_grid = 3;
  bool with_weights = false;
  /// Multiplies every query; 10 makes queries an order of magnitude longer than keys.
  double query_scale = 1.0;
  double key_offset = 0.0;
  std::uint64_t seed = 0;
};

ExportBundle make_fixture_bundle(const FixtureSpec& spec);

/// Words used for text fixtures, in vocabulary order.
const std::vector<std::string>& fixture_vocabulary();

/// Token table for sequences of the given lengths (positions 0..L-1), queries
/// first then keys. Text only; specials are left unset.
std::vector<TokenRecord> plain_tokens(const std::vector<int>& lengths);

/// Independent standard Gaussian queries and keys.
HeadTensors gaussian_head(const std::vector<int>& lengths, int d, std::uint64_t seed);

/// Unit-norm queries and keys arranged in antipodal pairs, so both centroids
/// are exactly zero and cosine distance is 1 - dot.
HeadTensors ideal_head(const std::vector<int>& lengths, int d, std::uint64_t seed);

}  // namespace attnatlas

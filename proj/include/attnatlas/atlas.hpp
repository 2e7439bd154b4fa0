#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnatlas/attention.hpp"
#include "attnatlas/diagnostics.hpp"
#include "attnatlas/project.hpp"
#include "attnatlas/store.hpp"

namespace attnatlas {

/// Atlas directory layout:
///   atlas.json                    committed last; model, config, per-file SHA-256
///   tokens.jsonl                  shared token table (norms live per head)
///   heads/l{L}_h{H}/head.json     params, diagnostics, sample, colors, projection metadata
///   heads/l{L}_h{H}/proj_{method}_{dim}d.bin   "PRJ1", u32 n, u32 dim, u32 0, f64 LE rows
///   heads/l{L}_h{H}/attention.bin "ATT1" per-sequence scores and weights, indexed
///   heads/l{L}_h{H}/done.json     completion marker with the head's file hashes
inline constexpr int kAtlasSchemaVersion = 1;

std::string head_dir_name(int layer, int head);
std::string projection_file_name(Method m, int dim);

void write_coords(const std::filesystem::path& path, const Matrix& coords);
Matrix read_coords(const std::filesystem::path& path);

void write_attention_file(const std::filesystem::path& path, const std::vector<AttentionMatrix>& seqs);
/// Sequence ids stored in the file, in file order.
std::vector<int> attention_sequence_ids(const std::filesystem::path& path);
/// Reads one sequence without touching the rest of the file.
std::optional<AttentionMatrix> read_attention(const std::filesystem::path& path, int sequence_id);
std::vector<AttentionMatrix> read_all_attention(const std::filesystem::path& path);

nlohmann::json diagnostics_to_json(const HeadDiagnostics& d);
HeadDiagnostics diagnostics_from_json(const nlohmann::json& j);

struct StoredProjection {
  Method method = Method::pca;
  int dim = 2;
  ProjectionQuality quality;
  std::uint64_t seed = 0;
  std::vector<double> axis_variance;
  std::vector<std::string> flags;
  std::string file;
  Matrix coords;  // rows follow HeadArtifact::sampled_token_ids
};

struct HeadArtifact {
  int layer = 0;
  int head = 0;
  bool degraded = false;
  std::string degraded_reason;
  std::optional<NormalizationParams> params;
  std::optional<double> scale_objective;
  std::optional<HeadDiagnostics> diagnostics;
  std::vector<int> sampled_token_ids;
  std::vector<int> kept_sequences;
  bool sample_over_cap = false;
  std::vector<double> norms;  // norm_prescale of every token in the atlas table
  std::vector<ColorEncoding> colors;  // over sampled tokens
  std::vector<StoredProjection> projections;
  bool has_attention = false;
  std::filesystem::path dir;

  const StoredProjection* projection(Method m, int dim) const;
};

/// head.json body; projection coordinates are not included.
nlohmann::json head_to_json(const HeadArtifact& h);
HeadArtifact head_from_json(const nlohmann::json& j);

struct Atlas {
  std::filesystem::path dir;
  std::string id;
  ModelDescriptor model;
  std::string dataset;
  std::vector<SequenceInfo> sequences;
  nlohmann::json exporter;
  nlohmann::json config;
  std::vector<Method> methods;
  std::vector<int> dims;
  std::uint64_t seed = 0;
  std::vector<TokenRecord> tokens;
  std::vector<HeadArtifact> heads;

  const HeadArtifact* find_head(int layer, int head) const;
  /// Token table with a head's norms filled in.
  std::vector<TokenRecord> head_tokens(const HeadArtifact& h) const;
};

/// Files whose SHA-256 differs from atlas.json (or that are missing); empty when intact.
std::vector<std::string> verify_atlas(const std::filesystem::path& dir);

/// Loads atlas.json and every head's metadata and coordinates. Throws Error on
/// a missing or unreadable atlas, and when verification finds corrupt files.
Atlas load_atlas(const std::filesystem::path& dir, bool verify_hashes = true);

}  // namespace attnatlas

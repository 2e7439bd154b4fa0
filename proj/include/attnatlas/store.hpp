#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnatlas/core.hpp"

namespace attnatlas {

inline constexpr int kSchemaVersion = 1;

struct SequenceInfo {
  int sequence_id = 0;
  int length = 0;
  std::string text;
  std::optional<std::string> image;

  bool operator==(const SequenceInfo&) const = default;
};

/// In-memory form of an export directory:
///   manifest.json      schema_version, model descriptor, dataset, sequences, heads
///   tokens.jsonl       one TokenRecord per line, token_id order (shared by all heads)
///   l{L}_h{H}.qk       "QKV1", u32 n_q, u32 n_k, u32 d, then f32 LE queries then keys
///   l{L}_h{H}.w        optional, same layout holding wq then wk
struct ExportBundle {
  ModelDescriptor model;
  std::string dataset;
  std::vector<SequenceInfo> sequences;
  std::vector<HeadTensors> heads;
  nlohmann::json exporter = nlohmann::json::object();
};

/// Raw contents of one .qk / .w file.
struct TensorBlock {
  std::uint32_t rows_a = 0;
  std::uint32_t rows_b = 0;
  std::uint32_t cols = 0;
  Matrix a;
  Matrix b;
};

std::string tensor_file_name(int layer, int head);
std::string weights_file_name(int layer, int head);

void write_tensor_block(const std::filesystem::path& path, const Matrix& a, const Matrix& b);
/// Throws Error naming the file on any size/magic mismatch.
TensorBlock read_tensor_block(const std::filesystem::path& path);

nlohmann::json token_to_json(const TokenRecord& t);
TokenRecord token_from_json(const nlohmann::json& j);
nlohmann::json model_to_json(const ModelDescriptor& m);
ModelDescriptor model_from_json(const nlohmann::json& j);

/// Writes an export directory. Every head must share the token table of the first.
void write_bundle(const ExportBundle& bundle, const std::filesystem::path& dir);

struct IngestResult {
  std::optional<ExportBundle> bundle;
  std::vector<std::string> violations;
  /// The directory or its manifest could not be read at all.
  bool io_failure = false;

  bool ok() const { return bundle.has_value() && violations.empty() && !io_failure; }
};

/// Loads and validates an export directory; reals are widened to double and
/// norm_prescale is taken from the exported vectors.
IngestResult ingest(const std::filesystem::path& dir);

enum class ColorScheme { token_type, norm, position_normalized, position_discrete, image_row, image_col, patch_rgb };

std::string to_string(ColorScheme s);
ColorScheme color_scheme_from_string(const std::string& s);
std::vector<ColorScheme> color_schemes_for(Modality m);

/// Per-token scalar or category index for one scheme. Categories that do not
/// apply to a token (e.g. the row of a CLS token) are -1.
struct ColorEncoding {
  ColorScheme scheme = ColorScheme::token_type;
  std::vector<double> values;
  /// position_discrete only: true for queries, which use the darker hue.
  std::vector<bool> query_dark;
};

std::vector<ColorEncoding> encode_colors(const std::vector<TokenRecord>& tokens, const std::vector<SequenceInfo>& sequences,
                                         Modality modality);

struct SampledHead {
  HeadTensors head;
  /// Token id in the source head of every token kept, in new token_id order.
  std::vector<int> source_token_ids;
  std::vector<int> kept_sequences;
  /// Set when even one sequence exceeded the cap.
  bool over_cap = false;
};

/// Keeps whole sequences, drawn in seeded random order, until the next one
/// would push the token count over `cap`.
SampledHead sample_cap(const HeadTensors& h, int cap = 4000, std::uint64_t seed = 0);

}  // namespace attnatlas

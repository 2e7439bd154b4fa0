#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnatlas/atlas.hpp"
#include "attnatlas/normalize.hpp"
#include "attnatlas/project.hpp"
#include "attnatlas/store.hpp"

namespace attnatlas {

struct PrecomputeConfig {
  std::vector<Method> methods{Method::pca};
  std::vector<int> dims{2};
  std::uint64_t seed = 0;
  int sample_cap = 4000;
  ScaleSearchConfig scale;
  int tsne_iterations = 1000;
  int umap_epochs = 200;
  int umap_neighbors = 15;

  // Execution only; these do not change the artifacts.
  int jobs = 1;
  /// Stop after this many heads have been computed in this run.
  std::optional<int> max_new_heads;
  /// Polled before each head starts; returning true stops the run.
  std::function<bool()> should_stop;
  std::function<void(const std::string&)> progress;
};

/// The fields of a config that determine the atlas contents.
nlohmann::json config_to_json(const PrecomputeConfig& cfg);

/// Seed for one head's projections, derived from the atlas seed.
std::uint64_t head_seed(std::uint64_t seed, int layer, int head);

struct PrecomputeReport {
  int computed = 0;
  int reused = 0;
  int degraded = 0;
  /// atlas.json was committed.
  bool complete = false;
  /// The atlas was already complete for this bundle and config; nothing was written.
  bool noop = false;
};

/// Builds (or resumes) an atlas directory. Each head is written to its own
/// directory and sealed with a done.json marker; atlas.json is committed by an
/// atomic rename once every head is sealed. Heads whose processing throws are
/// recorded as degraded.
PrecomputeReport precompute(const ExportBundle& bundle, const std::filesystem::path& out, const PrecomputeConfig& cfg);

/// Processes one head in memory; the artifact carries coordinates but no paths.
HeadArtifact compute_head(const ExportBundle& bundle, const HeadTensors& h, const PrecomputeConfig& cfg,
                          std::vector<AttentionMatrix>* attention);

}  // namespace attnatlas

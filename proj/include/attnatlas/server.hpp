#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "attnatlas/atlas.hpp"

namespace httplib {
class Server;
}

namespace attnatlas {

enum class MatchMode { exact, prefix, substring };

std::string to_string(MatchMode m);
MatchMode match_mode_from_string(const std::string& s);
/// Case-sensitive.
bool token_matches(const std::string& text, const std::string& query, MatchMode mode);

struct ApiResponse {
  int status = 200;
  nlohmann::json body;
};

using QueryParams = std::map<std::string, std::string>;

/// Read-only view over loaded atlases. Every method is const and safe to call
/// from concurrent request handlers.
class AtlasService {
public:
  AtlasService() = default;
  explicit AtlasService(std::vector<Atlas> atlases);

  /// Loads every atlas under `data_dir` (and `data_dir` itself if it is one).
  /// Atlases that fail to load or verify are skipped and described in `errors`.
  static AtlasService load_dir(const std::filesystem::path& data_dir, std::vector<std::string>* errors = nullptr);

  const std::vector<Atlas>& atlases() const { return atlases_; }

  ApiResponse models() const;
  ApiResponse matrix(const std::string& model, const QueryParams& q) const;
  ApiResponse head(const std::string& model, int layer, int head, const QueryParams& q) const;
  ApiResponse attention(const std::string& model, int sequence_id, int layer, int head, const QueryParams& q) const;
  ApiResponse search(const std::string& model, const QueryParams& q) const;
  ApiResponse diagnostics(const std::string& model) const;

  /// Routes a GET path such as /models/x/heads/0/1.
  ApiResponse handle(const std::string& path, const QueryParams& q) const;

  /// Points per Matrix View panel.
  static constexpr int kPanelPoints = 1000;

private:
  const Atlas* find(const std::string& id) const;
  std::vector<Atlas> atlases_;
};

void mount_routes(httplib::Server& server, const AtlasService& service, const std::optional<std::string>& cors_origin);

struct ServeOptions {
  std::filesystem::path data_dir;
  std::string host = "0.0.0.0";
  int port = 8470;
  std::optional<std::string> cors_origin;
};

/// Blocks until the server stops. Returns a process exit code.
int serve(const ServeOptions& opt);

}  // namespace attnatlas

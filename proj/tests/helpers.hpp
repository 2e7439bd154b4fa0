#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "attnatlas/core.hpp"
#include "attnatlas/synthetic.hpp"

namespace testutil {

// Fresh directory under the system temp dir; removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("attnatlas_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
  std::filesystem::path path_;
};

inline attnatlas::Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  attnatlas::Matrix m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = n(rng);
  return m;
}

inline attnatlas::ModelDescriptor model_for(const attnatlas::HeadTensors& h,
                                            attnatlas::AttentionDirection dir = attnatlas::AttentionDirection::bidirectional) {
  attnatlas::ModelDescriptor m;
  m.model_id = "t";
  m.attention_direction = dir;
  m.head_dim = static_cast<int>(h.dim());
  return m;
}

}  // namespace testutil

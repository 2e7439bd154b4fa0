#include "attnatlas/pipeline.hpp"

#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "attnatlas/diagnostics.hpp"
#include "attnatlas/hash.hpp"

namespace attnatlas {

namespace fs = std::filesystem;
using nlohmann::json;

json config_to_json(const PrecomputeConfig& cfg) {
  std::vector<std::string> methods;
  for (auto m : cfg.methods) methods.push_back(to_string(m));
  return {{"methods", methods},
          {"dims", cfg.dims},
          {"seed", cfg.seed},
          {"sample_cap", cfg.sample_cap},
          {"scale_grid", {cfg.scale.grid_min_log2, cfg.scale.grid_max_log2, cfg.scale.grid_points}},
          {"tsne_iterations", cfg.tsne_iterations},
          {"umap_epochs", cfg.umap_epochs},
          {"umap_neighbors", cfg.umap_neighbors}};
}

std::uint64_t head_seed(std::uint64_t seed, int layer, int head) {
  // splitmix64 over the seed and the head's coordinates
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (1 + (static_cast<std::uint64_t>(layer) << 20) +
                                                     static_cast<std::uint64_t>(head));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

namespace {

void append_matrix(std::string& buf, const Matrix& m) {
  buf.append(std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ":");
  buf.append(reinterpret_cast<const char*>(m.data()), static_cast<std::size_t>(m.size()) * sizeof(double));
}

std::string bundle_digest(const ExportBundle& b) {
  std::string buf = model_to_json(b.model).dump() + b.dataset;
  for (const auto& s : b.sequences) buf += std::to_string(s.sequence_id) + ":" + std::to_string(s.length) + ":" + s.text;
  for (const auto& h : b.heads) {
    buf += "head " + std::to_string(h.layer) + "," + std::to_string(h.head);
    append_matrix(buf, h.queries);
    append_matrix(buf, h.keys);
    if (h.wq) append_matrix(buf, *h.wq);
    if (h.wk) append_matrix(buf, *h.wk);
  }
  if (!b.heads.empty())
    for (const auto& t : b.heads.front().tokens) buf += token_to_json(t).dump();
  return sha256_hex(buf);
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
  if (!out) throw Error("short write to " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A head directory counts as done when its marker matches the fingerprint and
// every file it lists still hashes the same.
std::optional<json> sealed_marker(const fs::path& hdir, const std::string& fingerprint) {
  const auto marker = hdir / "done.json";
  if (!fs::is_regular_file(marker)) return std::nullopt;
  try {
    auto j = json::parse(read_text(marker));
    if (j.at("fingerprint").get<std::string>() != fingerprint) return std::nullopt;
    for (const auto& [name, digest] : j.at("files").items()) {
      if (!fs::is_regular_file(hdir / name) || sha256_file(hdir / name) != digest.get<std::string>()) return std::nullopt;
    }
    return j;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

}  // namespace

HeadArtifact compute_head(const ExportBundle& bundle, const HeadTensors& h, const PrecomputeConfig& cfg,
                          std::vector<AttentionMatrix>* attention) {
  HeadArtifact a;
  a.layer = h.layer;
  a.head = h.head;
  for (const auto& t : h.tokens) a.norms.push_back(t.norm_prescale);
  const auto direction = bundle.model.attention_direction;

  std::vector<AttentionMatrix> attn;
  try {
    attn = head_attention(h, mask_for(direction));
    a.has_attention = true;
  } catch (const Error&) {
    a.has_attention = false;
  }

  try {
    const Vector v = key_translation(h);
    const auto search = search_scale_detailed(h, v, cfg.scale, direction);
    a.params = search.params;
    a.scale_objective = search.objective;

    HeadDiagnostics d;
    d.layer = h.layer;
    d.head = h.head;
    d.spearman_dist_dot = head_distance_attention_correlation(h, search.params, direction);
    d.mean_norm_diff = norm_disparity(h);
    if (h.wq && h.wk) d.wqwk_correlation = wqwk_redundancy(*h.wq, *h.wk);
    if (!a.has_attention) throw Error("attention could not be computed");
    d.first_token_attention_mass = null_attention_fraction(attn);
    d.chosen_scale = search.params.scale;
    d.scale_objective = search.objective;
    a.diagnostics = d;

    // projections see only the capped sample; diagnostics above used every pair
    const auto sample = sample_cap(h, cfg.sample_cap, cfg.seed);
    a.sampled_token_ids = sample.source_token_ids;
    a.kept_sequences = sample.kept_sequences;
    a.sample_over_cap = sample.over_cap;
    const auto normalized = apply_normalization(sample.head, search.params);
    Matrix pts(normalized.num_queries() + normalized.num_keys(), normalized.dim());
    pts << normalized.queries, normalized.keys;
    a.colors = encode_colors(sample.head.tokens, bundle.sequences, bundle.model.modality);

    const CondensedDistances cosine = pairwise_cosine(pts);
    const auto n = pts.rows();
    const int trust_k = static_cast<int>(std::min<Eigen::Index>(10, std::max<Eigen::Index>(1, (n - 2) / 3)));
    const std::uint64_t seed = head_seed(cfg.seed, h.layer, h.head);
    for (auto method : cfg.methods) {
      for (int dim : cfg.dims) {
        ProjectionResult r;
        switch (method) {
          case Method::pca: r = pca_project(pts, dim); break;
          case Method::tsne: {
            TsneOptions o;
            o.dim = dim;
            o.iterations = cfg.tsne_iterations;
            o.seed = seed;
            r = tsne_project(cosine, o);
            break;
          }
          case Method::umap: {
            UmapOptions o;
            o.dim = dim;
            o.epochs = cfg.umap_epochs;
            o.n_neighbors = cfg.umap_neighbors;
            o.seed = seed;
            r = umap_project(cosine, o);
            break;
          }
        }
        r.quality.trustworthiness_k10 = n > 3 ? trustworthiness(cosine, r.coords, trust_k) : 1.0;
        if (trust_k != 10) r.flags.push_back("trustworthiness uses k=" + std::to_string(trust_k));
        StoredProjection p;
        p.method = method;
        p.dim = dim;
        p.quality = r.quality;
        p.seed = method == Method::pca ? 0 : seed;
        p.axis_variance = r.axis_variance;
        p.flags = r.flags;
        p.file = projection_file_name(method, dim);
        p.coords = std::move(r.coords);
        a.projections.push_back(std::move(p));
      }
    }
  } catch (const std::exception& e) {
    HeadArtifact degraded;
    degraded.layer = a.layer;
    degraded.head = a.head;
    degraded.norms = std::move(a.norms);
    degraded.has_attention = a.has_attention;
    degraded.degraded = true;
    degraded.degraded_reason = e.what();
    a = std::move(degraded);
  }
  if (attention) *attention = a.has_attention ? std::move(attn) : std::vector<AttentionMatrix>{};
  return a;
}

PrecomputeReport precompute(const ExportBundle& bundle, const fs::path& out, const PrecomputeConfig& cfg) {
  if (cfg.methods.empty() || cfg.dims.empty()) throw Error("precompute: at least one method and one dim are required");
  for (int d : cfg.dims)
    if (d != 2 && d != 3) throw Error("precompute: dims must be 2 or 3");
  for (const auto& msg : validate_model(bundle.model)) throw Error("precompute: " + msg);

  PrecomputeReport report;
  const json config = config_to_json(cfg);
  const std::string fingerprint = sha256_hex(config.dump() + bundle_digest(bundle));
  const auto manifest_path = out / "atlas.json";

  if (fs::is_regular_file(manifest_path)) {
    try {
      const auto j = json::parse(read_text(manifest_path));
      if (j.at("fingerprint").get<std::string>() == fingerprint && verify_atlas(out).empty()) {
        report.noop = true;
        report.complete = true;
        report.reused = static_cast<int>(bundle.heads.size());
        return report;
      }
    } catch (const std::exception&) {
    }
    fs::remove(manifest_path);
  }
  fs::create_directories(out / "heads");

  {
    std::string tokens;
    if (!bundle.heads.empty())
      for (const auto& t : bundle.heads.front().tokens) tokens += token_to_json(t).dump() + "\n";
    write_text(out / "tokens.jsonl", tokens);
  }

  std::vector<const HeadTensors*> pending;
  for (std::size_t i = 0; i < bundle.heads.size(); ++i) {
    const auto& h = bundle.heads[i];
    if (auto m = sealed_marker(out / "heads" / head_dir_name(h.layer, h.head), fingerprint)) {
      ++report.reused;
      if (m->value("status", "ok") == "degraded") ++report.degraded;
    } else {
      pending.push_back(&h);
    }
  }

  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<int> started{0};
  std::atomic<bool> stopped{false};
  std::exception_ptr failure;
  const int total = static_cast<int>(bundle.heads.size());

  auto worker = [&] {
    while (!stopped) {
      if (cfg.should_stop && cfg.should_stop()) {
        stopped = true;
        break;
      }
      if (cfg.max_new_heads && started.fetch_add(1) >= *cfg.max_new_heads) {
        stopped = true;
        break;
      }
      const auto idx = next.fetch_add(1);
      if (idx >= pending.size()) break;
      const HeadTensors& h = *pending[idx];
      try {
        std::vector<AttentionMatrix> attn;
        const HeadArtifact a = compute_head(bundle, h, cfg, &attn);
        const auto hdir = out / "heads" / head_dir_name(h.layer, h.head);
        fs::remove_all(hdir);
        fs::create_directories(hdir);
        json files = json::object();
        for (const auto& p : a.projections) {
          write_coords(hdir / p.file, p.coords);
          files[p.file] = sha256_file(hdir / p.file);
        }
        if (a.has_attention) {
          write_attention_file(hdir / "attention.bin", attn);
          files["attention.bin"] = sha256_file(hdir / "attention.bin");
        }
        write_text(hdir / "head.json", head_to_json(a).dump(1) + "\n");
        files["head.json"] = sha256_file(hdir / "head.json");
        write_text(hdir / "done.json",
                   json{{"fingerprint", fingerprint}, {"status", a.degraded ? "degraded" : "ok"}, {"files", files}}.dump(1) +
                       "\n");

        std::lock_guard lock(mu);
        ++report.computed;
        if (a.degraded) ++report.degraded;
        if (cfg.progress) {
          std::string msg = "[" + std::to_string(report.computed + report.reused) + "/" + std::to_string(total) + "] " +
                            head_dir_name(h.layer, h.head) + (a.degraded ? " degraded: " + a.degraded_reason : " ok");
          cfg.progress(msg);
        }
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        stopped = true;
      }
    }
  };

  const int jobs = std::max(1, std::min<int>(cfg.jobs, static_cast<int>(std::max<std::size_t>(pending.size(), 1))));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  if (report.computed + report.reused < total) return report;

  // every head is sealed: commit the manifest
  json manifest;
  manifest["schema_version"] = kAtlasSchemaVersion;
  manifest["model"] = model_to_json(bundle.model);
  manifest["dataset"] = bundle.dataset;
  json seqs = json::array();
  for (const auto& s : bundle.sequences)
    seqs.push_back({{"sequence_id", s.sequence_id},
                    {"length", s.length},
                    {"text", s.text},
                    {"image", s.image ? json(*s.image) : json(nullptr)}});
  manifest["sequences"] = seqs;
  manifest["exporter"] = bundle.exporter;
  manifest["config"] = config;
  manifest["fingerprint"] = fingerprint;
  json files = json::object();
  files["tokens.jsonl"] = sha256_file(out / "tokens.jsonl");
  json heads = json::array();
  for (const auto& h : bundle.heads) {
    const auto name = head_dir_name(h.layer, h.head);
    const auto marker = json::parse(read_text(out / "heads" / name / "done.json"));
    for (const auto& [file, digest] : marker.at("files").items()) files["heads/" + name + "/" + file] = digest;
    heads.push_back({{"layer", h.layer}, {"head", h.head}, {"dir", name}, {"status", marker.at("status")}});
  }
  manifest["heads"] = heads;
  manifest["files"] = files;
  const auto tmp = out / "atlas.json.tmp";
  write_text(tmp, manifest.dump(1) + "\n");
  fs::rename(tmp, manifest_path);
  report.complete = true;
  return report;
}

}  // namespace attnatlas

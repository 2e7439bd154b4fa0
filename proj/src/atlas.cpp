#include "attnatlas/atlas.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "attnatlas/hash.hpp"

namespace attnatlas {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Writer {
public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const char* p, std::size_t n) { buf_.append(p, n); }
  void patch_u64(std::size_t at, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[at + i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  std::size_t size() const { return buf_.size(); }
  void save(const fs::path& p) const {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + p.string());
    out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error("short write to " + p.string());
  }

private:
  std::string buf_;
};

class Reader {
public:
  Reader(std::string data, std::string name) : data_(std::move(data)), name_(std::move(name)) {}

  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw Error(name_ + ": truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  void magic(const char* m) {
    need(4);
    if (std::memcmp(data_.data() + pos_, m, 4) != 0) throw Error(name_ + ": bad magic (expected " + std::string(m, 4) + ")");
    pos_ += 4;
  }
  void seek(std::size_t p) {
    if (p > data_.size()) throw Error(name_ + ": offset out of range");
    pos_ = p;
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(data_[pos_++]);
  }

private:
  std::string data_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

AttentionMatrix read_record(Reader& r) {
  AttentionMatrix a;
  a.sequence_id = r.i32();
  const auto nq = r.u32(), nk = r.u32();
  a.mask = r.u32() == 1 ? Mask::causal : Mask::none;
  for (std::uint32_t i = 0; i < nq; ++i) a.query_positions.push_back(r.i32());
  for (std::uint32_t i = 0; i < nk; ++i) a.key_positions.push_back(r.i32());
  for (std::uint32_t i = 0; i < nq; ++i) a.query_tokens.push_back(r.i32());
  for (std::uint32_t i = 0; i < nk; ++i) a.key_tokens.push_back(r.i32());
  a.scores.resize(nq, nk);
  a.weights.resize(nq, nk);
  for (Matrix* m : {&a.scores, &a.weights})
    for (std::uint32_t i = 0; i < nq; ++i)
      for (std::uint32_t j = 0; j < nk; ++j) (*m)(i, j) = r.f64();
  a.zero_rows.resize(nq);
  for (std::uint32_t i = 0; i < nq; ++i) a.zero_rows[i] = r.u8() != 0;
  return a;
}

}  // namespace

std::string head_dir_name(int layer, int head) {
  return "l" + std::to_string(layer) + "_h" + std::to_string(head);
}

std::string projection_file_name(Method m, int dim) {
  return "proj_" + to_string(m) + "_" + std::to_string(dim) + "d.bin";
}

void write_coords(const fs::path& path, const Matrix& coords) {
  Writer w;
  w.bytes("PRJ1", 4);
  w.u32(static_cast<std::uint32_t>(coords.rows()));
  w.u32(static_cast<std::uint32_t>(coords.cols()));
  w.u32(0);
  for (Eigen::Index i = 0; i < coords.rows(); ++i)
    for (Eigen::Index j = 0; j < coords.cols(); ++j) w.f64(coords(i, j));
  w.save(path);
}

Matrix read_coords(const fs::path& path) {
  Reader r(slurp(path), path.filename().string());
  r.magic("PRJ1");
  const auto n = r.u32(), dim = r.u32();
  r.u32();
  Matrix m(n, dim);
  for (std::uint32_t i = 0; i < n; ++i)
    for (std::uint32_t j = 0; j < dim; ++j) m(i, j) = r.f64();
  return m;
}

// "ATT1", u32 count, u64 0; index of (i32 sequence_id, u32 0, u64 offset);
// then per sequence: i32 id, u32 n_q, u32 n_k, u32 mask, positions and token
// ids (i32), scores and weights (f64, row-major), zero-row flags (u8).
void write_attention_file(const fs::path& path, const std::vector<AttentionMatrix>& seqs) {
  Writer w;
  w.bytes("ATT1", 4);
  w.u32(static_cast<std::uint32_t>(seqs.size()));
  w.u64(0);
  std::vector<std::size_t> slots;
  for (const auto& a : seqs) {
    w.i32(a.sequence_id);
    w.u32(0);
    slots.push_back(w.size());
    w.u64(0);
  }
  for (std::size_t s = 0; s < seqs.size(); ++s) {
    const auto& a = seqs[s];
    w.patch_u64(slots[s], w.size());
    w.i32(a.sequence_id);
    w.u32(static_cast<std::uint32_t>(a.num_queries()));
    w.u32(static_cast<std::uint32_t>(a.num_keys()));
    w.u32(a.mask == Mask::causal ? 1 : 0);
    for (int p : a.query_positions) w.i32(p);
    for (int p : a.key_positions) w.i32(p);
    for (int t : a.query_tokens) w.i32(t);
    for (int t : a.key_tokens) w.i32(t);
    for (const Matrix* m : {&a.scores, &a.weights})
      for (Eigen::Index i = 0; i < m->rows(); ++i)
        for (Eigen::Index j = 0; j < m->cols(); ++j) w.f64((*m)(i, j));
    for (Eigen::Index i = 0; i < a.num_queries(); ++i) {
      const char z = (!a.zero_rows.empty() && a.zero_rows[i]) ? 1 : 0;
      w.bytes(&z, 1);
    }
  }
  w.save(path);
}

namespace {

std::vector<std::pair<int, std::uint64_t>> read_index(Reader& r) {
  r.magic("ATT1");
  const auto count = r.u32();
  r.u64();
  std::vector<std::pair<int, std::uint64_t>> index;
  for (std::uint32_t s = 0; s < count; ++s) {
    const int sid = r.i32();
    r.u32();
    index.emplace_back(sid, r.u64());
  }
  return index;
}

}  // namespace

std::vector<int> attention_sequence_ids(const fs::path& path) {
  Reader r(slurp(path), path.filename().string());
  std::vector<int> ids;
  for (const auto& [sid, off] : read_index(r)) ids.push_back(sid);
  return ids;
}

std::optional<AttentionMatrix> read_attention(const fs::path& path, int sequence_id) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  const auto name = path.filename().string();
  const auto file_size = static_cast<std::uint64_t>(fs::file_size(path));
  auto chunk = [&](std::uint64_t off, std::uint64_t n) {
    if (off + n > file_size) throw Error(name + ": truncated");
    std::string buf(n, '\0');
    in.seekg(static_cast<std::streamoff>(off));
    in.read(buf.data(), static_cast<std::streamsize>(n));
    if (!in) throw Error(name + ": short read");
    return buf;
  };
  Reader head(chunk(0, 16), name);
  head.magic("ATT1");
  const std::uint64_t count = head.u32();
  Reader idx(std::string(16, '\0') + chunk(16, count * 16), name);
  idx.seek(16);
  std::vector<std::pair<int, std::uint64_t>> index;
  for (std::uint64_t s = 0; s < count; ++s) {
    const int sid = idx.i32();
    idx.u32();
    index.emplace_back(sid, idx.u64());
  }
  for (std::size_t s = 0; s < index.size(); ++s) {
    if (index[s].first != sequence_id) continue;
    const auto begin = index[s].second;
    const auto end = s + 1 < index.size() ? index[s + 1].second : file_size;
    if (end < begin) throw Error(name + ": corrupt index");
    Reader r(chunk(begin, end - begin), name);
    return read_record(r);
  }
  return std::nullopt;
}

std::vector<AttentionMatrix> read_all_attention(const fs::path& path) {
  Reader r(slurp(path), path.filename().string());
  std::vector<AttentionMatrix> out;
  for (const auto& [sid, off] : read_index(r)) {
    r.seek(off);
    out.push_back(read_record(r));
  }
  return out;
}

json diagnostics_to_json(const HeadDiagnostics& d) {
  return {{"layer", d.layer},
          {"head", d.head},
          {"spearman_dist_dot", d.spearman_dist_dot},
          {"mean_norm_diff", d.mean_norm_diff},
          {"wqwk_correlation", d.wqwk_correlation ? json(*d.wqwk_correlation) : json(nullptr)},
          {"first_token_attention_mass", d.first_token_attention_mass},
          {"chosen_scale", d.chosen_scale},
          {"scale_objective", d.scale_objective}};
}

HeadDiagnostics diagnostics_from_json(const json& j) {
  HeadDiagnostics d;
  d.layer = j.at("layer").get<int>();
  d.head = j.at("head").get<int>();
  d.spearman_dist_dot = j.at("spearman_dist_dot").get<double>();
  d.mean_norm_diff = j.at("mean_norm_diff").get<double>();
  if (!j.at("wqwk_correlation").is_null()) d.wqwk_correlation = j["wqwk_correlation"].get<double>();
  d.first_token_attention_mass = j.at("first_token_attention_mass").get<double>();
  d.chosen_scale = j.at("chosen_scale").get<double>();
  d.scale_objective = j.at("scale_objective").get<double>();
  return d;
}

const StoredProjection* HeadArtifact::projection(Method m, int dim) const {
  for (const auto& p : projections)
    if (p.method == m && p.dim == dim) return &p;
  return nullptr;
}

json head_to_json(const HeadArtifact& h) {
  json j;
  j["layer"] = h.layer;
  j["head"] = h.head;
  j["status"] = h.degraded ? "degraded" : "ok";
  j["reason"] = h.degraded_reason;
  if (h.params) {
    j["params"] = {{"translation", std::vector<double>(h.params->translation.begin(), h.params->translation.end())},
                   {"scale", h.params->scale}};
  } else {
    j["params"] = nullptr;
  }
  j["scale_objective"] = h.scale_objective ? json(*h.scale_objective) : json(nullptr);
  j["diagnostics"] = h.diagnostics ? diagnostics_to_json(*h.diagnostics) : json(nullptr);
  j["sample"] = {{"token_ids", h.sampled_token_ids}, {"sequences", h.kept_sequences}, {"over_cap", h.sample_over_cap}};
  j["norms"] = h.norms;
  json colors = json::array();
  for (const auto& c : h.colors) {
    json jc = {{"scheme", to_string(c.scheme)}, {"values", c.values}};
    if (!c.query_dark.empty()) jc["query_dark"] = std::vector<bool>(c.query_dark.begin(), c.query_dark.end());
    colors.push_back(jc);
  }
  j["colors"] = colors;
  json projs = json::array();
  for (const auto& p : h.projections) {
    projs.push_back({{"method", to_string(p.method)},
                     {"dim", p.dim},
                     {"file", p.file},
                     {"seed", p.seed},
                     {"quality",
                      {{"final_objective", p.quality.final_objective},
                       {"initial_objective", p.quality.initial_objective},
                       {"trustworthiness_k10", p.quality.trustworthiness_k10}}},
                     {"axis_variance", p.axis_variance},
                     {"flags", p.flags}});
  }
  j["projections"] = projs;
  j["attention"] = h.has_attention ? json("attention.bin") : json(nullptr);
  return j;
}

HeadArtifact head_from_json(const json& j) {
  HeadArtifact h;
  h.layer = j.at("layer").get<int>();
  h.head = j.at("head").get<int>();
  h.degraded = j.at("status").get<std::string>() == "degraded";
  h.degraded_reason = j.value("reason", std::string{});
  if (!j.at("params").is_null()) {
    const auto t = j["params"].at("translation").get<std::vector<double>>();
    NormalizationParams p;
    p.translation = Eigen::Map<const Vector>(t.data(), static_cast<Eigen::Index>(t.size()));
    p.scale = j["params"].at("scale").get<double>();
    h.params = p;
  }
  if (!j.at("scale_objective").is_null()) h.scale_objective = j["scale_objective"].get<double>();
  if (!j.at("diagnostics").is_null()) h.diagnostics = diagnostics_from_json(j["diagnostics"]);
  h.sampled_token_ids = j.at("sample").at("token_ids").get<std::vector<int>>();
  h.kept_sequences = j["sample"].at("sequences").get<std::vector<int>>();
  h.sample_over_cap = j["sample"].at("over_cap").get<bool>();
  h.norms = j.at("norms").get<std::vector<double>>();
  for (const auto& jc : j.at("colors")) {
    ColorEncoding c;
    c.scheme = color_scheme_from_string(jc.at("scheme").get<std::string>());
    c.values = jc.at("values").get<std::vector<double>>();
    if (jc.contains("query_dark")) {
      const auto qd = jc["query_dark"].get<std::vector<bool>>();
      c.query_dark.assign(qd.begin(), qd.end());
    }
    h.colors.push_back(std::move(c));
  }
  for (const auto& jp : j.at("projections")) {
    StoredProjection p;
    p.method = method_from_string(jp.at("method").get<std::string>());
    p.dim = jp.at("dim").get<int>();
    p.file = jp.at("file").get<std::string>();
    p.seed = jp.at("seed").get<std::uint64_t>();
    p.quality.final_objective = jp.at("quality").at("final_objective").get<double>();
    p.quality.initial_objective = jp["quality"].at("initial_objective").get<double>();
    p.quality.trustworthiness_k10 = jp["quality"].at("trustworthiness_k10").get<double>();
    p.axis_variance = jp.at("axis_variance").get<std::vector<double>>();
    p.flags = jp.at("flags").get<std::vector<std::string>>();
    h.projections.push_back(std::move(p));
  }
  h.has_attention = !j.at("attention").is_null();
  return h;
}

const HeadArtifact* Atlas::find_head(int layer, int head) const {
  for (const auto& h : heads)
    if (h.layer == layer && h.head == head) return &h;
  return nullptr;
}

std::vector<TokenRecord> Atlas::head_tokens(const HeadArtifact& h) const {
  auto out = tokens;
  for (std::size_t i = 0; i < out.size() && i < h.norms.size(); ++i) out[i].norm_prescale = h.norms[i];
  return out;
}

namespace {

json read_manifest(const fs::path& dir) {
  const auto p = dir / "atlas.json";
  if (!fs::is_regular_file(p)) throw Error(dir.string() + ": no atlas.json (not an atlas, or precompute unfinished)");
  try {
    return json::parse(slurp(p));
  } catch (const json::exception& e) {
    throw Error("atlas.json: unreadable JSON: " + std::string(e.what()));
  }
}

}  // namespace

std::vector<std::string> verify_atlas(const fs::path& dir) {
  const auto manifest = read_manifest(dir);
  std::vector<std::string> bad;
  for (const auto& [rel, digest] : manifest.at("files").items()) {
    const auto p = dir / rel;
    if (!fs::is_regular_file(p)) {
      bad.push_back(rel + ": missing");
      continue;
    }
    if (sha256_file(p) != digest.get<std::string>()) bad.push_back(rel + ": content hash mismatch");
  }
  return bad;
}

Atlas load_atlas(const fs::path& dir, bool verify_hashes) {
  const auto manifest = read_manifest(dir);
  if (manifest.value("schema_version", 0) != kAtlasSchemaVersion)
    throw Error("atlas.json: unsupported schema_version");
  if (verify_hashes) {
    const auto bad = verify_atlas(dir);
    if (!bad.empty()) {
      std::string msg = dir.filename().string() + ": corrupt atlas:";
      for (const auto& b : bad) msg += " " + b + ";";
      throw Error(msg);
    }
  }

  Atlas a;
  a.dir = dir;
  a.id = fs::absolute(dir).lexically_normal().filename().string();
  if (a.id.empty()) a.id = fs::absolute(dir).lexically_normal().parent_path().filename().string();
  try {
    a.model = model_from_json(manifest.at("model"));
    a.dataset = manifest.value("dataset", std::string{});
    for (const auto& js : manifest.at("sequences")) {
      SequenceInfo s;
      s.sequence_id = js.at("sequence_id").get<int>();
      s.length = js.value("length", 0);
      s.text = js.value("text", std::string{});
      if (js.contains("image") && !js["image"].is_null()) s.image = js["image"].get<std::string>();
      a.sequences.push_back(std::move(s));
    }
    a.exporter = manifest.value("exporter", json::object());
    a.config = manifest.at("config");
    for (const auto& m : a.config.at("methods")) a.methods.push_back(method_from_string(m.get<std::string>()));
    a.dims = a.config.at("dims").get<std::vector<int>>();
    a.seed = a.config.at("seed").get<std::uint64_t>();

    std::istringstream tok(slurp(dir / "tokens.jsonl"));
    std::string line;
    while (std::getline(tok, line))
      if (!line.empty()) a.tokens.push_back(token_from_json(json::parse(line)));

    for (const auto& jh : manifest.at("heads")) {
      const auto hdir = dir / "heads" / jh.at("dir").get<std::string>();
      auto h = head_from_json(json::parse(slurp(hdir / "head.json")));
      h.dir = hdir;
      for (auto& p : h.projections) p.coords = read_coords(hdir / p.file);
      a.heads.push_back(std::move(h));
    }
  } catch (const json::exception& e) {
    throw Error(dir.filename().string() + ": malformed atlas: " + e.what());
  }
  std::sort(a.heads.begin(), a.heads.end(), [](const HeadArtifact& x, const HeadArtifact& y) {
    return std::tie(x.layer, x.head) < std::tie(y.layer, y.head);
  });
  return a;
}

}  // namespace attnatlas

#include "attnatlas/store.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace attnatlas {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'Q', 'K', 'V', '1'};
constexpr std::size_t kHeaderBytes = 16;

void put_u32(std::string& buf, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_f32(std::string& buf, double v) {
  const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
  put_u32(buf, bits);
}

float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string tensor_file_name(int layer, int head) {
  return "l" + std::to_string(layer) + "_h" + std::to_string(head) + ".qk";
}

std::string weights_file_name(int layer, int head) {
  return "l" + std::to_string(layer) + "_h" + std::to_string(head) + ".w";
}

void write_tensor_block(const fs::path& path, const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw Error("write_tensor_block: column mismatch for " + path.string());
  std::string buf;
  buf.reserve(kHeaderBytes + 4 * static_cast<std::size_t>((a.size() + b.size())));
  buf.append(kMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(a.rows()));
  put_u32(buf, static_cast<std::uint32_t>(b.rows()));
  put_u32(buf, static_cast<std::uint32_t>(a.cols()));
  for (const Matrix* m : {&a, &b})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) put_f32(buf, (*m)(r, c));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

TensorBlock read_tensor_block(const fs::path& path) {
  const std::string raw = read_file(path);
  const auto name = path.filename().string();
  if (raw.size() < kHeaderBytes)
    throw Error(name + ": expected at least " + std::to_string(kHeaderBytes) + " header bytes, found " +
                std::to_string(raw.size()));
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (std::memcmp(p, kMagic, 4) != 0) throw Error(name + ": bad magic (expected QKV1)");
  TensorBlock t;
  t.rows_a = get_u32(p + 4);
  t.rows_b = get_u32(p + 8);
  t.cols = get_u32(p + 12);
  const std::size_t expected =
      kHeaderBytes + 4 * (static_cast<std::size_t>(t.rows_a) + t.rows_b) * static_cast<std::size_t>(t.cols);
  if (raw.size() != expected)
    throw Error(name + ": expected " + std::to_string(expected) + " bytes, found " + std::to_string(raw.size()));
  t.a.resize(t.rows_a, t.cols);
  t.b.resize(t.rows_b, t.cols);
  const unsigned char* cur = p + kHeaderBytes;
  for (Matrix* m : {&t.a, &t.b})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c, cur += 4) (*m)(r, c) = static_cast<double>(get_f32(cur));
  return t;
}

json token_to_json(const TokenRecord& t) {
  json j = {{"token_id", t.token_id},   {"sequence_id", t.sequence_id}, {"position", t.position},
            {"role", to_string(t.role)}, {"text", t.display_text},       {"special", t.is_special}};
  if (t.row) j["row"] = *t.row;
  if (t.col) j["col"] = *t.col;
  if (t.patch_rgb) j["rgb"] = {(*t.patch_rgb)[0], (*t.patch_rgb)[1], (*t.patch_rgb)[2]};
  if (t.semantic_label) j["label"] = *t.semantic_label;
  return j;
}

TokenRecord token_from_json(const json& j) {
  TokenRecord t;
  t.token_id = j.at("token_id").get<int>();
  t.sequence_id = j.at("sequence_id").get<int>();
  t.position = j.at("position").get<int>();
  t.role = role_from_string(j.at("role").get<std::string>());
  t.display_text = j.value("text", std::string{});
  t.is_special = j.value("special", false);
  if (j.contains("row") && !j["row"].is_null()) t.row = j["row"].get<int>();
  if (j.contains("col") && !j["col"].is_null()) t.col = j["col"].get<int>();
  if (j.contains("rgb") && !j["rgb"].is_null()) {
    const auto& c = j["rgb"];
    if (!c.is_array() || c.size() != 3) throw Error("rgb must be a 3-element array");
    t.patch_rgb = std::array<std::uint8_t, 3>{c[0].get<std::uint8_t>(), c[1].get<std::uint8_t>(), c[2].get<std::uint8_t>()};
  }
  if (j.contains("label") && !j["label"].is_null()) t.semantic_label = j["label"].get<std::string>();
  return t;
}

json model_to_json(const ModelDescriptor& m) {
  return {{"model_id", m.model_id},
          {"modality", to_string(m.modality)},
          {"attention_direction", to_string(m.attention_direction)},
          {"num_layers", m.num_layers},
          {"heads_per_layer", m.heads_per_layer},
          {"head_dim", m.head_dim}};
}

ModelDescriptor model_from_json(const json& j) {
  ModelDescriptor m;
  m.model_id = j.at("model_id").get<std::string>();
  m.modality = modality_from_string(j.at("modality").get<std::string>());
  m.attention_direction = direction_from_string(j.at("attention_direction").get<std::string>());
  m.num_layers = j.at("num_layers").get<int>();
  m.heads_per_layer = j.at("heads_per_layer").get<int>();
  m.head_dim = j.at("head_dim").get<int>();
  return m;
}

void write_bundle(const ExportBundle& bundle, const fs::path& dir) {
  fs::create_directories(dir);
  json manifest;
  manifest["schema_version"] = kSchemaVersion;
  manifest["model"] = model_to_json(bundle.model);
  manifest["dataset"] = bundle.dataset;
  manifest["exporter"] = bundle.exporter;
  json seqs = json::array();
  for (const auto& s : bundle.sequences) {
    json js = {{"sequence_id", s.sequence_id}, {"length", s.length}, {"text", s.text}};
    js["image"] = s.image ? json(*s.image) : json(nullptr);
    seqs.push_back(js);
  }
  manifest["sequences"] = seqs;

  json heads = json::array();
  for (const auto& h : bundle.heads) {
    if (!bundle.heads.empty() && h.tokens.size() != bundle.heads.front().tokens.size())
      throw Error("write_bundle: heads must share one token table");
    const auto file = tensor_file_name(h.layer, h.head);
    write_tensor_block(dir / file, h.queries, h.keys);
    json jh = {{"layer", h.layer}, {"head", h.head}, {"n_q", h.num_queries()}, {"n_k", h.num_keys()}, {"file", file}};
    if (h.wq && h.wk) {
      const auto wfile = weights_file_name(h.layer, h.head);
      write_tensor_block(dir / wfile, *h.wq, *h.wk);
      jh["weights_file"] = wfile;
    } else {
      jh["weights_file"] = nullptr;
    }
    heads.push_back(jh);
  }
  manifest["heads"] = heads;

  {
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << manifest.dump(2) << '\n';
  }
  std::ofstream tok(dir / "tokens.jsonl", std::ios::trunc);
  if (!bundle.heads.empty())
    for (const auto& t : bundle.heads.front().tokens) tok << token_to_json(t).dump() << '\n';
}

IngestResult ingest(const fs::path& dir) {
  IngestResult res;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) {
    res.io_failure = true;
    res.violations.push_back(dir.string() + ": not a readable directory");
    return res;
  }
  const auto manifest_path = dir / "manifest.json";
  if (!fs::is_regular_file(manifest_path, ec)) {
    res.io_failure = true;
    res.violations.push_back("manifest.json: missing");
    return res;
  }

  auto& v = res.violations;
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const std::exception& e) {
    v.push_back(std::string("manifest.json: unreadable JSON: ") + e.what());
    return res;
  }

  ExportBundle b;
  try {
    const int version = manifest.at("schema_version").get<int>();
    if (version != kSchemaVersion) {
      v.push_back("manifest.json: unsupported schema_version " + std::to_string(version) + " (expected " +
                  std::to_string(kSchemaVersion) + ")");
      return res;
    }
    b.model = model_from_json(manifest.at("model"));
    b.dataset = manifest.value("dataset", std::string{});
    b.exporter = manifest.value("exporter", json::object());
    for (const auto& js : manifest.at("sequences")) {
      SequenceInfo s;
      s.sequence_id = js.at("sequence_id").get<int>();
      s.length = js.value("length", 0);
      s.text = js.value("text", std::string{});
      if (js.contains("image") && !js["image"].is_null()) s.image = js["image"].get<std::string>();
      b.sequences.push_back(std::move(s));
    }
  } catch (const std::exception& e) {
    v.push_back(std::string("manifest.json: schema error: ") + e.what());
    return res;
  }
  for (auto& m : validate_model(b.model)) v.push_back("manifest.json: " + m);
  if (!v.empty()) return res;

  std::vector<TokenRecord> tokens;
  {
    std::ifstream in(dir / "tokens.jsonl");
    if (!in) {
      v.push_back("tokens.jsonl: missing");
      return res;
    }
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        tokens.push_back(token_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        v.push_back("tokens.jsonl line " + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  std::set<int> known_seqs;
  for (const auto& s : b.sequences) known_seqs.insert(s.sequence_id);
  for (const auto& t : tokens) {
    if (!known_seqs.contains(t.sequence_id)) {
      v.push_back("tokens.jsonl: token " + std::to_string(t.token_id) + " references unknown sequence " +
                  std::to_string(t.sequence_id));
      break;
    }
  }

  const auto& heads_json = manifest.at("heads");
  if (static_cast<int>(heads_json.size()) != b.model.num_heads())
    v.push_back("manifest.json: lists " + std::to_string(heads_json.size()) + " heads, model declares " +
                std::to_string(b.model.num_heads()));
  std::size_t qk_files = 0;
  for (const auto& entry : fs::directory_iterator(dir, ec))
    if (entry.path().extension() == ".qk") ++qk_files;
  if (qk_files != heads_json.size())
    v.push_back("manifest.json: lists " + std::to_string(heads_json.size()) + " heads but directory holds " +
                std::to_string(qk_files) + " tensor files");

  std::set<std::pair<int, int>> seen;
  for (const auto& jh : heads_json) {
    HeadTensors h;
    std::string file;
    std::uint32_t n_q = 0, n_k = 0;
    std::optional<std::string> wfile;
    try {
      h.layer = jh.at("layer").get<int>();
      h.head = jh.at("head").get<int>();
      n_q = jh.at("n_q").get<std::uint32_t>();
      n_k = jh.at("n_k").get<std::uint32_t>();
      file = jh.at("file").get<std::string>();
      if (jh.contains("weights_file") && !jh["weights_file"].is_null()) wfile = jh["weights_file"].get<std::string>();
    } catch (const std::exception& e) {
      v.push_back(std::string("manifest.json: head entry: ") + e.what());
      continue;
    }
    if (!seen.insert({h.layer, h.head}).second) {
      v.push_back("manifest.json: duplicate head l" + std::to_string(h.layer) + "_h" + std::to_string(h.head));
      continue;
    }
    if (!fs::is_regular_file(dir / file, ec)) {
      v.push_back(file + ": missing");
      continue;
    }
    try {
      auto block = read_tensor_block(dir / file);
      if (block.rows_a != n_q || block.rows_b != n_k)
        throw Error(file + ": header declares n_q=" + std::to_string(block.rows_a) + ", n_k=" +
                    std::to_string(block.rows_b) + " but manifest declares n_q=" + std::to_string(n_q) +
                    ", n_k=" + std::to_string(n_k));
      if (static_cast<int>(block.cols) != b.model.head_dim)
        throw Error(file + ": d=" + std::to_string(block.cols) + " does not match head_dim " +
                    std::to_string(b.model.head_dim));
      h.queries = std::move(block.a);
      h.keys = std::move(block.b);
      if (wfile) {
        if (!fs::is_regular_file(dir / *wfile, ec)) throw Error(*wfile + ": missing");
        auto w = read_tensor_block(dir / *wfile);
        if (w.rows_a != w.rows_b) throw Error(*wfile + ": wq and wk row counts differ");
        h.wq = std::move(w.a);
        h.wk = std::move(w.b);
      }
    } catch (const Error& e) {
      v.push_back(e.what());
      continue;
    }
    h.tokens = tokens;
    assign_prescale_norms(h);
    for (auto& msg : validate_head(h, b.model)) v.push_back(file + ": " + msg);
    b.heads.push_back(std::move(h));
  }
  std::sort(b.heads.begin(), b.heads.end(),
            [](const HeadTensors& x, const HeadTensors& y) { return std::tie(x.layer, x.head) < std::tie(y.layer, y.head); });
  if (v.empty()) res.bundle = std::move(b);
  return res;
}

// ---------------------------------------------------------------------------

std::string to_string(ColorScheme s) {
  switch (s) {
    case ColorScheme::token_type: return "token_type";
    case ColorScheme::norm: return "norm";
    case ColorScheme::position_normalized: return "position_normalized";
    case ColorScheme::position_discrete: return "position_discrete";
    case ColorScheme::image_row: return "image_row";
    case ColorScheme::image_col: return "image_col";
    case ColorScheme::patch_rgb: return "patch_rgb";
  }
  return "token_type";
}

ColorScheme color_scheme_from_string(const std::string& s) {
  for (auto c : {ColorScheme::token_type, ColorScheme::norm, ColorScheme::position_normalized,
                 ColorScheme::position_discrete, ColorScheme::image_row, ColorScheme::image_col, ColorScheme::patch_rgb})
    if (to_string(c) == s) return c;
  throw Error("unknown color scheme '" + s + "'");
}

std::vector<ColorScheme> color_schemes_for(Modality m) {
  if (m == Modality::text)
    return {ColorScheme::token_type, ColorScheme::norm, ColorScheme::position_normalized, ColorScheme::position_discrete};
  return {ColorScheme::token_type, ColorScheme::norm, ColorScheme::image_row, ColorScheme::image_col,
          ColorScheme::patch_rgb};
}

std::vector<ColorEncoding> encode_colors(const std::vector<TokenRecord>& tokens, const std::vector<SequenceInfo>& sequences,
                                         Modality modality) {
  std::map<int, int> length;
  for (const auto& t : tokens)
    if (t.role == Role::query) ++length[t.sequence_id];
  for (const auto& s : sequences)
    if (s.length > 0) length[s.sequence_id] = s.length;

  std::vector<ColorEncoding> out;
  for (auto scheme : color_schemes_for(modality)) {
    ColorEncoding e;
    e.scheme = scheme;
    e.values.reserve(tokens.size());
    for (const auto& t : tokens) {
      double val = -1.0;
      switch (scheme) {
        case ColorScheme::token_type: val = t.role == Role::query ? 0.0 : 1.0; break;
        case ColorScheme::norm: val = t.norm_prescale; break;
        case ColorScheme::position_normalized: {
          const int len = std::max(length[t.sequence_id], t.position + 1);
          val = static_cast<double>(t.position) / len;
          break;
        }
        case ColorScheme::position_discrete: val = static_cast<double>(t.position % 5); break;
        case ColorScheme::image_row: val = t.row ? *t.row : -1.0; break;
        case ColorScheme::image_col: val = t.col ? *t.col : -1.0; break;
        case ColorScheme::patch_rgb:
          if (t.patch_rgb) val = ((*t.patch_rgb)[0] << 16) | ((*t.patch_rgb)[1] << 8) | (*t.patch_rgb)[2];
          break;
      }
      e.values.push_back(val);
      if (scheme == ColorScheme::position_discrete) e.query_dark.push_back(t.role == Role::query);
    }
    out.push_back(std::move(e));
  }
  return out;
}

SampledHead sample_cap(const HeadTensors& h, int cap, std::uint64_t seed) {
  if (cap < 10) throw Error("sample_cap: cap must be at least 10");
  SampledHead out;
  std::map<int, std::size_t> size;
  for (const auto& t : h.tokens) ++size[t.sequence_id];

  if (h.tokens.size() <= static_cast<std::size_t>(cap)) {
    out.head = h;
    out.source_token_ids.resize(h.tokens.size());
    std::iota(out.source_token_ids.begin(), out.source_token_ids.end(), 0);
    for (const auto& [sid, n] : size) out.kept_sequences.push_back(sid);
    return out;
  }

  std::vector<int> order;
  for (const auto& [sid, n] : size) order.push_back(sid);
  std::mt19937_64 rng(seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  std::size_t total = 0;
  for (int sid : order) {
    if (total + size[sid] > static_cast<std::size_t>(cap)) break;
    total += size[sid];
    out.kept_sequences.push_back(sid);
  }
  if (out.kept_sequences.empty()) {
    out.kept_sequences.push_back(order.front());
    out.over_cap = true;
  }
  std::sort(out.kept_sequences.begin(), out.kept_sequences.end());
  const std::set<int> keep(out.kept_sequences.begin(), out.kept_sequences.end());

  std::vector<Eigen::Index> q_rows, k_rows;
  for (Eigen::Index i = 0; i < h.num_queries(); ++i)
    if (keep.contains(h.query_token(i).sequence_id)) q_rows.push_back(i);
  for (Eigen::Index i = 0; i < h.num_keys(); ++i)
    if (keep.contains(h.key_token(i).sequence_id)) k_rows.push_back(i);

  HeadTensors& s = out.head;
  s.layer = h.layer;
  s.head = h.head;
  s.wq = h.wq;
  s.wk = h.wk;
  s.queries.resize(static_cast<Eigen::Index>(q_rows.size()), h.dim());
  s.keys.resize(static_cast<Eigen::Index>(k_rows.size()), h.dim());
  for (std::size_t r = 0; r < q_rows.size(); ++r) {
    s.queries.row(static_cast<Eigen::Index>(r)) = h.queries.row(q_rows[r]);
    s.tokens.push_back(h.query_token(q_rows[r]));
    out.source_token_ids.push_back(static_cast<int>(q_rows[r]));
  }
  for (std::size_t r = 0; r < k_rows.size(); ++r) {
    s.keys.row(static_cast<Eigen::Index>(r)) = h.keys.row(k_rows[r]);
    s.tokens.push_back(h.key_token(k_rows[r]));
    out.source_token_ids.push_back(static_cast<int>(h.num_queries() + k_rows[r]));
  }
  for (std::size_t i = 0; i < s.tokens.size(); ++i) s.tokens[i].token_id = static_cast<int>(i);
  return out;
}

}  // namespace attnatlas

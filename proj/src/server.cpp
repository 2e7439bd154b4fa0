#include "attnatlas/server.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <variant>

#include "httplib.h"

#include "attnatlas/pipeline.hpp"

namespace attnatlas {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(MatchMode m) {
  switch (m) {
    case MatchMode::exact: return "exact";
    case MatchMode::prefix: return "prefix";
    case MatchMode::substring: return "substring";
  }
  return "exact";
}

MatchMode match_mode_from_string(const std::string& s) {
  if (s == "exact") return MatchMode::exact;
  if (s == "prefix") return MatchMode::prefix;
  if (s == "substring") return MatchMode::substring;
  throw Error("unknown match mode '" + s + "'");
}

bool token_matches(const std::string& text, const std::string& query, MatchMode mode) {
  switch (mode) {
    case MatchMode::exact: return text == query;
    case MatchMode::prefix: return text.starts_with(query);
    case MatchMode::substring: return text.find(query) != std::string::npos;
  }
  return false;
}

namespace {

ApiResponse error(int status, const std::string& msg, json valid = nullptr) {
  json body = {{"error", msg}};
  if (!valid.is_null()) body["valid"] = std::move(valid);
  return {status, body};
}

std::optional<int> parse_int(std::string_view s) {
  int v = 0;
  if (s.empty()) return std::nullopt;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

std::optional<double> parse_double(const std::string& s) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

std::string param(const QueryParams& q, const std::string& key) {
  const auto it = q.find(key);
  return it == q.end() ? std::string{} : it->second;
}

// Comma-separated non-negative positions; empty means none.
std::optional<std::set<int>> parse_positions(const std::string& s) {
  std::set<int> out;
  if (s.empty()) return out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto end = std::min(s.find(',', start), s.size());
    const auto v = parse_int(std::string_view(s).substr(start, end - start));
    if (!v || *v < 0) return std::nullopt;
    out.insert(*v);
    start = end + 1;
  }
  return out;
}

json coords_json(const Matrix& m, const std::vector<std::size_t>* rows = nullptr) {
  json out = json::array();
  auto emit = [&](Eigen::Index i) {
    json p = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) p.push_back(m(i, j));
    out.push_back(std::move(p));
  };
  if (rows) {
    for (auto i : *rows) emit(static_cast<Eigen::Index>(i));
  } else {
    for (Eigen::Index i = 0; i < m.rows(); ++i) emit(i);
  }
  return out;
}

json edge_json(const AttentionEdge& e) {
  return {{"query_token", e.query_token},       {"key_token", e.key_token}, {"query_position", e.query_position},
          {"key_position", e.key_position}, {"weight", e.weight},       {"to_cls", e.to_cls}};
}

json badges(const HeadArtifact& h) {
  if (!h.diagnostics) return nullptr;
  return {{"spearman", h.diagnostics->spearman_dist_dot}, {"norm_disparity", h.diagnostics->mean_norm_diff}};
}

struct View {
  Method method = Method::pca;
  int dim = 2;
  ColorScheme color = ColorScheme::token_type;
};

// Resolves method/dim/color against what the atlas holds.
std::variant<View, ApiResponse> resolve_view(const Atlas& a, const QueryParams& q) {
  View v;
  json methods = json::array();
  for (auto m : a.methods) methods.push_back(to_string(m));
  const auto method = param(q, "method");
  if (method.empty()) {
    v.method = a.methods.front();
  } else {
    const auto it = std::find_if(a.methods.begin(), a.methods.end(), [&](Method m) { return to_string(m) == method; });
    if (it == a.methods.end()) return error(400, "method '" + method + "' is not precomputed", methods);
    v.method = *it;
  }

  const auto dim = param(q, "dim");
  if (dim.empty()) {
    v.dim = std::find(a.dims.begin(), a.dims.end(), 2) != a.dims.end() ? 2 : a.dims.front();
  } else {
    const auto d = parse_int(dim);
    if (!d || std::find(a.dims.begin(), a.dims.end(), *d) == a.dims.end())
      return error(400, "dim '" + dim + "' is not precomputed", a.dims);
    v.dim = *d;
  }

  const auto schemes = color_schemes_for(a.model.modality);
  json names = json::array();
  for (auto s : schemes) names.push_back(to_string(s));
  const auto color = param(q, "color");
  if (!color.empty()) {
    const auto it = std::find_if(schemes.begin(), schemes.end(), [&](ColorScheme s) { return to_string(s) == color; });
    if (it == schemes.end()) return error(400, "color '" + color + "' is not available for this model", names);
    v.color = *it;
  }
  return v;
}

const ColorEncoding* find_colors(const HeadArtifact& h, ColorScheme s) {
  for (const auto& c : h.colors)
    if (c.scheme == s) return &c;
  return nullptr;
}

std::vector<std::size_t> panel_rows(const Atlas& a, const HeadArtifact& h, std::size_t n) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  const auto cap = static_cast<std::size_t>(AtlasService::kPanelPoints);
  if (n <= cap) return rows;
  std::mt19937_64 rng(head_seed(a.seed ^ 0x6d617472ULL, h.layer, h.head));
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(rows[i], rows[pick(rng)]);
  }
  rows.resize(cap);
  std::sort(rows.begin(), rows.end());
  return rows;
}

json color_payload(const ColorEncoding* c, const std::vector<std::size_t>* rows) {
  json out = {{"values", json::array()}};
  if (!c) return out;
  auto pick = [&](auto&& f) {
    if (rows) {
      for (auto r : *rows) f(r);
    } else {
      for (std::size_t r = 0; r < c->values.size(); ++r) f(r);
    }
  };
  pick([&](std::size_t r) { out["values"].push_back(c->values[r]); });
  if (!c->query_dark.empty()) {
    out["query_dark"] = json::array();
    pick([&](std::size_t r) { out["query_dark"].push_back(static_cast<bool>(c->query_dark[r])); });
  }
  return out;
}

json token_json_with_norm(const TokenRecord& t) {
  auto j = token_to_json(t);
  j["norm_prescale"] = t.norm_prescale;
  return j;
}

}  // namespace

AtlasService::AtlasService(std::vector<Atlas> atlases) : atlases_(std::move(atlases)) {
  std::sort(atlases_.begin(), atlases_.end(), [](const Atlas& x, const Atlas& y) { return x.id < y.id; });
}

AtlasService AtlasService::load_dir(const fs::path& data_dir, std::vector<std::string>* errors) {
  std::vector<Atlas> loaded;
  std::set<std::string> ids;
  auto note = [&](const std::string& msg) {
    if (errors) errors->push_back(msg);
  };
  std::vector<fs::path> candidates;
  std::error_code ec;
  if (fs::is_regular_file(data_dir / "atlas.json", ec)) candidates.push_back(data_dir);
  if (fs::is_directory(data_dir, ec))
    for (const auto& e : fs::directory_iterator(data_dir, ec))
      if (e.is_directory() && fs::is_regular_file(e.path() / "atlas.json")) candidates.push_back(e.path());
  std::sort(candidates.begin(), candidates.end());
  for (const auto& dir : candidates) {
    try {
      auto a = load_atlas(dir, true);
      if (!ids.insert(a.id).second) {
        note(dir.string() + ": duplicate model id '" + a.id + "', skipped");
        continue;
      }
      loaded.push_back(std::move(a));
    } catch (const std::exception& e) {
      note(e.what());
    }
  }
  return AtlasService(std::move(loaded));
}

const Atlas* AtlasService::find(const std::string& id) const {
  for (const auto& a : atlases_)
    if (a.id == id) return &a;
  return nullptr;
}

ApiResponse AtlasService::models() const {
  json out = json::array();
  for (const auto& a : atlases_) {
    json methods = json::array(), schemes = json::array();
    for (auto m : a.methods) methods.push_back(to_string(m));
    for (auto s : color_schemes_for(a.model.modality)) schemes.push_back(to_string(s));
    const auto degraded = std::count_if(a.heads.begin(), a.heads.end(), [](const HeadArtifact& h) { return h.degraded; });
    out.push_back({{"id", a.id},
                   {"model", model_to_json(a.model)},
                   {"dataset", a.dataset},
                   {"num_heads", a.heads.size()},
                   {"degraded_heads", degraded},
                   {"num_sequences", a.sequences.size()},
                   {"methods", methods},
                   {"dims", a.dims},
                   {"colors", schemes}});
  }
  return {200, out};
}

ApiResponse AtlasService::matrix(const std::string& model, const QueryParams& q) const {
  const Atlas* a = find(model);
  if (!a) return error(404, "unknown model '" + model + "'");
  const auto resolved = resolve_view(*a, q);
  if (std::holds_alternative<ApiResponse>(resolved)) return std::get<ApiResponse>(resolved);
  const View v = std::get<View>(resolved);

  json panels = json::array();
  for (const auto& h : a->heads) {
    json p = {{"layer", h.layer}, {"head", h.head}, {"degraded", h.degraded}, {"badges", badges(h)}};
    const auto* proj = h.projection(v.method, v.dim);
    if (h.degraded || !proj) {
      p["reason"] = h.degraded_reason;
      panels.push_back(std::move(p));
      continue;
    }
    const auto rows = panel_rows(*a, h, h.sampled_token_ids.size());
    json ids = json::array();
    for (auto r : rows) ids.push_back(h.sampled_token_ids[r]);
    p["token_ids"] = std::move(ids);
    p["coords"] = coords_json(proj->coords, &rows);
    p["colors"] = color_payload(find_colors(h, v.color), &rows);
    p["total_points"] = h.sampled_token_ids.size();
    panels.push_back(std::move(p));
  }
  return {200,
          {{"model", a->id}, {"method", to_string(v.method)}, {"dim", v.dim}, {"color", to_string(v.color)}, {"panels", panels}}};
}

ApiResponse AtlasService::head(const std::string& model, int layer, int head, const QueryParams& q) const {
  const Atlas* a = find(model);
  if (!a) return error(404, "unknown model '" + model + "'");
  const auto* h = a->find_head(layer, head);
  if (!h)
    return error(404, "no head (" + std::to_string(layer) + ", " + std::to_string(head) + "); model has " +
                          std::to_string(a->model.num_layers) + " layers x " + std::to_string(a->model.heads_per_layer) +
                          " heads");
  const auto resolved = resolve_view(*a, q);
  if (std::holds_alternative<ApiResponse>(resolved)) return std::get<ApiResponse>(resolved);
  const View v = std::get<View>(resolved);

  json body = {{"model", a->id},         {"layer", h->layer},  {"head", h->head},
               {"degraded", h->degraded}, {"method", to_string(v.method)}, {"dim", v.dim},
               {"color", to_string(v.color)}};
  if (h->degraded) {
    body["reason"] = h->degraded_reason;
    return {200, body};
  }
  const auto tokens = a->head_tokens(*h);
  json tj = json::array();
  for (int id : h->sampled_token_ids) tj.push_back(token_json_with_norm(tokens[static_cast<std::size_t>(id)]));
  body["tokens"] = std::move(tj);
  body["sample"] = {{"sequences", h->kept_sequences}, {"over_cap", h->sample_over_cap}};
  body["params"] = {{"translation", std::vector<double>(h->params->translation.begin(), h->params->translation.end())},
                    {"scale", h->params->scale}};
  body["scale_objective"] = h->scale_objective ? json(*h->scale_objective) : json(nullptr);
  body["diagnostics"] = h->diagnostics ? diagnostics_to_json(*h->diagnostics) : json(nullptr);
  if (const auto* proj = h->projection(v.method, v.dim)) {
    body["coords"] = coords_json(proj->coords);
    body["projection"] = {{"seed", proj->seed},
                          {"flags", proj->flags},
                          {"axis_variance", proj->axis_variance},
                          {"quality",
                           {{"final_objective", proj->quality.final_objective},
                            {"initial_objective", proj->quality.initial_objective},
                            {"trustworthiness_k10", proj->quality.trustworthiness_k10}}}};
  }
  body["colors"] = color_payload(find_colors(*h, v.color), nullptr);
  return {200, body};
}

ApiResponse AtlasService::attention(const std::string& model, int sequence_id, int layer, int head,
                                    const QueryParams& q) const {
  const Atlas* a = find(model);
  if (!a) return error(404, "unknown model '" + model + "'");
  const auto* h = a->find_head(layer, head);
  if (!h) return error(404, "no head (" + std::to_string(layer) + ", " + std::to_string(head) + ")");
  const bool known_seq = std::any_of(a->sequences.begin(), a->sequences.end(),
                                     [&](const SequenceInfo& s) { return s.sequence_id == sequence_id; });
  if (!known_seq) return error(404, "no sequence " + std::to_string(sequence_id));
  if (!h->has_attention) return error(404, "no attention stored for this head");

  const auto hide = parse_positions(param(q, "hide"));
  const auto hide_keys = parse_positions(param(q, "hide_keys"));
  const auto hide_queries = parse_positions(param(q, "hide_queries"));
  if (!hide || !hide_keys || !hide_queries)
    return error(400, "hide lists must be comma-separated non-negative integer positions");
  std::set<int> hk = *hide, hq = *hide;
  hk.insert(hide_keys->begin(), hide_keys->end());
  hq.insert(hide_queries->begin(), hide_queries->end());

  double threshold = 0.1;
  if (const auto t = param(q, "threshold"); !t.empty()) {
    const auto v = parse_double(t);
    if (!v || *v < 0.0 || *v > 1.0) return error(400, "threshold must be a number in [0, 1]");
    threshold = *v;
  }

  std::optional<AttentionMatrix> raw;
  try {
    raw = read_attention(h->dir / "attention.bin", sequence_id);
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
  if (!raw) return error(404, "no attention stored for sequence " + std::to_string(sequence_id));
  const auto m = renormalize_hidden(*raw, hk, hq);

  json weights = json::array();
  for (Eigen::Index i = 0; i < m.num_queries(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.num_keys(); ++j) row.push_back(m.weights(i, j));
    weights.push_back(std::move(row));
  }
  json edges = json::array();
  for (const auto& e : top_k_edges(m, 2)) edges.push_back(edge_json(e));

  json toks = json::array();
  std::optional<int> cls;
  for (int id : raw->key_tokens) {
    const auto& t = a->tokens[static_cast<std::size_t>(id)];
    toks.push_back({{"position", t.position}, {"text", t.display_text}, {"special", t.is_special}});
    if (t.is_special && !t.row && !cls) cls = t.position;
  }

  json body = {{"model", a->id},
               {"sequence_id", sequence_id},
               {"layer", layer},
               {"head", head},
               {"mask", m.mask == Mask::causal ? "causal" : "none"},
               {"hidden_keys", hk},
               {"hidden_queries", hq},
               {"query_positions", m.query_positions},
               {"key_positions", m.key_positions},
               {"query_tokens", m.query_tokens},
               {"key_tokens", m.key_tokens},
               {"tokens", toks},
               {"weights", weights},
               {"zero_rows", std::vector<bool>(m.zero_rows.begin(), m.zero_rows.end())},
               {"edges", edges}};
  if (a->model.modality == Modality::image) {
    json strongest = json::array(), thresh = json::array();
    // edge sets come from the unmodified matrix, hiding does not change them
    for (const auto& e : image_edges(*raw, ImageEdgeMode::strongest, threshold, cls)) strongest.push_back(edge_json(e));
    for (const auto& e : image_edges(*raw, ImageEdgeMode::threshold, threshold, cls)) thresh.push_back(edge_json(e));
    body["image_edges"] = {{"strongest", strongest}, {"threshold", thresh}, {"threshold_value", threshold}};
  }
  return {200, body};
}

ApiResponse AtlasService::search(const std::string& model, const QueryParams& q) const {
  const Atlas* a = find(model);
  if (!a) return error(404, "unknown model '" + model + "'");
  const auto text = param(q, "q");
  if (text.find_first_not_of(" \t\r\n") == std::string::npos) return error(400, "query text is empty");
  MatchMode mode = MatchMode::exact;
  if (const auto m = param(q, "mode"); !m.empty()) {
    try {
      mode = match_mode_from_string(m);
    } catch (const Error&) {
      return error(400, "unknown mode '" + m + "'", json{"exact", "prefix", "substring"});
    }
  }
  const auto resolved = resolve_view(*a, q);
  if (std::holds_alternative<ApiResponse>(resolved)) return std::get<ApiResponse>(resolved);
  const View v = std::get<View>(resolved);

  std::optional<std::pair<int, int>> only;
  const auto ls = param(q, "layer"), hs = param(q, "head");
  if (!ls.empty() || !hs.empty()) {
    const auto l = parse_int(ls), h = parse_int(hs);
    if (!l || !h) return error(400, "single-head scope needs integer layer and head");
    if (!a->find_head(*l, *h)) return error(404, "no head (" + ls + ", " + hs + ")");
    only = std::make_pair(*l, *h);
  }

  std::vector<int> matches;
  for (const auto& t : a->tokens)
    if (token_matches(t.display_text, text, mode)) matches.push_back(t.token_id);
  const std::set<int> match_set(matches.begin(), matches.end());

  json heads = json::array();
  for (const auto& h : a->heads) {
    if (only && (h.layer != only->first || h.head != only->second)) continue;
    Dispersion disp;
    const auto* proj = h.projection(v.method, v.dim);
    if (!h.degraded && proj && !match_set.empty()) {
      std::vector<Eigen::Index> rows;
      for (std::size_t r = 0; r < h.sampled_token_ids.size(); ++r)
        if (match_set.contains(h.sampled_token_ids[r])) rows.push_back(static_cast<Eigen::Index>(r));
      Matrix pts(static_cast<Eigen::Index>(rows.size()), proj->coords.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = proj->coords.row(rows[i]);
      disp = search_dispersion(pts, default_search_eps(proj->coords));
    }
    heads.push_back({{"layer", h.layer},
                     {"head", h.head},
                     {"matches", matches},
                     {"dispersion", {{"clusters", disp.clusters}, {"noise", disp.noise}}}});
  }
  return {200,
          {{"model", a->id},
           {"query", text},
           {"mode", to_string(mode)},
           {"method", to_string(v.method)},
           {"dim", v.dim},
           {"heads", heads}}};
}

ApiResponse AtlasService::diagnostics(const std::string& model) const {
  const Atlas* a = find(model);
  if (!a) return error(404, "unknown model '" + model + "'");
  json rows = json::array();
  for (const auto& h : a->heads) {
    json r = h.diagnostics ? diagnostics_to_json(*h.diagnostics) : json{{"layer", h.layer}, {"head", h.head}};
    r["degraded"] = h.degraded;
    rows.push_back(std::move(r));
  }
  return {200, {{"model", a->id}, {"special_token_pairs", "included"}, {"rows", rows}}};
}

ApiResponse AtlasService::handle(const std::string& path, const QueryParams& q) const {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (start < path.size()) {
    auto end = path.find('/', start);
    if (end == std::string::npos) end = path.size();
    if (end > start) parts.push_back(path.substr(start, end - start));
    start = end + 1;
  }
  if (parts.empty() || parts[0] != "models") return error(404, "no such endpoint");
  if (parts.size() == 1) return models();
  const auto& m = parts[1];
  auto ints = [&](std::initializer_list<std::size_t> idx) -> std::optional<std::vector<int>> {
    std::vector<int> out;
    for (auto i : idx) {
      const auto v = parse_int(parts[i]);
      if (!v) return std::nullopt;
      out.push_back(*v);
    }
    return out;
  };
  if (parts.size() == 3 && parts[2] == "matrix") return matrix(m, q);
  if (parts.size() == 3 && parts[2] == "search") return search(m, q);
  if (parts.size() == 3 && parts[2] == "diagnostics") return diagnostics(m);
  if (parts.size() == 5 && parts[2] == "heads") {
    const auto v = ints({3, 4});
    if (!v) return error(400, "layer and head must be integers");
    return head(m, (*v)[0], (*v)[1], q);
  }
  if (parts.size() == 7 && parts[2] == "sequences" && parts[4] == "attention") {
    const auto v = ints({3, 5, 6});
    if (!v) return error(400, "sequence, layer and head must be integers");
    return attention(m, (*v)[0], (*v)[1], (*v)[2], q);
  }
  return error(404, "no such endpoint");
}

void mount_routes(httplib::Server& server, const AtlasService& service, const std::optional<std::string>& cors_origin) {
  if (cors_origin) server.set_default_headers({{"Access-Control-Allow-Origin", *cors_origin}});
  server.Get(R"(/.*)", [&service](const httplib::Request& req, httplib::Response& res) {
    QueryParams q;
    for (const auto& [k, v] : req.params) q[k] = v;
    ApiResponse r;
    try {
      r = service.handle(req.path, q);
    } catch (const std::exception& e) {
      r = error(500, e.what());
    }
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  });
}

int serve(const ServeOptions& opt) {
  std::error_code ec;
  if (!fs::is_directory(opt.data_dir, ec)) {
    std::cerr << "data dir " << opt.data_dir << " is not a directory\n";
    return 1;
  }
  std::vector<std::string> errors;
  const auto service = AtlasService::load_dir(opt.data_dir, &errors);
  for (const auto& e : errors) std::cerr << "skipped: " << e << '\n';
  std::cerr << "loaded " << service.atlases().size() << " atlas(es) from " << opt.data_dir.string() << '\n';

  httplib::Server server;
  mount_routes(server, service, opt.cors_origin);
  std::cerr << "listening on " << opt.host << ':' << opt.port << '\n';
  if (!server.listen(opt.host, opt.port)) {
    std::cerr << "cannot listen on " << opt.host << ':' << opt.port << '\n';
    return 1;
  }
  return 0;
}

}  // namespace attnatlas

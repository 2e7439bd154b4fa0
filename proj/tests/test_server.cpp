#include <chrono>
#include <fstream>
#include <set>
#include <thread>

#include "doctest.h"

#include "attnatlas/attention.hpp"
#include "attnatlas/pipeline.hpp"
#include "attnatlas/server.hpp"
#include "attnatlas/synthetic.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

// after Eigen: resolv.h defines a macro that collides with Eigen internals
#include "httplib.h"

using namespace attnatlas;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Three atlases under one data dir, built once:
//   gpt    causal text, query_scale 10, pca 2d/3d
//   img    bidirectional image, pca + tsne 2d
//   broken text with an all-zero-key head
struct Fixture {
  testutil::TempDir dir{"server"};
  ExportBundle gpt, img, broken;
  AtlasService service;

  Fixture() {
    FixtureSpec s;
    s.direction = AttentionDirection::causal;
    s.query_scale = 10.0;
    s.seed = 3;
    gpt = make_fixture_bundle(s);
    PrecomputeConfig cfg;
    cfg.dims = {2, 3};
    precompute(gpt, dir / "gpt", cfg);

    FixtureSpec si;
    si.modality = Modality::image;
    img = make_fixture_bundle(si);
    PrecomputeConfig ci;
    ci.methods = {Method::pca, Method::tsne};
    ci.tsne_iterations = 100;
    precompute(img, dir / "img", ci);

    broken = make_fixture_bundle({});
    broken.heads[1].keys.setZero();
    assign_prescale_norms(broken.heads[1]);
    precompute(broken, dir / "broken", {});

    std::vector<std::string> errors;
    service = AtlasService::load_dir(dir.path(), &errors);
    REQUIRE(errors.empty());
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

ApiResponse get(const std::string& path, const QueryParams& q = {}) { return fixture().service.handle(path, q); }

std::vector<std::string> valid_list(const ApiResponse& r) { return r.body.at("valid").get<std::vector<std::string>>(); }

}  // namespace

TEST_SUITE("server") {
  TEST_CASE("models lists atlases in id order") {
    const auto r = get("/models");
    CHECK(r.status == 200);
    REQUIRE(r.body.size() == 3);
    CHECK(r.body[0]["id"] == "broken");
    CHECK(r.body[1]["id"] == "gpt");
    CHECK(r.body[2]["id"] == "img");
    CHECK(r.body[1]["num_heads"] == 4);
    CHECK(r.body[1]["dims"] == json({2, 3}));
    CHECK(r.body[2]["methods"] == json({"pca", "tsne"}));
    CHECK(r.body[0]["degraded_heads"] == 1);

    testutil::TempDir empty("empty");
    CHECK(AtlasService::load_dir(empty.path()).models().body == json::array());
  }

  TEST_CASE("a single atlas directory can be served directly") {
    const auto s = AtlasService::load_dir(fixture().dir / "gpt");
    CHECK(s.models().body.size() == 1);
  }

  TEST_CASE("matrix panels") {
    const auto r = get("/models/gpt/matrix", {{"method", "pca"}, {"dim", "2"}});
    REQUIRE(r.status == 200);
    REQUIRE(r.body["panels"].size() == 4);
    for (const auto& p : r.body["panels"]) {
      CHECK(p["coords"].size() <= 1000);
      CHECK(p["coords"].size() == p["token_ids"].size());
      CHECK(p["coords"][0].size() == 2);
      CHECK(p["colors"]["values"].size() == p["coords"].size());
      CHECK(p["badges"]["spearman"].get<double>() >= -1.0);
      CHECK(p["badges"].contains("norm_disparity"));
    }
    CHECK(get("/models/gpt/matrix", {{"dim", "3"}}).body["panels"][0]["coords"][0].size() == 3);
    CHECK(get("/models/gpt/matrix", {{"color", "position_discrete"}}).body["panels"][0]["colors"].contains("query_dark"));
    CHECK(get("/models/gpt/matrix").body == r.body);
  }

  TEST_CASE("matrix errors list the valid choices") {
    auto r = get("/models/gpt/matrix", {{"method", "tsne"}});
    CHECK(r.status == 400);
    CHECK(valid_list(r) == std::vector<std::string>{"pca"});
    r = get("/models/gpt/matrix", {{"color", "image_row"}});
    CHECK(r.status == 400);
    const auto v = valid_list(r);
    CHECK(std::find(v.begin(), v.end(), "image_row") == v.end());
    CHECK(std::find(v.begin(), v.end(), "position_discrete") != v.end());
    r = get("/models/gpt/matrix", {{"dim", "5"}});
    CHECK(r.status == 400);
    CHECK(r.body["valid"] == json({2, 3}));
    CHECK(get("/models/nope/matrix").status == 404);
    CHECK(get("/models/img/matrix", {{"color", "image_row"}}).status == 200);
  }

  TEST_CASE("matrix subsampling caps large heads at 1000 points") {
    testutil::TempDir dir("bigpanel");
    FixtureSpec s;
    s.num_sequences = 40;
    s.min_length = s.max_length = 20;
    s.num_layers = 1;
    s.heads_per_layer = 1;
    precompute(make_fixture_bundle(s), dir / "big", {});
    const auto svc = AtlasService::load_dir(dir.path());
    const auto r = svc.handle("/models/big/matrix", {});
    REQUIRE(r.status == 200);
    const auto& p = r.body["panels"][0];
    CHECK(p["total_points"] == 1600);
    CHECK(p["coords"].size() == 1000);
    const auto ids = p["token_ids"].get<std::vector<int>>();
    CHECK(std::is_sorted(ids.begin(), ids.end()));
    CHECK(std::set<int>(ids.begin(), ids.end()).size() == 1000);
    CHECK(svc.handle("/models/big/matrix", {}).body == r.body);
  }

  TEST_CASE("head payload") {
    const auto r = get("/models/gpt/heads/0/0");
    REQUIRE(r.status == 200);
    const auto& h = fixture().gpt.heads[0];
    CHECK(r.body["coords"].size() == static_cast<std::size_t>(h.num_queries() + h.num_keys()));
    CHECK(r.body["tokens"].size() == r.body["coords"].size());
    CHECK(r.body["tokens"][0].contains("norm_prescale"));
    CHECK(r.body["params"]["translation"].size() == 4);
    CHECK(r.body["params"]["scale"].get<double>() > 0.0);
    CHECK(r.body["diagnostics"].contains("spearman_dist_dot"));
    CHECK_FALSE(r.body.contains("queries"));

    CHECK(get("/models/gpt/heads/99/0").status == 404);
    CHECK(get("/models/gpt/heads/0/7").status == 404);
    CHECK(get("/models/gpt/heads/x/0").status == 400);
    CHECK(get("/models/gpt/heads/0/0", {{"method", "umap"}}).status == 400);
  }

  TEST_CASE("degraded head is served with its flag") {
    const auto r = get("/models/broken/heads/0/1");
    CHECK(r.status == 200);
    CHECK(r.body["degraded"] == true);
    CHECK_FALSE(r.body.contains("coords"));
    CHECK(r.body["reason"].get<std::string>().find("degenerate") != std::string::npos);
    const auto m = get("/models/broken/matrix");
    CHECK(m.body["panels"][1]["degraded"] == true);
    CHECK_FALSE(m.body["panels"][1].contains("coords"));
    CHECK(get("/models/broken/sequences/0/attention/0/1").status == 200);
  }

  TEST_CASE("attention without hiding has unit rows") {
    const auto r = get("/models/gpt/sequences/1/attention/1/0", {{"hide", ""}});
    REQUIRE(r.status == 200);
    CHECK(r.body["mask"] == "causal");
    for (const auto& row : r.body["weights"]) {
      double s = 0;
      for (double w : row) s += w;
      CHECK(std::abs(s - 1.0) < 1e-12);
    }
    CHECK(r.body["edges"].size() == 2 * r.body["weights"].size() - 1);  // row 0 has one admissible key
  }

  TEST_CASE("hiding matches the renormalization oracle") {
    const auto& b = fixture().gpt;
    for (std::size_t hi = 0; hi < b.heads.size(); ++hi) {
      const auto& h = b.heads[hi];
      for (const auto& raw : head_attention(h, Mask::causal)) {
        const auto path = "/models/gpt/sequences/" + std::to_string(raw.sequence_id) + "/attention/" +
                          std::to_string(h.layer) + "/" + std::to_string(h.head);
        for (const auto& [q, hk, hq] : std::vector<std::tuple<QueryParams, std::set<int>, std::set<int>>>{
                 {{{"hide", "0"}}, {0}, {0}},
                 {{{"hide_keys", "0"}}, {0}, {}},
                 {{{"hide", "1"}, {"hide_queries", "3"}}, {1}, {1, 3}}}) {
          const auto r = get(path, q);
          REQUIRE(r.status == 200);
          const auto o = oracle::renormalize(raw, hk, hq);
          CHECK(r.body["query_positions"].get<std::vector<int>>() == o.query_positions);
          REQUIRE(r.body["weights"].size() == o.rows.size());
          for (std::size_t i = 0; i < o.rows.size(); ++i) {
            CHECK(r.body["zero_rows"][i].get<bool>() == o.zero[i]);
            for (std::size_t j = 0; j < o.rows[i].size(); ++j)
              CHECK(std::abs(r.body["weights"][i][j].get<double>() - o.rows[i][j]) < 1e-12);
          }
        }
      }
    }
    // hiding only key 0 in a causal model empties query row 0
    const auto r = get("/models/gpt/sequences/0/attention/0/0", {{"hide_keys", "0"}});
    CHECK(r.body["zero_rows"][0] == true);
  }

  TEST_CASE("attention errors") {
    CHECK(get("/models/gpt/sequences/0/attention/0/0", {{"hide", "a,b"}}).status == 400);
    CHECK(get("/models/gpt/sequences/0/attention/0/0", {{"hide", "-1"}}).status == 400);
    CHECK(get("/models/gpt/sequences/0/attention/0/0", {{"threshold", "2"}}).status == 400);
    CHECK(get("/models/gpt/sequences/99/attention/0/0").status == 404);
    CHECK(get("/models/gpt/sequences/0/attention/5/0").status == 404);
    CHECK(get("/models/nope/sequences/0/attention/0/0").status == 404);
    CHECK(get("/nothing").status == 404);
  }

  TEST_CASE("image attention carries both edge sets") {
    const auto& b = fixture().img;
    for (int sid = 0; sid < 3; ++sid) {
      const auto r = get("/models/img/sequences/" + std::to_string(sid) + "/attention/0/1", {{"hide", "3"}});
      REQUIRE(r.status == 200);
      const auto& e = r.body["image_edges"];
      const auto raw = head_attention(b.heads[1], Mask::none)[static_cast<std::size_t>(sid)];
      // one strongest edge per query, computed on the unhidden matrix
      CHECK(e["strongest"].size() == static_cast<std::size_t>(raw.num_queries()));
      const auto os = oracle::image_strongest(raw, 0);
      const auto ot = oracle::image_threshold(raw, 0.1, 0);
      REQUIRE(e["strongest"].size() == os.size());
      for (std::size_t i = 0; i < os.size(); ++i) {
        CHECK(e["strongest"][i]["key_position"] == os[i].key_position);
        CHECK(e["strongest"][i]["to_cls"] == os[i].to_cls);
      }
      CHECK(e["threshold"].size() == ot.size());
      CHECK(e["threshold_value"] == 0.1);
      const auto r2 = get("/models/img/sequences/" + std::to_string(sid) + "/attention/0/1", {{"threshold", "0.05"}});
      CHECK(r2.body["image_edges"]["threshold"].size() == oracle::image_threshold(raw, 0.05, 0).size());
    }
    CHECK_FALSE(get("/models/gpt/sequences/0/attention/0/0").body.contains("image_edges"));
  }

  TEST_CASE("search against a grep of the token table") {
    std::vector<json> table;
    std::ifstream in(fixture().dir / "gpt" / "tokens.jsonl");
    for (std::string line; std::getline(in, line);) table.push_back(json::parse(line));
    REQUIRE(table.size() == fixture().gpt.heads[0].tokens.size());

    for (const auto& word : fixture_vocabulary()) {
      std::vector<int> expected;
      for (const auto& t : table)
        if (t["text"] == word) expected.push_back(t["token_id"]);
      const auto r = get("/models/gpt/search", {{"q", word}});
      REQUIRE(r.status == 200);
      REQUIRE(r.body["heads"].size() == 4);
      for (const auto& h : r.body["heads"]) {
        CHECK(h["matches"].get<std::vector<int>>() == expected);
        if (expected.empty()) CHECK(h["dispersion"]["clusters"] == 0);
      }
    }
    const auto none = get("/models/gpt/search", {{"q", "zebra"}});
    for (const auto& h : none.body["heads"]) {
      CHECK(h["matches"].empty());
      CHECK(h["dispersion"]["clusters"] == 0);
    }
    CHECK(get("/models/gpt/search", {{"q", "THE"}}).body["heads"][0]["matches"].empty());
  }

  TEST_CASE("prefix and substring contain exact matches") {
    const auto ids = [](const ApiResponse& r) {
      const auto v = r.body["heads"][0]["matches"].get<std::vector<int>>();
      return std::set<int>(v.begin(), v.end());
    };
    const auto exact = ids(get("/models/gpt/search", {{"q", "th"}, {"mode", "exact"}}));
    const auto prefix = ids(get("/models/gpt/search", {{"q", "th"}, {"mode", "prefix"}}));
    const auto sub = ids(get("/models/gpt/search", {{"q", "th"}, {"mode", "substring"}}));
    CHECK(std::includes(prefix.begin(), prefix.end(), exact.begin(), exact.end()));
    CHECK(std::includes(sub.begin(), sub.end(), prefix.begin(), prefix.end()));
    CHECK(prefix.size() > exact.size());
  }

  TEST_CASE("search scope and errors") {
    CHECK(get("/models/gpt/search", {{"q", "cat"}, {"layer", "1"}, {"head", "0"}}).body["heads"].size() == 1);
    CHECK(get("/models/gpt/search", {{"q", "  "}}).status == 400);
    CHECK(get("/models/gpt/search").status == 400);
    CHECK(get("/models/gpt/search", {{"q", "cat"}, {"mode", "fuzzy"}}).status == 400);
    CHECK(get("/models/gpt/search", {{"q", "cat"}, {"layer", "9"}, {"head", "0"}}).status == 404);
    CHECK(get("/models/gpt/search", {{"q", "cat"}, {"layer", "1"}}).status == 400);
  }

  TEST_CASE("diagnostics endpoint") {
    const auto r = get("/models/broken/diagnostics");
    REQUIRE(r.status == 200);
    REQUIRE(r.body["rows"].size() == 4);
    CHECK(r.body["rows"][1]["degraded"] == true);
    CHECK(r.body["rows"][0].contains("chosen_scale"));
  }

  TEST_CASE("every endpoint answers within 500 ms and identically twice") {
    const std::vector<std::pair<std::string, QueryParams>> calls{
        {"/models", {}},
        {"/models/gpt/matrix", {}},
        {"/models/img/matrix", {{"method", "tsne"}}},
        {"/models/gpt/heads/1/1", {}},
        {"/models/gpt/sequences/2/attention/1/1", {{"hide", "0,2"}}},
        {"/models/img/sequences/0/attention/1/0", {}},
        {"/models/gpt/search", {{"q", "the"}, {"mode", "prefix"}}},
        {"/models/gpt/diagnostics", {}}};
    for (const auto& [path, q] : calls) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = get(path, q);
      const auto ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      CHECK_MESSAGE(ms < 500.0, path);
      CHECK(r.status == 200);
      CHECK(get(path, q).body == r.body);
    }
  }

  TEST_CASE("http round trip") {
    httplib::Server srv;
    mount_routes(srv, fixture().service, std::string("*"));
    const int port = srv.bind_to_any_port("127.0.0.1");
    REQUIRE(port > 0);
    std::thread t([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);
    auto res = cli.Get("/models");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    CHECK(res->get_header_value("Content-Type") == "application/json");
    CHECK(json::parse(res->body).size() == 3);
    res = cli.Get("/models/gpt/sequences/0/attention/0/0?hide=0");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["hidden_keys"] == json({0}));
    res = cli.Get("/models/gpt/matrix?method=umap");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(json::parse(res->body)["valid"] == json({"pca"}));
    srv.stop();
    t.join();
  }

  TEST_CASE("match modes") {
    CHECK(token_matches("there", "the", MatchMode::prefix));
    CHECK_FALSE(token_matches("there", "the", MatchMode::exact));
    CHECK(token_matches("other", "the", MatchMode::substring));
    CHECK_FALSE(token_matches("The", "the", MatchMode::exact));
    for (auto m : {MatchMode::exact, MatchMode::prefix, MatchMode::substring}) CHECK(match_mode_from_string(to_string(m)) == m);
  }
}

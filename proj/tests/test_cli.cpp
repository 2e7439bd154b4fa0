#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"

#include "attnatlas/hash.hpp"
#include "attnatlas/server.hpp"
#include "attnatlas/synthetic.hpp"
#include "helpers.hpp"

using namespace attnatlas;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out, err;
};

Run run_cli(const std::string& args, const testutil::TempDir& scratch) {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string("'") + ATTNATLAS_CLI + "' " + args + " >'" + out.string() + "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto end = line.find(',', start);
    out.push_back(line.substr(start, end == std::string::npos ? std::string::npos : end - start));
    if (end == std::string::npos) break;
    start = end + 1;
  }
  return out;
}

std::map<std::string, std::string> tree_hashes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = sha256_file(e.path());
  return out;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("validate exit codes") {
    testutil::TempDir dir("cli_validate");
    write_bundle(make_fixture_bundle({}), dir / "good");
    auto r = run_cli("validate '" + (dir / "good").string() + "'", dir);
    CHECK(r.code == 0);
    CHECK(r.out.find("4 heads, d=4, 3 sequences") != std::string::npos);

    auto bad = make_fixture_bundle({});
    bad.heads[3].queries(0, 0) = std::numeric_limits<double>::infinity();
    write_bundle(bad, dir / "bad");
    r = run_cli("validate '" + (dir / "bad").string() + "'", dir);
    CHECK(r.code == 2);
    CHECK(r.out.find("l1_h1.qk") != std::string::npos);

    write_bundle(make_fixture_bundle({}), dir / "short");
    fs::resize_file(dir / "short" / "l0_h0.qk", 20);
    r = run_cli("validate '" + (dir / "short").string() + "'", dir);
    CHECK(r.code == 2);
    CHECK(r.out.find("l0_h0.qk: expected") != std::string::npos);

    CHECK(run_cli("validate '" + (dir / "missing").string() + "'", dir).code == 1);
    CHECK(run_cli("frobnicate", dir).code == 2);
  }

  TEST_CASE("precompute, rerun, resume, serve-load") {
    testutil::TempDir dir("cli_pre");
    FixtureSpec spec;
    spec.with_weights = true;
    write_bundle(make_fixture_bundle(spec), dir / "in");
    const std::string base = "precompute --in '" + (dir / "in").string() + "' --methods pca,umap --dims 2 --seed 3 ";

    auto r = run_cli(base + "--out '" + (dir / "a").string() + "'", dir);
    REQUIRE(r.code == 0);
    CHECK(r.err.find("[4/4]") != std::string::npos);
    const auto ref = tree_hashes(dir / "a");

    r = run_cli(base + "--out '" + (dir / "a").string() + "'", dir);
    CHECK(r.code == 0);
    CHECK(r.err.find("already complete") != std::string::npos);
    CHECK(tree_hashes(dir / "a") == ref);

    r = run_cli(base + "--out '" + (dir / "b").string() + "' --max-new-heads 1", dir);
    CHECK(r.code == 1);
    CHECK(r.err.find("resume") != std::string::npos);
    r = run_cli(base + "--out '" + (dir / "b").string() + "' --jobs 2", dir);
    CHECK(r.code == 0);
    CHECK(r.err.find("3 computed, 1 reused") != std::string::npos);
    CHECK(tree_hashes(dir / "b") == ref);

    std::vector<std::string> errors;
    const auto svc = AtlasService::load_dir(dir / "a", &errors);
    CHECK(errors.empty());
    CHECK(svc.atlases().size() == 1);

    CHECK(run_cli(base + "--out x --methods mds", dir).code == 2);
    CHECK(run_cli(base + "--out x --dims 4", dir).code == 2);
    CHECK(run_cli("precompute --in '" + (dir / "nope").string() + "' --out x", dir).code == 1);
  }

  TEST_CASE("diagnose writes rows and a footer") {
    testutil::TempDir dir("cli_diag");
    for (bool weights : {false, true}) {
      FixtureSpec spec;
      spec.with_weights = weights;
      const auto in = dir / (weights ? "in_w" : "in"), out = dir / (weights ? "atlas_w" : "atlas");
      write_bundle(make_fixture_bundle(spec), in);
      REQUIRE(run_cli("precompute --in '" + in.string() + "' --out '" + out.string() + "'", dir).code == 0);
      const auto csv_path = dir / "diag.csv";
      REQUIRE(run_cli("diagnose --atlas '" + out.string() + "' --out '" + csv_path.string() + "'", dir).code == 0);
      std::ifstream f(csv_path);
      std::stringstream ss;
      ss << f.rdbuf();
      const auto ls = lines(ss.str());
      REQUIRE(ls.size() == 7);  // comment, header, 4 heads, footer
      CHECK(ls[0].rfind("#", 0) == 0);
      CHECK(fields(ls[1]).size() == 8);
      double sum = 0;
      for (int i = 2; i < 6; ++i) {
        const auto row = fields(ls[i]);
        REQUIRE(row.size() == 8);
        sum += std::stod(row[2]);
        if (weights) {
          CHECK_FALSE(row[4].empty());
        } else {
          CHECK(row[4].empty());
        }
      }
      const auto footer = fields(ls[6]);
      CHECK(footer[0] == "mean");
      CHECK(std::abs(std::stod(footer[2]) - sum / 4) < 1e-12);
      CHECK(footer[4].empty() != weights);

      const auto stdout_run = run_cli("diagnose --atlas '" + out.string() + "'", dir);
      CHECK(stdout_run.code == 0);
      CHECK(stdout_run.out == ss.str());
    }
    CHECK(run_cli("diagnose --atlas '" + (dir / "missing").string() + "'", dir).code == 1);
  }
}

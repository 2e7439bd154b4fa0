// attnatlas: validate exports, precompute atlases, write diagnostics, serve.
#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"

#include "attnatlas/atlas.hpp"
#include "attnatlas/diagnostics.hpp"
#include "attnatlas/pipeline.hpp"
#include "attnatlas/server.hpp"
#include "attnatlas/store.hpp"

namespace fs = std::filesystem;
using namespace attnatlas;

namespace {

constexpr int kOk = 0;
constexpr int kIoFailure = 1;
constexpr int kViolations = 2;

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted = true; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    auto end = s.find(',', start);
    if (end == std::string::npos) end = s.size();
    if (end > start) out.push_back(s.substr(start, end - start));
    start = end + 1;
  }
  return out;
}

void report_ingest(const IngestResult& r, std::ostream& os) {
  for (const auto& v : r.violations) os << "  " << v << '\n';
}

int cmd_validate(const fs::path& in) {
  const auto r = ingest(in);
  if (r.io_failure) {
    std::cerr << "validate: cannot read export\n";
    report_ingest(r, std::cerr);
    return kIoFailure;
  }
  if (!r.ok()) {
    std::cout << in.string() << ": " << r.violations.size() << " violation(s)\n";
    report_ingest(r, std::cout);
    return kViolations;
  }
  const auto& b = *r.bundle;
  std::size_t tokens = b.heads.empty() ? 0 : b.heads.front().tokens.size();
  std::cout << in.string() << ": ok\n"
            << "  model " << b.model.model_id << " (" << to_string(b.model.modality) << ", "
            << to_string(b.model.attention_direction) << ")\n"
            << "  " << b.heads.size() << " heads, d=" << b.model.head_dim << ", " << b.sequences.size()
            << " sequences, " << tokens << " tokens per head\n";
  return kOk;
}

struct PrecomputeArgs {
  fs::path in, out;
  std::string methods = "pca", dims = "2";
  std::uint64_t seed = 0;
  int sample_cap = 4000;
  int jobs = 1;
  int tsne_iterations = 1000;
  int umap_epochs = 200;
  int max_new_heads = -1;
};

int cmd_precompute(const PrecomputeArgs& a) {
  PrecomputeConfig cfg;
  cfg.methods.clear();
  cfg.dims.clear();
  try {
    std::set<std::string> seen;
    for (const auto& m : split_list(a.methods))
      if (seen.insert(m).second) cfg.methods.push_back(method_from_string(m));
    std::set<int> dims;
    for (const auto& d : split_list(a.dims)) {
      const int v = std::stoi(d);
      if (v != 2 && v != 3) throw Error("dims must be a subset of {2,3}");
      if (dims.insert(v).second) cfg.dims.push_back(v);
    }
  } catch (const std::exception& e) {
    std::cerr << "precompute: " << e.what() << '\n';
    return kViolations;
  }
  if (cfg.methods.empty() || cfg.dims.empty()) {
    std::cerr << "precompute: --methods and --dims must be nonempty\n";
    return kViolations;
  }
  cfg.seed = a.seed;
  cfg.sample_cap = a.sample_cap;
  cfg.jobs = a.jobs;
  cfg.tsne_iterations = a.tsne_iterations;
  cfg.umap_epochs = a.umap_epochs;
  if (a.max_new_heads >= 0) cfg.max_new_heads = a.max_new_heads;
  cfg.should_stop = [] { return g_interrupted.load(); };
  cfg.progress = [](const std::string& msg) { std::cerr << msg << '\n'; };

  const auto r = ingest(a.in);
  if (r.io_failure) {
    std::cerr << "precompute: cannot read export\n";
    report_ingest(r, std::cerr);
    return kIoFailure;
  }
  if (!r.ok()) {
    std::cerr << "precompute: export has " << r.violations.size() << " violation(s)\n";
    report_ingest(r, std::cerr);
    return kViolations;
  }

  std::signal(SIGINT, on_sigint);
  PrecomputeReport rep;
  try {
    rep = precompute(*r.bundle, a.out, cfg);
  } catch (const std::exception& e) {
    std::cerr << "precompute: " << e.what() << '\n';
    return kIoFailure;
  }
  if (rep.noop) {
    std::cerr << "atlas " << a.out.string() << " is already complete\n";
    return kOk;
  }
  std::cerr << rep.computed << " computed, " << rep.reused << " reused, " << rep.degraded << " degraded\n";
  if (!rep.complete) {
    std::cerr << "stopped before every head finished; rerun the same command to resume\n";
    return kIoFailure;
  }
  return kOk;
}

int cmd_diagnose(const fs::path& atlas_dir, const std::string& out) {
  Atlas atlas;
  try {
    atlas = load_atlas(atlas_dir, true);
  } catch (const std::exception& e) {
    std::cerr << "diagnose: " << e.what() << '\n';
    return kIoFailure;
  }
  std::vector<HeadDiagnostics> rows;
  for (const auto& h : atlas.heads) {
    if (h.diagnostics)
      rows.push_back(*h.diagnostics);
    else
      std::cerr << "diagnose: " << head_dir_name(h.layer, h.head) << " is degraded (" << h.degraded_reason
                << "), omitted\n";
  }
  const auto csv = diagnostics_csv(rows, true);
  if (out == "-") {
    std::cout << csv;
    return kOk;
  }
  std::ofstream f(out, std::ios::trunc);
  if (!f) {
    std::cerr << "diagnose: cannot write " << out << '\n';
    return kIoFailure;
  }
  f << csv;
  return f ? kOk : kIoFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"attention atlas tools"};
  app.require_subcommand(1);

  fs::path validate_in;
  auto* validate = app.add_subcommand("validate", "check an export directory");
  validate->add_option("path", validate_in, "export directory")->required();

  PrecomputeArgs pa;
  auto* pre = app.add_subcommand("precompute", "build or resume an atlas");
  pre->add_option("--in", pa.in, "export directory")->required();
  pre->add_option("--out", pa.out, "atlas directory")->required();
  pre->add_option("--methods", pa.methods, "comma list of pca,tsne,umap")->capture_default_str();
  pre->add_option("--dims", pa.dims, "comma list of 2,3")->capture_default_str();
  pre->add_option("--seed", pa.seed)->capture_default_str();
  pre->add_option("--sample-cap", pa.sample_cap, "max tokens projected per head")->capture_default_str()->check(CLI::Range(10, 1 << 30));
  pre->add_option("--jobs", pa.jobs, "worker threads")->capture_default_str()->check(CLI::Range(1, 1024));
  pre->add_option("--tsne-iterations", pa.tsne_iterations)->capture_default_str()->check(CLI::Range(1, 1 << 20));
  pre->add_option("--umap-epochs", pa.umap_epochs)->capture_default_str()->check(CLI::Range(1, 1 << 20));
  pre->add_option("--max-new-heads", pa.max_new_heads, "stop after this many heads (leaves a resumable atlas)");

  fs::path diag_atlas;
  std::string diag_out = "-";
  auto* diag = app.add_subcommand("diagnose", "write per-head diagnostics as CSV");
  diag->add_option("--atlas", diag_atlas)->required();
  diag->add_option("--out", diag_out, "CSV path, - for stdout")->capture_default_str();

  ServeOptions so;
  std::string cors;
  auto* srv = app.add_subcommand("serve", "serve atlases over HTTP");
  srv->add_option("--data-dir", so.data_dir)->required();
  srv->add_option("--port", so.port)->capture_default_str()->check(CLI::Range(0, 65535));
  srv->add_option("--host", so.host)->capture_default_str();
  srv->add_option("--cors-origin", cors);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kViolations;
  }

  if (*validate) return cmd_validate(validate_in);
  if (*pre) return cmd_precompute(pa);
  if (*diag) return cmd_diagnose(diag_atlas, diag_out);
  if (*srv) {
    if (!cors.empty()) so.cors_origin = cors;
    return serve(so);
  }
  return kViolations;
}

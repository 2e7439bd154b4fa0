// Writes a synthetic export directory for smoke tests and demos.
#include <iostream>

#include "CLI11.hpp"

#include "attnatlas/synthetic.hpp"

using namespace attnatlas;

int main(int argc, char** argv) {
  CLI::App app{"write a synthetic export"};
  FixtureSpec spec;
  std::string out, modality = "text", direction = "bidirectional";
  app.add_option("out", out)->required();
  app.add_option("--modality", modality)->capture_default_str();
  app.add_option("--direction", direction)->capture_default_str();
  app.add_option("--layers", spec.num_layers)->capture_default_str();
  app.add_option("--heads", spec.heads_per_layer)->capture_default_str();
  app.add_option("--dim", spec.head_dim)->capture_default_str();
  app.add_option("--sequences", spec.num_sequences)->capture_default_str();
  app.add_option("--min-length", spec.min_length)->capture_default_str();
  app.add_option("--max-length", spec.max_length)->capture_default_str();
  app.add_option("--query-scale", spec.query_scale)->capture_default_str();
  app.add_option("--seed", spec.seed)->capture_default_str();
  app.add_flag("--weights", spec.with_weights);
  CLI11_PARSE(app, argc, argv);

  try {
    spec.modality = modality_from_string(modality);
    spec.direction = direction_from_string(direction);
    spec.model_id = "fixture-" + modality;
    write_bundle(make_fixture_bundle(spec), out);
  } catch (const std::exception& e) {
    std::cerr << e.what() << '\n';
    return 1;
  }
  return 0;
}

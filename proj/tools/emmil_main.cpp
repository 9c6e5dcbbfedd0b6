// Command-line front end: emmil synth|train|eval|heatmap|matrix --config <path>

#include <cstdio>
#include <exception>
#include <string>
#include <utility>

#include "CLI11.hpp"
#include "emmil/common.hpp"
#include "emmil/pipeline.hpp"

namespace {

int run(const std::string& command, const std::string& config_path, const std::string& image_id) {
  using namespace emmil;
  const auto config = pipeline::load_config(config_path);
  if (command == "synth") pipeline::cmd_synth(config);
  else if (command == "train") pipeline::cmd_train(config);
  else if (command == "eval") pipeline::cmd_eval(config);
  else if (command == "heatmap") pipeline::cmd_heatmap(config, image_id);
  else pipeline::cmd_matrix(config);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EM-based discriminative patch selection and decision fusion"};
  app.require_subcommand(1, 1);

  std::string config_path;
  std::string image_id;
  int threads = 1;

  const std::pair<const char*, const char*> commands[] = {
      {"synth", "generate the synthetic slide corpus"},
      {"train", "run EM patch selection and fit the fusion models"},
      {"eval", "score trained models on the test split"},
      {"heatmap", "write probability and selection maps for one image"},
      {"matrix", "train and evaluate every method variant"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file")->required();
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
    if (std::string(name) == "heatmap") sub->add_option("--image-id", image_id, "image to render")->required();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  emmil::set_thread_count(threads);
  try {
    return run(command, config_path, image_id);
  } catch (const emmil::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const emmil::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 4;
  }
}

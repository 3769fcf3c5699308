// rskelly: discrete-time risk-sensitive benchmarked portfolio toolkit.
// Modes: solve | check | simulate | evaluate | train | decompose | oracle.
// Exit codes: 0 success, 1 schema error, 2 condition failure (step index
// reported), 3 numerical failure.
#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rskelly/io.hpp"

int main(int argc, char** argv) {
  CLI::App app{"risk-sensitive benchmarked portfolio toolkit"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> modes = {
      {"solve", "backward value recursion: value CSV, condition and "
                "criterion reports"},
      {"check", "saddle-condition and exploration-bound verification"},
      {"simulate", "factor/allocation path CSV under a chosen policy"},
      {"evaluate", "Monte Carlo criterion estimates"},
      {"train", "policy-gradient / actor-critic training"},
      {"decompose", "three-component portfolio decompositions"},
      {"oracle", "brute-force stage-game and duality verification"}};

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed_value = 0;
  std::size_t paths_value = 0;
  bool quiet = false;

  std::vector<CLI::App*> subs;
  std::vector<CLI::Option*> seed_opts, paths_opts;
  for (const auto& [name, desc] : modes) {
    CLI::App* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "JSON configuration file")
        ->required();
    sub->add_option("--out", out_dir, "output directory (overrides config)");
    seed_opts.push_back(
        sub->add_option("--seed", seed_value, "RNG seed override"));
    paths_opts.push_back(
        sub->add_option("--paths", paths_value, "path-count override"));
    sub->add_flag("--quiet", quiet, "suppress informational output");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  std::string mode;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::size_t> paths_override;
  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (subs[i]->parsed()) {
      mode = modes[i].first;
      if (seed_opts[i]->count() > 0) seed_override = seed_value;
      if (paths_opts[i]->count() > 0) paths_override = paths_value;
    }
  }

  try {
    rskelly::io::RunConfig cfg = rskelly::io::load_config(config_path);
    if (!cfg.mode.empty() && cfg.mode != mode)
      throw rskelly::SchemaError("config mode '" + cfg.mode +
                                 "' does not match command '" + mode + "'");
    cfg.mode = mode;
    rskelly::io::apply_overrides(
        cfg, seed_override, paths_override,
        out_dir.empty() ? std::nullopt
                        : std::optional<std::string>(out_dir));
    return rskelly::io::run(cfg, quiet);
  } catch (const rskelly::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 1;
  } catch (const rskelly::ConditionError& e) {
    std::cerr << "condition failure at step " << e.step() << ": " << e.what()
              << "\n";
    return 2;
  } catch (const rskelly::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  }
}

// SPDX-License-Identifier: Apache-2.0
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "e5kit/config.hpp"
#include "e5kit/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"e5kit: contrastive text-embedding pipeline"};
  std::string command;
  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool list_keys = false;

  std::string choices;
  for (const auto& c : e5kit::command_names()) choices += (choices.empty() ? "" : ", ") + c;
  app.add_option("command", command, "one of: " + choices);
  app.add_option("--config", config_path, "key=value config file");
  app.add_option("--set", overrides, "override a config key, key=value (repeatable)");
  app.add_option("--seed", seed, "global seed override");
  app.add_flag("--list-keys", list_keys, "print every config key with its default and exit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : e5kit::kExitUsage;
  }

  if (list_keys) {
    for (const auto& k : e5kit::kConfigKeys) std::cout << k.key << '=' << k.fallback << "  # " << k.help << '\n';
    return 0;
  }
  if (command.empty()) {
    e5kit::report_error(std::cerr, "usage", "missing command; expected one of: " + choices);
    return e5kit::kExitUsage;
  }

  e5kit::RunConfig cfg;
  try {
    if (config_path) cfg.load_file(*config_path);
    for (const auto& kv : overrides) cfg.assign(kv);
    if (seed) cfg.set("seed", std::to_string(*seed));
  } catch (const e5kit::UsageError& e) {
    e5kit::report_error(std::cerr, "usage", e.what());
    return e5kit::kExitUsage;
  } catch (const e5kit::Error& e) {
    e5kit::report_error(std::cerr, "usage", e.what());
    return e5kit::kExitUsage;
  }
  return e5kit::run(command, cfg, std::cout, std::cerr);
}

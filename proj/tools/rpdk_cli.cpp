// Copyright 2026 The rpdk Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Command-line front end for the rpdk experiments.
//
//   rpdk_cli <command> [--config FILE] [--seed N] [--out DIR]
//
// Exit status: 0 when every assertion of the command holds, 1 when one fails
// or the command raises, 2 on usage errors.

#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "rpdk/harness.hpp"

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Options& opts) {
  cmd->add_option("--config", opts.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", opts.seed, "first seed; the seed list keeps its length and counts up from here");
  cmd->add_option("--out", opts.out, "output directory (overrides out_dir)");
}

rpdk::ExperimentConfig resolve(const Options& opts) {
  rpdk::ExperimentConfig config = opts.config.empty() ? rpdk::ExperimentConfig{} : rpdk::load_config(opts.config);
  if (opts.seed) {
    for (std::size_t i = 0; i < config.seeds.size(); ++i) config.seeds[i] = *opts.seed + i;
    for (std::size_t i = 0; i < config.gradcheck.seeds.size(); ++i) config.gradcheck.seeds[i] = *opts.seed + i;
  }
  if (!opts.out.empty()) config.out_dir = opts.out;
  rpdk::validate_config(config);
  return config;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rpdk experiment harness"};
  app.require_subcommand(1);
  Options opts;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every registered layer");
  auto* bench = app.add_subcommand("bench-rp", "op counts and peak allocation of RP vs legacy pooling");
  auto* train = app.add_subcommand("train-compare", "standard vs dacconv twins: epochs to converge");
  auto* eval = app.add_subcommand("eval-occlusion", "per-tier AP with and without the multi-scale module");
  auto* plots = app.add_subcommand("export-plots", "CSV series from the train and eval reports");
  for (auto* cmd : {gradcheck, bench, train, eval, plots}) add_common(cmd, opts);
  CLI11_PARSE(app, argc, argv);

  try {
    const rpdk::ExperimentConfig config = resolve(opts);
    rpdk::CommandResult result;
    if (*gradcheck) result = rpdk::cmd_gradcheck(config, rpdk::default_layer_registry(), std::cout);
    else if (*bench) result = rpdk::cmd_bench_rp(config, std::cout);
    else if (*train) result = rpdk::cmd_train_compare(config, std::cout);
    else if (*eval) result = rpdk::cmd_eval_occlusion(config, std::cout);
    else result = rpdk::cmd_export_plots(config, std::cout);
    return result.exit_code;
  } catch (const rpdk::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

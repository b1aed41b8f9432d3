#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "branchflow/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Multi-head PINN solver for branched-flow ray dynamics"};
  std::string mode;
  std::string config;
  branchflow::CliOverrides o;

  app.add_option("mode", mode, "train-base | transfer-ic | transfer-potential | classical | oracle | eval | plot | bench")
      ->required()
      ->check(CLI::IsMember({"train-base", "transfer-ic", "transfer-potential", "classical", "oracle", "eval", "plot",
                             "bench"}));
  app.add_option("--config", config, "experiment config (JSON)")->required();
  app.add_option("--seed", o.seed, "seed for network init, collocation sampling and the discriminator");
  app.add_option("--epochs", o.epochs, "override the epoch budget")->check(CLI::NonNegativeNumber);
  app.add_option("--out", o.out, "output directory");
  app.add_flag("--gan", o.gan, "train adversarially (DEQGAN) instead of on the squared residual");
  app.add_option("--potential", o.potential, "potential JSON");
  app.add_option("--checkpoint", o.checkpoint, "checkpoint JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  return branchflow::run_command(mode, config, o);
}

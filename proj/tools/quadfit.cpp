// Command-line entry point; subcommands are filled in as modules land.
#include <CLI11.hpp>

int main(int argc, char** argv) {
  CLI::App app{"articulated quadruped fitting"};
  app.require_subcommand(0);
  CLI11_PARSE(app, argc, argv);
  return 0;
}

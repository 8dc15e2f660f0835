#include "wepe/cli.hpp"

int main(int argc, char** argv) { return wepe::cli::run_command(argc, argv); }

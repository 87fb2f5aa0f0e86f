#include "mesanet_cli/commands.hpp"

int main(int argc, char** argv) { return mesanet::cli::run_cli(argc, argv); }

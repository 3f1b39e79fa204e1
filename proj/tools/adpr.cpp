#include "adpr/cli.hpp"

int main(int argc, char** argv) { return adpr::cli::run_cli(argc, argv); }

#include "kkth/cli.hpp"

int main(int argc, char** argv) { return kkth::cli::run_cli(argc, argv); }

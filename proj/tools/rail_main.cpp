#include "rail/cli.hpp"

int main(int argc, char** argv) { return rail::cli::cli_run(argc, argv); }

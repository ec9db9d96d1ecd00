#include "tokenlab/cli.hpp"

int main(int argc, char** argv) { return tokenlab::cli::run_argv(argc, argv); }

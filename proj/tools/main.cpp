#include "sonostack/cli.hpp"

int main(int argc, char** argv) { return sonostack::cli::run(argc, argv); }

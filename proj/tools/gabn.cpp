#include "gabn/cli.hpp"

int main(int argc, char** argv) { return gabn::cli::run(argc, argv); }

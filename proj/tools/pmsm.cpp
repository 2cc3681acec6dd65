#include "pmsm/cli.hpp"

int main(int argc, char** argv) { return pmsm::cli::run(argc, argv); }

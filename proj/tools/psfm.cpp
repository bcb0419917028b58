#include "psfm/cli.hpp"

int main(int argc, char** argv) { return psfm::cli::Run(argc, argv); }

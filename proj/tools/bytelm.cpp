#include "bytelm/cli.hpp"

int main(int argc, char** argv) { return bytelm::cli::main(argc, argv); }

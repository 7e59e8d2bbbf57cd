#include "crabs/cli.hpp"

int main(int argc, char** argv) { return crabs::cli_main(argc, argv); }

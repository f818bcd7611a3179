#include "cli.hpp"

int main(int argc, char** argv) { return iterthink::cli_main(argc, argv); }

#include "cli.hpp"

int main(int argc, char** argv) { return saev::cli_main(argc, argv); }

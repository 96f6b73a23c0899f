#include "brtf/cli.hpp"

int main(int argc, char** argv) { return brtf::cli_main(argc, argv); }

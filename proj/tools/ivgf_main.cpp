#include "ivgf/cli.hpp"

int main(int argc, char** argv) { return ivgf::run_cli(argc, argv); }

#include "dualfuse/cli.hpp"

int main(int argc, char** argv) { return dualfuse::run_cli(argc, argv); }

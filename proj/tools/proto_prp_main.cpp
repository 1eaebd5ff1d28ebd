#include "protoprp/cli.hpp"

int main(int argc, char** argv) { return protoprp::run_cli(argc, argv); }

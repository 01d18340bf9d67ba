#include "anchor/cli.hpp"

int main(int argc, char** argv) { return anchor::run_cli(argc, argv); }

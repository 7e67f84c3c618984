#include "quantlab/cli.hpp"

int main(int argc, char** argv) { return quantlab::run_cli(argc, argv); }

#include "looprec/cli.hpp"

int main(int argc, char** argv) { return looprec::run_cli(argc, argv); }

#include "mambatrans/cli.hpp"

int main(int argc, char** argv) { return mambatrans::run_cli(argc, argv); }

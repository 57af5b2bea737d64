#include "sketchdiff/cli.hpp"

int main(int argc, char** argv) { return sketchdiff::cli_dispatch(argc, argv); }

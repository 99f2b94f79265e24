#include "mvar/cli.hpp"

int main(int argc, char** argv) { return mvar::run_cli(argc, argv); }

#include "gradegap/cli.hpp"

int main(int argc, char** argv) { return gradegap::cli::run(argc, argv); }

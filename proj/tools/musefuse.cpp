#include "musefuse/cli.hpp"

int main(int argc, char** argv) { return musefuse::cli::run(argc, argv); }

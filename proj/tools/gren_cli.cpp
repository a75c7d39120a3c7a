#include "gren/cli.hpp"

int main(int argc, char** argv) { return gren::cli::run(argc, argv); }

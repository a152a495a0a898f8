#include "scenepred/cli.hpp"

int main(int argc, char** argv) { return scenepred::cli::main(argc, argv); }

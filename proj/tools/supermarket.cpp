#include "supermarket/cli.hpp"

int main(int argc, char** argv) { return supermarket::cli_dispatch(argc, argv); }

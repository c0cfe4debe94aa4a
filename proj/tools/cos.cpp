#include "costep/cli.hpp"

int main(int argc, char** argv) { return costep::cli::dispatch(argc, argv); }

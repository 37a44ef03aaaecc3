#include "agcgan/cli.hpp"

int main(int argc, char** argv) { return agc::cli::dispatch(argc, argv); }

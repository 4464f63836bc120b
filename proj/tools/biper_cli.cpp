#include "biper/cli.hpp"

int main(int argc, char** argv) { return biper::cli::run(argc, argv); }

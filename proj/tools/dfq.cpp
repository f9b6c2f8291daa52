#include "dfq_cli.hpp"

int main(int argc, char** argv) { return dfq::cli::run(argc, argv); }

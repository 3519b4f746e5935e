#include "stochtransport/cli.hpp"

int main(int argc, char** argv) { return stochtransport::cli::main_entry(argc, argv); }

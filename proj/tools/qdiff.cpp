#include "qdiff/cli.hpp"

int main(int argc, char** argv) { return qdiff::cli::dispatch(argc, argv); }

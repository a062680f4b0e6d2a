#include "cloze/cli.hpp"

int main(int argc, char** argv) { return cloze::run_cli(argc, argv); }

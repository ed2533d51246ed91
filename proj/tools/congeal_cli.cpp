#include "congeal/cli.hpp"

int main(int argc, char** argv) { return congeal::run_cli(argc, argv); }

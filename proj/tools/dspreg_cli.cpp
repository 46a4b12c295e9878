#include "dspreg/commands.hpp"

int main(int argc, char** argv) { return dspreg::run_cli(argc, argv); }

#include "drivenet/cli.hpp"

int main(int argc, char** argv) { return drivenet::run(argc, argv); }

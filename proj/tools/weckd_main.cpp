#include "weckd/run.hpp"

int main(int argc, char** argv) { return weckd::run::main(argc, argv); }

#include <deop/cli.hpp>

int main(int argc, char** argv) { return deop::cli_main(argc, argv); }

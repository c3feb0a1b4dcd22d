#include <vector>

#include "derma/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return derma::cli::dispatch(args);
}

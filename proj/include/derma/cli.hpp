#pragma once

#include <iostream>
#include <string>
#include <vector>

namespace derma::cli {

inline int dispatch(const std::vector<std::string>& args) {
    (void)args;
    std::cerr << "not wired up yet\n";
    return 1;
}

}  // namespace derma::cli

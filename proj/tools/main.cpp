#include <string>
#include <vector>

#include "pguard/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return pguard::dispatch(args);
}

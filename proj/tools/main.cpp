#include <vector>

#include "sundial/cli.hpp"

int main(int argc, char** argv) {
    return sundial::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}

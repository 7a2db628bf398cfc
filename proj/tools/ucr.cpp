// placeholder until the subcommand wiring lands
#include <cstdio>

int main() {
    std::puts("ucr 0.1.0");
    return 0;
}

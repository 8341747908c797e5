#include <cstdio>

int main() {
    std::puts("wcmorph: pipeline CLI placeholder");
    return 0;
}

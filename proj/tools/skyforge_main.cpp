#include <cstdio>

int main() {
    std::puts("skyforge: pipeline CLI (under construction)");
    return 0;
}

#include <cstdio>

int main() {
    std::puts("moeflow: subcommands not wired yet");
    return 1;
}

#include <cstdio>

int main() {
    std::puts("siamaf: subcommands not wired up yet");
    return 1;
}

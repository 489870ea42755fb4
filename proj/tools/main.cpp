#include <cstdio>

int main() {
  std::fprintf(stderr, "derain: command interface not wired up yet\n");
  return 2;
}

#include <cstdio>

int main() {
  std::puts("erlab: cli not wired up yet");
  return 0;
}

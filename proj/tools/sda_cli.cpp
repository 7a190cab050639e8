#include <cstdio>

int main() {
  std::puts("sda: work in progress");
  return 1;
}

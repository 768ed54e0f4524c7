#include <cstdio>

int main() {
  std::puts("scsf: placeholder");
  return 0;
}

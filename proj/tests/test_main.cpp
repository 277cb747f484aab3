#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <malloc.h>

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  doctest::Context ctx(argc, argv);
  return ctx.run();
}

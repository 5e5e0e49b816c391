#include "deduce/alloc.hpp"

#include <malloc.h>

namespace deduce {

void tune_allocator() {
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 512 << 20);
    return true;
  }();
  (void)done;
}

}  // namespace deduce

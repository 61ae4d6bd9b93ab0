#pragma once

#include <malloc.h>

namespace retovla::tools {

// Training reallocates the same multi-megabyte activation buffers every step.
// Keeping them on the heap instead of fresh mmap regions avoids a page-fault
// storm on each allocation.
inline void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
}

}  // namespace retovla::tools

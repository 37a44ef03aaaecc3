#pragma once

// Process-level settings for long training runs.

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace agc {

// Keeps large im2col buffers on the heap instead of mapping and unmapping
// them on every convolution; removes most kernel time from training loops.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace agc

#pragma once

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace sdream {

/// Keeps large tensor buffers on the heap instead of fresh mmap'd pages.
/// Every forward pass allocates and frees buffers of the same sizes, and with
/// glibc defaults each of them is returned to the kernel and faulted in again.
inline void configure_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace sdream

#pragma once

namespace cmb {

// Raises the allocator's mmap/trim thresholds so the large short-lived
// buffers of a forward/backward pass recycle through the heap free list
// instead of hitting mmap/munmap on every op.
void tune_allocator();

} // namespace cmb

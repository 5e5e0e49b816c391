#pragma once

namespace deduce {

/// Keeps large activation buffers on the heap instead of fresh mmap pages,
/// which otherwise dominate the cost of every forward pass.
void tune_allocator();

}  // namespace deduce

#pragma once

namespace sepdrop {

/// Keeps large freed blocks in the heap instead of returning them to the
/// kernel. Training allocates and frees the same multi-megabyte activation
/// buffers every step; without this, page faults dominate a CPU step.
/// No-op outside glibc. Safe to call more than once.
void retain_freed_memory();

}  // namespace sepdrop

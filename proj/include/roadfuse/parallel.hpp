#pragma once

#include <functional>

namespace roadfuse {

// Worker count used by data-parallel loops (default 1).
void set_num_threads(int threads);
int num_threads() noexcept;

// Runs fn(i) for i in [0, n). Each index is written by exactly one worker;
// callers reduce any partials in index order so results do not depend on
// the worker count.
void parallel_for(int n, const std::function<void(int)>& fn);

}  // namespace roadfuse

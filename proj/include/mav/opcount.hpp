#pragma once

#include <cstdint>

namespace mav::opcount {

// Running multiply-accumulate tally of the dense kernels (GEMM, convolutions,
// bilinear sampling). Elementwise arithmetic, softmax, pooling and reductions
// do not count. Thread-local so parallel frame jobs do not race.
inline thread_local std::uint64_t madds = 0;

inline void reset() { madds = 0; }
inline std::uint64_t read() { return madds; }
inline void bump(std::uint64_t n) { madds += n; }

}  // namespace mav::opcount

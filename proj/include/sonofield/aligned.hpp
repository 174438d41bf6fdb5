#pragma once

#include <Eigen/Core>

#include <vector>

namespace sonofield {

// Storage viewed through Eigen::Map. Eigen picks its vectorised summation order
// from the runtime address, so buffers need a fixed base alignment for results
// to be reproducible across allocations.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

}  // namespace sonofield

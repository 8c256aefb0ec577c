#pragma once

#include <cstddef>
#include <functional>

namespace gpsmtm {

/// Runs body(i) for i in [0, n) on up to `workers` threads. Work items are
/// claimed dynamically, so callers must make item results independent of
/// which thread ran them. The first exception thrown is rethrown here.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& body);

}  // namespace gpsmtm

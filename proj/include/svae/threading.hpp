// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace svae {

// Process-wide worker budget for the parallel executor and batch evaluation.
// Outputs never depend on this value; only wall-clock time does.
inline int& thread_budget_ref() {
  static int n = 0;  // 0 = use hardware default
  return n;
}

inline void set_thread_budget(int n) {
  thread_budget_ref() = std::max(0, n);
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#endif
}

inline int thread_budget() {
  const int n = thread_budget_ref();
  if (n > 0) return n;
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline int hardware_cores() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace svae

#pragma once

#include <cstdint>

namespace acg::counters {

// Process-wide instrumentation counters. Exact integers, thread-safe,
// independent of wall clock: the same (method, config, token count) always
// produces the same counts.

struct Snapshot {
  std::uint64_t forward_passes = 0;
  std::uint64_t matmul_macs = 0;
};

void reset();
void add_pass();
void add_macs(std::uint64_t n);

std::uint64_t forward_passes();
// Multiply-accumulate operations executed by matmul-shaped kernels
// (matmul, row x matrix, attention score dots, attention row x V).
std::uint64_t matmul_macs();

Snapshot snapshot();

}  // namespace acg::counters

#include "acg/counters.hpp"

#include <atomic>

namespace acg::counters {

namespace {
std::atomic<std::uint64_t> g_forward_passes{0};
std::atomic<std::uint64_t> g_matmul_macs{0};
}  // namespace

void reset() {
  g_forward_passes.store(0, std::memory_order_relaxed);
  g_matmul_macs.store(0, std::memory_order_relaxed);
}

void add_pass() { g_forward_passes.fetch_add(1, std::memory_order_relaxed); }

void add_macs(std::uint64_t n) { g_matmul_macs.fetch_add(n, std::memory_order_relaxed); }

std::uint64_t forward_passes() { return g_forward_passes.load(std::memory_order_relaxed); }

std::uint64_t matmul_macs() { return g_matmul_macs.load(std::memory_order_relaxed); }

Snapshot snapshot() { return {forward_passes(), matmul_macs()}; }

}  // namespace acg::counters

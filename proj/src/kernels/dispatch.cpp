#include <atomic>
#include <cstdlib>
#include <string>

#include "semtok/kernels.hpp"

namespace semtok::kernels {
namespace {

const KernelTable* initial_table() {
  if (const char* env = std::getenv("SEMTOK_KERNELS")) {
    const std::string want(env);
    if (want == "scalar") return &scalar_table();
    if (want == "avx2" && avx2_table() != nullptr) return avx2_table();
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

}  // namespace

namespace detail {

std::atomic<const KernelTable*> g_table{nullptr};

const KernelTable& init_table() {
  const KernelTable* expected = nullptr;
  g_table.compare_exchange_strong(expected, initial_table(), std::memory_order_relaxed);
  return *g_table.load(std::memory_order_relaxed);
}

}  // namespace detail

bool select(Isa isa) {
  const KernelTable* t = isa == Isa::kScalar ? &scalar_table() : avx2_table();
  if (t == nullptr) return false;
  detail::g_table.store(t, std::memory_order_relaxed);
  return true;
}

std::string_view isa_name(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return "scalar";
    case Isa::kAvx2:
      return "avx2";
  }
  return "unknown";
}

}  // namespace semtok::kernels

#include "hdt/parallel.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace hdt {

namespace {
std::atomic<int> g_threads{1};
}  // namespace

int thread_count() { return g_threads.load(std::memory_order_relaxed); }

void set_thread_count(int n) { g_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed); }

void apply_thread_env() {
  if (const char* env = std::getenv("HDT_THREADS")) {
    try {
      set_thread_count(std::stoi(env));
    } catch (const std::exception&) {
      set_thread_count(1);
    }
  }
}

}  // namespace hdt

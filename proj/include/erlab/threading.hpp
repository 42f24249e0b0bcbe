#pragma once

#include <atomic>
#include <thread>
#include <vector>

namespace erlab {

// Runs fn(0..tasks-1) across up to `jobs` threads. Each task must own its
// state; results land in caller-indexed slots so the outcome is identical
// for any job count.
template <class Fn>
void run_parallel(int jobs, int tasks, Fn fn) {
  if (jobs <= 1 || tasks <= 1) {
    for (int i = 0; i < tasks; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::atomic<int> next{0};
  const int workers = jobs < tasks ? jobs : tasks;
  for (int w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (int i = next.fetch_add(1); i < tasks; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : pool) t.join();
}

}  // namespace erlab

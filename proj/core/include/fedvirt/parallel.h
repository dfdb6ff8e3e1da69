#pragma once

#include <cstddef>
#include <functional>
#include <memory>

namespace fedvirt {

// Runs body(i) for every i in [0, n). Each index must write only to state it
// owns; results are then independent of the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body);

// Same, but hands out contiguous [begin, end) chunks of at least `grain`.
void parallel_chunks(std::size_t n, std::size_t grain,
                     const std::function<void(std::size_t, std::size_t)>& body);

// Caps worker parallelism for the lifetime of the object. A cap of 0 means
// "available cores".
class ThreadLimit {
 public:
  explicit ThreadLimit(std::size_t max_threads);
  ~ThreadLimit();
  ThreadLimit(const ThreadLimit&) = delete;
  ThreadLimit& operator=(const ThreadLimit&) = delete;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Reads FEDVIRT_THREADS; 0 when unset or unparsable.
std::size_t threads_from_env();

}  // namespace fedvirt

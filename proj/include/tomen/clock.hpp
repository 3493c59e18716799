#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>

namespace tomen {

// Seconds-resolution clock. Injected everywhere time matters (consensus
// liveness, circuit rotation) so tests never wait on wall time.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual uint64_t now() const = 0;
};

class LogicalClock : public Clock {
 public:
  explicit LogicalClock(uint64_t start = 0) : now_(start) {}
  uint64_t now() const override { return now_; }
  void advance(uint64_t seconds) { now_ += seconds; }
  void set(uint64_t t) { now_ = t; }

 private:
  uint64_t now_;
};

class SystemClock : public Clock {
 public:
  uint64_t now() const override {
    return static_cast<uint64_t>(std::chrono::duration_cast<std::chrono::seconds>(
                                     std::chrono::system_clock::now().time_since_epoch())
                                     .count());
  }
};

}  // namespace tomen

#pragma once

// Instrumented FLOP counting. Ops that do multiply-adds report 2*m*k*n under
// the currently active tag while a FlopCounter is installed on this thread.

#include <cstdint>
#include <map>
#include <string>

namespace flexdit {

class FlopCounter {
  public:
    FlopCounter();
    ~FlopCounter();
    FlopCounter(const FlopCounter&) = delete;
    FlopCounter& operator=(const FlopCounter&) = delete;

    std::int64_t total() const;
    std::int64_t get(const std::string& tag) const;
    const std::map<std::string, std::int64_t>& by_tag() const { return counts_; }

    // Called by ops.
    static void record(std::int64_t flops);

  private:
    std::map<std::string, std::int64_t> counts_;
    FlopCounter* previous_;
};

// Sets the tag under which subsequent FLOPs are recorded.
class FlopTag {
  public:
    explicit FlopTag(const char* tag);
    ~FlopTag();
    FlopTag(const FlopTag&) = delete;
    FlopTag& operator=(const FlopTag&) = delete;

  private:
    const char* previous_;
};

}  // namespace flexdit

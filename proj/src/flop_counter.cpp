#include "flexdit/flop_counter.hpp"

namespace flexdit {
namespace {
thread_local FlopCounter* active_counter = nullptr;
thread_local const char* active_tag = "untagged";
}  // namespace

FlopCounter::FlopCounter() : previous_(active_counter) { active_counter = this; }

FlopCounter::~FlopCounter() { active_counter = previous_; }

std::int64_t FlopCounter::total() const {
    std::int64_t sum = 0;
    for (const auto& [tag, n] : counts_) sum += n;
    return sum;
}

std::int64_t FlopCounter::get(const std::string& tag) const {
    auto it = counts_.find(tag);
    return it == counts_.end() ? 0 : it->second;
}

void FlopCounter::record(std::int64_t flops) {
    if (active_counter != nullptr) active_counter->counts_[active_tag] += flops;
}

FlopTag::FlopTag(const char* tag) : previous_(active_tag) { active_tag = tag; }

FlopTag::~FlopTag() { active_tag = previous_; }

}  // namespace flexdit

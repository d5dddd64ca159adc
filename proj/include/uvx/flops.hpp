#pragma once

#include <cstdint>

namespace uvx::flops {

/// Adds `n` floating-point operations to every active FlopScope on this thread.
void add(std::uint64_t n);

/// Counts the floating-point operations executed by kernels while alive.
/// Scopes nest: an inner scope's work is also visible to the outer one.
class FlopScope {
public:
    FlopScope();
    ~FlopScope();
    FlopScope(const FlopScope&) = delete;
    FlopScope& operator=(const FlopScope&) = delete;

    std::uint64_t count() const { return count_; }

private:
    friend void add(std::uint64_t n);
    std::uint64_t count_ = 0;
    FlopScope* parent_;
};

} // namespace uvx::flops

#include "uvx/flops.hpp"

namespace uvx::flops {

namespace {
thread_local FlopScope* g_top = nullptr;
}

FlopScope::FlopScope() : parent_(g_top) { g_top = this; }

FlopScope::~FlopScope() { g_top = parent_; }

void add(std::uint64_t n) {
    for (FlopScope* s = g_top; s != nullptr; s = s->parent_) s->count_ += n;
}

} // namespace uvx::flops

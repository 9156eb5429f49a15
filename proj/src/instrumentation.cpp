#include "sundial/instrumentation.hpp"

namespace sundial {

namespace {
thread_local std::uint64_t g_multiplies = 0;
thread_local std::uint64_t g_backbone_forwards = 0;
thread_local bool g_debug_checks = true;
}  // namespace

std::uint64_t multiply_count() { return g_multiplies; }
void reset_multiply_count() { g_multiplies = 0; }
void add_multiplies(std::uint64_t n) { g_multiplies += n; }

std::uint64_t backbone_forward_count() { return g_backbone_forwards; }
void reset_backbone_forward_count() { g_backbone_forwards = 0; }
void add_backbone_forward() { ++g_backbone_forwards; }

bool debug_checks_enabled() { return g_debug_checks; }
void set_debug_checks(bool enabled) { g_debug_checks = enabled; }

}  // namespace sundial

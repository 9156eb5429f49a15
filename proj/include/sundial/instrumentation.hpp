#pragma once

#include <cstdint>

namespace sundial {

// Scalar-multiply counter fed by the matmul kernel and the incremental
// attention loops. Used by tests that assert compute savings.
std::uint64_t multiply_count();
void reset_multiply_count();
void add_multiplies(std::uint64_t n);

// Number of full backbone forward passes since the last reset. Used to
// assert that ensemble sampling shares one context pass across all draws.
std::uint64_t backbone_forward_count();
void reset_backbone_forward_count();
void add_backbone_forward();

// Runtime switch for per-op finiteness scans. Defaults to on; the CLI turns
// it off for production runs unless asked to keep it.
bool debug_checks_enabled();
void set_debug_checks(bool enabled);

}  // namespace sundial

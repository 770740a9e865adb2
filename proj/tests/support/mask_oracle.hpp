#pragma once

// Brute-force re-derivation of the attention visibility rules, evaluated
// cell by cell from the prose description of each variant. Deliberately
// written without reference to build_mask so the two can cross-check.

#include "regformer/layout.hpp"

namespace regformer::testref {

inline bool cell_visible(const SequenceLayout& lo, int row, int col) {
  const int s = lo.src_len, r = lo.reg_len;
  const auto block_of = [&](int i) { return i < s ? 0 : (i < s + r ? 1 : 2); };
  const int rb = block_of(row), cb = block_of(col);
  switch (lo.variant) {
    case Variant::vanilla:
      // prefix-LM: bidirectional source, causal target over everything before it
      if (rb == 0) return cb == 0;
      return cb == 0 || (cb == 2 && col <= row);
    case Variant::registering:
    case Variant::ratio:
      // rule 1: registers read the source; rule 2: registers read each
      // other bidirectionally; rule 3: targets read registers and earlier
      // targets, and nothing else
      if (rb == 0) return cb == 0;
      if (rb == 1) return cb == 0 || cb == 1;
      return cb == 1 || (cb == 2 && col <= row);
    case Variant::registers_no_mask:
      // registers are plain extra prefix tokens appended causally
      if (rb == 0) return cb == 0;
      if (rb == 1) return cb == 0 || (cb == 1 && col <= row);
      return cb == 0 || cb == 1 || (cb == 2 && col <= row);
  }
  return false;
}

inline AttentionMask mask_oracle(const SequenceLayout& lo) {
  AttentionMask m;
  m.size = lo.total_len();
  m.visible.assign(size_t(m.size) * m.size, 0);
  for (int row = 0; row < m.size; ++row)
    for (int col = 0; col < m.size; ++col) m.set(row, col, cell_visible(lo, row, col));
  return m;
}

}  // namespace regformer::testref

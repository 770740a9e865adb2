#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace regformer {

// Attention layout variants for the packed (source, register, target)
// sequence. "registering" inserts a register block matching the source
// length and re-masks attention so targets read registers only;
// "registers_no_mask" keeps the registers but leaves the prefix-LM mask
// untouched apart from the causal extension; "ratio" varies the register
// block length by src_len/reg_len.
enum class Variant { vanilla, registering, registers_no_mask, ratio };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::vanilla: return "vanilla";
    case Variant::registering: return "registering";
    case Variant::registers_no_mask: return "registers_no_mask";
    case Variant::ratio: return "ratio";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "vanilla") return Variant::vanilla;
  if (s == "registering") return Variant::registering;
  if (s == "registers_no_mask") return Variant::registers_no_mask;
  if (s == "ratio") return Variant::ratio;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

struct SequenceLayout {
  int src_len = 0;
  int reg_len = 0;
  int tgt_len = 0;
  Variant variant = Variant::vanilla;
  double ratio = 1.0;
  std::vector<int> positions;  // absolute position per slot, 0..L-1

  int total_len() const { return src_len + reg_len + tgt_len; }
  int src_begin() const { return 0; }
  int reg_begin() const { return src_len; }
  int tgt_begin() const { return src_len + reg_len; }
};

inline int register_length_for(Variant variant, int src_len, double ratio) {
  switch (variant) {
    case Variant::vanilla: return 0;
    case Variant::registering:
    case Variant::registers_no_mask: return src_len;
    case Variant::ratio: {
      if (ratio <= 0.0) throw std::invalid_argument("register ratio must be positive");
      // ratio is src_len/reg_len; round half up for determinism
      const int r = int(std::floor(double(src_len) / ratio + 0.5));
      return r < 1 ? 1 : r;
    }
  }
  return 0;
}

inline SequenceLayout build_layout(int src_len, int tgt_len, Variant variant, double ratio = 1.0) {
  if (src_len < 2) throw std::invalid_argument("build_layout: src_len must be >= 2 (tag + eos)");
  if (tgt_len < 1) throw std::invalid_argument("build_layout: tgt_len must be >= 1");
  SequenceLayout layout;
  layout.src_len = src_len;
  layout.reg_len = register_length_for(variant, src_len, ratio);
  layout.tgt_len = tgt_len;
  layout.variant = variant;
  layout.ratio = ratio;
  layout.positions.resize(size_t(layout.total_len()));
  for (int i = 0; i < layout.total_len(); ++i) layout.positions[size_t(i)] = i;
  return layout;
}

// Row-major LxL boolean visibility matrix; row attends to column when set.
struct AttentionMask {
  int size = 0;
  std::vector<uint8_t> visible;

  bool at(int row, int col) const { return visible[size_t(row) * size + col] != 0; }
  void set(int row, int col, bool v) { visible[size_t(row) * size + col] = v ? 1 : 0; }
};

// Visibility rules per variant:
//   vanilla            source rows see the whole source block; target row j
//                      sees all of source plus targets up to j.
//   registering        source rows see source only; register rows see source
//                      and the whole register block; target row j sees the
//                      register block and targets up to j, never source.
//   registers_no_mask  prefix-LM extended causally: register row i sees
//                      source and registers up to i; target rows see source,
//                      all registers, and targets up to j.
//   ratio              same rules as registering.
inline AttentionMask build_mask(const SequenceLayout& layout) {
  const int s = layout.src_len, r = layout.reg_len, t = layout.tgt_len;
  const int L = s + r + t;
  AttentionMask mask;
  mask.size = L;
  mask.visible.assign(size_t(L) * L, 0);

  for (int row = 0; row < s; ++row)
    for (int col = 0; col < s; ++col) mask.set(row, col, true);

  switch (layout.variant) {
    case Variant::vanilla:
      for (int j = 0; j < t; ++j) {
        const int row = s + j;
        for (int col = 0; col < s; ++col) mask.set(row, col, true);
        for (int col = s; col <= row; ++col) mask.set(row, col, true);
      }
      break;
    case Variant::registering:
    case Variant::ratio:
      for (int i = 0; i < r; ++i) {
        const int row = s + i;
        for (int col = 0; col < s + r; ++col) mask.set(row, col, true);
      }
      for (int j = 0; j < t; ++j) {
        const int row = s + r + j;
        for (int col = s; col < s + r; ++col) mask.set(row, col, true);
        for (int col = s + r; col <= row; ++col) mask.set(row, col, true);
      }
      break;
    case Variant::registers_no_mask:
      for (int i = 0; i < r; ++i) {
        const int row = s + i;
        for (int col = 0; col < s; ++col) mask.set(row, col, true);
        for (int col = s; col <= row; ++col) mask.set(row, col, true);
      }
      for (int j = 0; j < t; ++j) {
        const int row = s + r + j;
        for (int col = 0; col < s + r; ++col) mask.set(row, col, true);
        for (int col = s + r; col <= row; ++col) mask.set(row, col, true);
      }
      break;
  }
  return mask;
}

// Visibility row for the j-th generated token (j >= 1); equals row
// src+reg+j-1 of the full mask built with tgt_len >= j.
inline std::vector<uint8_t> incremental_mask_row(const SequenceLayout& layout, int j) {
  if (j < 1) throw std::invalid_argument("incremental_mask_row: step must be >= 1");
  if (layout.tgt_len < j)
    throw std::invalid_argument("incremental_mask_row: layout target block shorter than step");
  const int s = layout.src_len, r = layout.reg_len;
  const int L = layout.total_len();
  std::vector<uint8_t> row(size_t(L), 0);
  switch (layout.variant) {
    case Variant::vanilla:
      for (int col = 0; col < s; ++col) row[size_t(col)] = 1;
      break;
    case Variant::registering:
    case Variant::ratio:
      for (int col = s; col < s + r; ++col) row[size_t(col)] = 1;
      break;
    case Variant::registers_no_mask:
      for (int col = 0; col < s + r; ++col) row[size_t(col)] = 1;
      break;
  }
  for (int col = s + r; col < s + r + j; ++col) row[size_t(col)] = 1;
  return row;
}

// Debug grid: header line then one '1'/'.' row per mask row.
inline std::string dump_mask(const SequenceLayout& layout, const AttentionMask& mask) {
  std::ostringstream os;
  os << "src=" << layout.src_len << " reg=" << layout.reg_len << " tgt=" << layout.tgt_len
     << " variant=" << variant_name(layout.variant) << "\n";
  for (int row = 0; row < mask.size; ++row) {
    for (int col = 0; col < mask.size; ++col) os << (mask.at(row, col) ? '1' : '.');
    os << "\n";
  }
  return os.str();
}

}  // namespace regformer

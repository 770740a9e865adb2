#include <catch2/catch_amalgamated.hpp>

#include "regformer/layout.hpp"
#include "regformer/rng.hpp"
#include "support/mask_oracle.hpp"

using namespace regformer;

TEST_CASE("register block length per variant") {
  REQUIRE(build_layout(4, 2, Variant::registering).reg_len == 4);
  REQUIRE(build_layout(4, 2, Variant::registering).total_len() == 10);
  REQUIRE(build_layout(4, 2, Variant::vanilla).reg_len == 0);
  REQUIRE(build_layout(4, 2, Variant::registers_no_mask).reg_len == 4);
  // ratio axis is src_len / reg_len
  REQUIRE(build_layout(4, 2, Variant::ratio, 2.0).reg_len == 2);
  REQUIRE(build_layout(4, 2, Variant::ratio, 0.75).reg_len == 5);  // 4/0.75 = 5.33 -> 5
  REQUIRE(build_layout(3, 1, Variant::ratio, 1.25).reg_len == 2);  // 2.4 -> 2
  REQUIRE(build_layout(2, 1, Variant::ratio, 4.0).reg_len == 1);   // floor at 1
  REQUIRE_THROWS_AS(build_layout(4, 2, Variant::ratio, 0.0), std::invalid_argument);
  REQUIRE_THROWS_AS(build_layout(1, 1, Variant::registering), std::invalid_argument);
  REQUIRE_THROWS_AS(build_layout(4, 0, Variant::registering), std::invalid_argument);
}

TEST_CASE("positions are consecutive") {
  auto layout = build_layout(5, 3, Variant::registering);
  REQUIRE(int(layout.positions.size()) == layout.total_len());
  for (int i = 0; i < layout.total_len(); ++i) REQUIRE(layout.positions[size_t(i)] == i);
}

TEST_CASE("registering mask matches the hand-enumerated example") {
  auto layout = build_layout(3, 2, Variant::registering);
  auto mask = build_mask(layout);
  REQUIRE(mask.size == 8);
  // target row 1 (row 6) sees registers {3,4,5} and itself {6}
  for (int col = 0; col < 8; ++col)
    REQUIRE(mask.at(6, col) == (col >= 3 && col <= 6));
  // target row 2 (row 7) additionally sees row 6
  for (int col = 0; col < 8; ++col)
    REQUIRE(mask.at(7, col) == (col >= 3 && col <= 7));
  // source columns hidden from both target rows
  for (int col = 0; col < 3; ++col) {
    REQUIRE_FALSE(mask.at(6, col));
    REQUIRE_FALSE(mask.at(7, col));
  }
  // register rows see the full source and register blocks
  for (int i = 3; i < 6; ++i)
    for (int col = 0; col < 8; ++col) REQUIRE(mask.at(i, col) == (col < 6));
}

TEST_CASE("vanilla mask is a prefix-LM") {
  auto layout = build_layout(2, 2, Variant::vanilla);
  auto mask = build_mask(layout);
  // second target row sees everything up to itself
  for (int col = 0; col < 4; ++col) REQUIRE(mask.at(3, col));
  // first target row must not see the second
  REQUIRE_FALSE(mask.at(2, 3));
  // source rows are bidirectional within source
  REQUIRE(mask.at(0, 1));
  REQUIRE(mask.at(1, 0));
  // and blind to targets
  REQUIRE_FALSE(mask.at(0, 2));
}

TEST_CASE("register rows are identical to each other") {
  for (double rho : {0.75, 1.0, 1.25, 1.5}) {
    auto layout = build_layout(6, 3, Variant::ratio, rho);
    auto mask = build_mask(layout);
    const int s = layout.src_len, r = layout.reg_len, L = mask.size;
    for (int i = 1; i < r; ++i)
      for (int col = 0; col < L; ++col) REQUIRE(mask.at(s, col) == mask.at(s + i, col));
  }
}

TEST_CASE("registering hides all source columns from all target rows") {
  auto layout = build_layout(7, 4, Variant::registering);
  auto mask = build_mask(layout);
  int visible_into_source = 0;
  for (int j = 0; j < layout.tgt_len; ++j)
    for (int col = 0; col < layout.src_len; ++col)
      visible_into_source += mask.at(layout.tgt_begin() + j, col) ? 1 : 0;
  REQUIRE(visible_into_source == 0);
}

TEST_CASE("registers_no_mask extends the prefix-LM causally") {
  auto layout = build_layout(3, 2, Variant::registers_no_mask);
  auto mask = build_mask(layout);
  const int s = 3, r = 3;
  // register rows: source plus earlier registers
  for (int i = 0; i < r; ++i)
    for (int col = 0; col < mask.size; ++col)
      REQUIRE(mask.at(s + i, col) == (col < s || (col >= s && col <= s + i)));
  // target rows see source too (unlike registering)
  for (int col = 0; col < s; ++col) REQUIRE(mask.at(s + r, col));
  // and every register
  for (int col = s; col < s + r; ++col) REQUIRE(mask.at(s + r, col));
  // causal within the target block
  REQUIRE_FALSE(mask.at(s + r, s + r + 1));
}

TEST_CASE("build_mask equals the rule-by-rule oracle over random layouts") {
  Rng rng(1234);
  const Variant variants[] = {Variant::vanilla, Variant::registering, Variant::registers_no_mask,
                              Variant::ratio};
  const double ratios[] = {0.75, 1.0, 1.25, 1.5};
  for (int trial = 0; trial < 400; ++trial) {
    const int src = rng.range_int(2, 12);
    const int tgt = rng.range_int(1, 8);
    const Variant v = variants[rng.below(4)];
    const double rho = ratios[rng.below(4)];
    auto layout = build_layout(src, tgt, v, rho);
    auto mask = build_mask(layout);
    auto oracle = testref::mask_oracle(layout);
    REQUIRE(mask.size == oracle.size);
    REQUIRE(mask.visible == oracle.visible);
    // every row keeps at least one visible cell
    for (int row = 0; row < mask.size; ++row) {
      bool any = false;
      for (int col = 0; col < mask.size; ++col) any = any || mask.at(row, col);
      REQUIRE(any);
    }
  }
}

TEST_CASE("incremental rows equal full-mask rows") {
  Rng rng(77);
  const Variant variants[] = {Variant::vanilla, Variant::registering, Variant::registers_no_mask,
                              Variant::ratio};
  for (int trial = 0; trial < 120; ++trial) {
    const int src = rng.range_int(2, 10);
    const int tgt = rng.range_int(1, 6);
    const Variant v = variants[rng.below(4)];
    auto layout = build_layout(src, tgt, v, 1.25);
    auto mask = build_mask(layout);
    for (int j = 1; j <= tgt; ++j) {
      auto row = incremental_mask_row(layout, j);
      const int full_row = layout.tgt_begin() + j - 1;
      for (int col = 0; col < mask.size; ++col)
        REQUIRE((row[size_t(col)] != 0) == mask.at(full_row, col));
    }
  }
  // first step: registering sees the register block (plus its own slot)
  auto lo = build_layout(4, 3, Variant::registering);
  auto row1 = incremental_mask_row(lo, 1);
  for (int col = 0; col < lo.total_len(); ++col)
    REQUIRE((row1[size_t(col)] != 0) == (col >= 4 && col <= 8));
  // vanilla first step: full source block + self
  auto lov = build_layout(4, 3, Variant::vanilla);
  auto rowv = incremental_mask_row(lov, 1);
  for (int col = 0; col < lov.total_len(); ++col)
    REQUIRE((rowv[size_t(col)] != 0) == (col < 4 || col == 4));
  REQUIRE_THROWS_AS(incremental_mask_row(lo, 0), std::invalid_argument);
  REQUIRE_THROWS_AS(incremental_mask_row(lo, 4), std::invalid_argument);
}

TEST_CASE("mask dump format") {
  auto layout = build_layout(2, 1, Variant::vanilla);
  auto mask = build_mask(layout);
  const std::string dump = dump_mask(layout, mask);
  REQUIRE(dump == "src=2 reg=0 tgt=1 variant=vanilla\n11.\n11.\n111\n");
}

#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "dadapt/geometry.hpp"
#include "dadapt/rng.hpp"

using namespace dadapt;

namespace {

// Counting oracle: IoU of integer boxes from unit lattice cells.
long cells_inside(const Box& b, int x, int y) {
  return (x >= b.x1 && x + 1 <= b.x2 && y >= b.y1 && y + 1 <= b.y2) ? 1 : 0;
}

double lattice_iou(const Box& a, const Box& b, int lattice) {
  long inter = 0, uni = 0;
  for (int x = 0; x < lattice; ++x)
    for (int y = 0; y < lattice; ++y) {
      long ia = cells_inside(a, x, y);
      long ib = cells_inside(b, x, y);
      inter += ia & ib;
      uni += ia | ib;
    }
  if (uni == 0) return 0.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

Box random_int_box(Rng& rng, int lattice) {
  int x1 = rng.uniform_int(0, lattice - 1);
  int y1 = rng.uniform_int(0, lattice - 1);
  int x2 = rng.uniform_int(x1 + 1, lattice);
  int y2 = rng.uniform_int(y1 + 1, lattice);
  return Box{static_cast<double>(x1), static_cast<double>(y1), static_cast<double>(x2),
             static_cast<double>(y2)};
}

}  // namespace

TEST_CASE("iou basics") {
  Box a{0, 0, 2, 2};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, Box{5, 5, 7, 7}) == 0.0);
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}) ==
        doctest::Approx(lattice_iou(Box{0, 0, 2, 2}, Box{1, 1, 3, 3}, 4)).epsilon(1e-15));

  // degenerate boxes are legal for iou
  Box zero{1, 1, 1, 1};
  CHECK(iou(zero, zero) == 0.0);
  CHECK(iou(zero, a) == 0.0);
}

TEST_CASE("iou equals the lattice counting oracle on random integer boxes") {
  Rng rng(2024);
  for (int i = 0; i < 300; ++i) {
    Box a = random_int_box(rng, 20);
    Box b = random_int_box(rng, 20);
    CHECK(iou(a, b) == lattice_iou(a, b, 20));
    CHECK(iou(a, b) == iou(b, a));  // symmetry
    CHECK(iou(a, b) >= 0.0);
    CHECK(iou(a, b) <= 1.0);
  }
}

TEST_CASE("offset encoding closed forms") {
  Box anchor{0, 0, 10, 10};
  Offsets zero = encode_offsets(anchor, anchor);
  CHECK(zero.tx == 0.0);
  CHECK(zero.ty == 0.0);
  CHECK(zero.tw == 0.0);
  CHECK(zero.th == 0.0);

  Offsets t = encode_offsets(anchor, Box{5, 5, 15, 15});
  CHECK(t.tx == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(t.ty == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(t.tw == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(t.th == doctest::Approx(0.0).epsilon(1e-15));

  Box back = decode_offsets(anchor, Offsets{0.5, 0.5, 0, 0});
  CHECK(back.x1 == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(back.y2 == doctest::Approx(15.0).epsilon(1e-12));

  Box same = decode_offsets(anchor, Offsets{});
  CHECK(same.x1 == doctest::Approx(0.0));
  CHECK(same.x2 == doctest::Approx(10.0));

  // tw = log 2 doubles the width symmetrically about the center
  Box wide = decode_offsets(anchor, Offsets{0, 0, std::log(2.0), 0});
  CHECK(wide.width() == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(wide.cx() == doctest::Approx(5.0).epsilon(1e-12));

  CHECK_THROWS_AS(encode_offsets(Box{0, 0, 0, 5}, anchor), std::invalid_argument);
  CHECK_THROWS_AS(encode_offsets(anchor, Box{0, 0, 0, 5}), std::invalid_argument);
  CHECK_THROWS_AS(decode_offsets(anchor, Offsets{std::nan(""), 0, 0, 0}),
                  std::invalid_argument);
}

TEST_CASE("encode/decode round-trips within 1e-9 on random pairs") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    Box anchor{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
    anchor.x2 = anchor.x1 + rng.uniform(0.5, 30);
    anchor.y2 = anchor.y1 + rng.uniform(0.5, 30);
    Box gt{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
    gt.x2 = gt.x1 + rng.uniform(0.5, 30);
    gt.y2 = gt.y1 + rng.uniform(0.5, 30);
    Box back = decode_offsets(anchor, encode_offsets(anchor, gt));
    CHECK(std::abs(back.x1 - gt.x1) < 1e-9);
    CHECK(std::abs(back.y1 - gt.y1) < 1e-9);
    CHECK(std::abs(back.x2 - gt.x2) < 1e-9);
    CHECK(std::abs(back.y2 - gt.y2) < 1e-9);
  }
}

TEST_CASE("enlarge scales about the center and clips") {
  Box b{4, 4, 6, 6};
  Box same = enlarge(b, 1.0, 10, 10);
  CHECK(same == b);

  Box doubled = enlarge(b, 2.0, 10, 10);
  CHECK(doubled == Box{3, 3, 7, 7});

  Box clipped = enlarge(Box{0, 0, 6, 6}, 2.0, 10, 10);
  CHECK(clipped == Box{0, 0, 9, 9});

  // center preserved when no clipping occurs
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    Box base{rng.uniform(20, 30), rng.uniform(20, 30), 0, 0};
    base.x2 = base.x1 + rng.uniform(1, 5);
    base.y2 = base.y1 + rng.uniform(1, 5);
    Box e = enlarge(base, rng.uniform(0.2, 2.0), 64, 64);
    CHECK(e.cx() == doctest::Approx(base.cx()).epsilon(1e-12));
    CHECK(e.cy() == doctest::Approx(base.cy()).epsilon(1e-12));
  }

  CHECK_THROWS_AS(enlarge(b, 0.0, 10, 10), std::invalid_argument);
}

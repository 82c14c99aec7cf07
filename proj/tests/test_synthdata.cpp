#include <doctest.h>

#include <cmath>

#include "tvseg/rng.hpp"
#include "tvseg/synthdata.hpp"

using namespace tvseg;

TEST_SUITE("synthdata") {

TEST_CASE("radius-2 lattice ball at the center of a volume has 33 voxels") {
  // Enumeration oracle: integer points with x^2+y^2+z^2 <= 4.
  int64_t expect = 0;
  for (int x = -2; x <= 2; ++x)
    for (int y = -2; y <= 2; ++y)
      for (int z = -2; z <= 2; ++z)
        if (x * x + y * y + z * z <= 4) ++expect;
  REQUIRE(expect == 33);

  BinaryMask gt({32, 32, 32});
  paint_ball(gt, 16, 16, 16, 2);
  CHECK(gt.count_ones() == 33);
}

TEST_CASE("single-lesion subject matches the configured ball volume") {
  GenConfig cfg;
  cfg.lesions_min = cfg.lesions_max = 1;
  cfg.radius_min = cfg.radius_max = 2;
  auto rec = generate_subject<double>(cfg, 0, Split::train);
  CHECK(rec.gt.count_ones() == 33);
  CHECK(rec.image.channels() == 2);
  CHECK(rec.image.shape() == cfg.volume_shape);
  CHECK(rec.image.all_finite());
}

TEST_CASE("zero lesions configured yields an empty mask outside training") {
  GenConfig cfg;
  cfg.lesions_min = 0;
  cfg.lesions_max = 0;
  auto rec = generate_subject<double>(cfg, 4, Split::test);
  CHECK(rec.gt.count_ones() == 0);
  // Training subjects are forced to carry at least one lesion.
  auto tr = generate_subject<double>(cfg, 4, Split::train);
  CHECK(tr.gt.count_ones() > 0);
}

TEST_CASE("generation is deterministic per (seed, subject)") {
  GenConfig cfg;
  auto a = generate_subject<float>(cfg, 7, Split::train);
  auto b = generate_subject<float>(cfg, 7, Split::train);
  CHECK(a.image == b.image);
  CHECK(a.gt == b.gt);
  auto c = generate_subject<float>(cfg, 8, Split::train);
  CHECK(a.image.vec() != c.image.vec());

  GenConfig other = cfg;
  other.seed = 1;
  auto d = generate_subject<float>(other, 7, Split::train);
  CHECK(a.image.vec() != d.image.vec());
}

TEST_CASE("oversized lesions are rejected") {
  GenConfig cfg;
  cfg.volume_shape = {8, 8, 8};
  cfg.radius_min = cfg.radius_max = 4;  // diameter 9 > 8
  CHECK_THROWS_AS(cfg.validate(), InvalidArgument);
}

TEST_CASE("dataset split sizes and ids") {
  GenConfig cfg;
  cfg.n_train = 3;
  cfg.n_validation = 2;
  cfg.n_test = 2;
  auto ds = generate_dataset<float>(cfg);
  REQUIRE(ds.size() == 7);
  CHECK(ds[0].split == Split::train);
  CHECK(ds[3].split == Split::validation);
  CHECK(ds[5].split == Split::test);
  CHECK(ds[0].id == "s000");
  CHECK(ds[6].id == "s006");
  for (auto& r : ds)
    if (r.split == Split::train) CHECK(r.gt.count_ones() > 0);
}

TEST_CASE("identity crop returns the whole subject") {
  GenConfig cfg;
  cfg.volume_shape = {16, 16, 16};
  auto rec = generate_subject<double>(cfg, 1, Split::train);
  Rng rng = make_stream(1, 2);
  auto patch = sample_patch(rec, cfg.volume_shape, false, rng);
  CHECK(patch.image == rec.image);
  CHECK(patch.gt == rec.gt);
}

TEST_CASE("crop larger than the volume is rejected") {
  GenConfig cfg;
  cfg.volume_shape = {16, 16, 16};
  auto rec = generate_subject<double>(cfg, 1, Split::train);
  Rng rng = make_stream(1, 3);
  CHECK_THROWS_AS(sample_patch(rec, Shape3{17, 16, 16}, false, rng), InvalidArgument);
}

TEST_CASE("balanced sampling hits lesions at least half the time") {
  GenConfig cfg;
  cfg.volume_shape = {32, 32, 32};
  cfg.lesions_min = cfg.lesions_max = 1;
  cfg.radius_min = cfg.radius_max = 2;  // tiny lesion: uniform crops rarely catch it
  auto rec = generate_subject<double>(cfg, 3, Split::train);
  Rng rng = make_stream(5, 5);
  const int trials = 10000;
  int with_lesion = 0;
  for (int t = 0; t < trials; ++t) {
    auto patch = sample_patch(rec, Shape3{8, 8, 8}, true, rng);
    if (patch.gt.count_ones() > 0) ++with_lesion;
    CHECK_FALSE(patch.balanced_fallback);
  }
  const double frac = static_cast<double>(with_lesion) / trials;
  // Lesion-centered draws always contain lesion voxels; the binomial
  // 3-sigma band around 0.5 is ~0.015 at 1e4 trials.
  CHECK(frac >= 0.5 - 3.0 * 0.005);
  CHECK(frac <= 1.0);
}

TEST_CASE("balanced sampling on a lesion-free subject falls back to uniform") {
  GenConfig cfg;
  cfg.lesions_min = 0;
  cfg.lesions_max = 0;
  auto rec = generate_subject<double>(cfg, 9, Split::test);
  REQUIRE(rec.gt.count_ones() == 0);
  Rng rng = make_stream(6, 6);
  auto patch = sample_patch(rec, Shape3{8, 8, 8}, true, rng);
  CHECK(patch.balanced_fallback);
  CHECK_FALSE(patch.lesion_centered);
  CHECK(patch.gt.count_ones() == 0);
}

TEST_CASE("patch sampling stays in bounds under random crops") {
  GenConfig cfg;
  cfg.volume_shape = {17, 23, 19};
  auto rec = generate_subject<double>(cfg, 2, Split::train);
  Rng rng = make_stream(7, 7);
  for (int t = 0; t < 200; ++t) {
    Shape3 crop{rng.uniform_int(1, 17), rng.uniform_int(1, 23), rng.uniform_int(1, 19)};
    auto patch = sample_patch(rec, crop, rng.bernoulli(0.5), rng);
    CHECK(patch.image.shape() == crop);
    CHECK(patch.gt.shape() == crop);
    CHECK(patch.image.all_finite());
    for (int64_t i = 0; i < patch.gt.voxels(); ++i) CHECK(patch.gt.data()[i] <= 1);
  }
}

TEST_CASE("all augmentations disabled leaves the patch bitwise unchanged") {
  GenConfig cfg;
  cfg.volume_shape = {12, 12, 12};
  auto rec = generate_subject<float>(cfg, 5, Split::train);
  AugmentConfig acfg;
  acfg.enable_rotation = acfg.enable_flip = acfg.enable_intensity = acfg.enable_noise = false;
  Volume<float> img = rec.image;
  BinaryMask gt = rec.gt;
  Rng rng = make_stream(8, 8);
  augment(img, gt, acfg, rng);
  CHECK(img == rec.image);
  CHECK(gt == rec.gt);
}

TEST_CASE("four identical quarter turns restore the input bitwise") {
  GenConfig cfg;
  cfg.volume_shape = {10, 12, 14};
  auto rec = generate_subject<float>(cfg, 6, Split::train);
  for (int axis = 0; axis < 3; ++axis) {
    Volume<float> img = rec.image;
    BinaryMask gt = rec.gt;
    for (int q = 0; q < 4; ++q) {
      img = rotate90(img, axis, 1);
      gt = rotate90(gt, axis, 1);
    }
    CHECK(img == rec.image);
    CHECK(gt == rec.gt);
  }
}

TEST_CASE("rotate90 by k equals k single quarter turns") {
  GenConfig cfg;
  cfg.volume_shape = {6, 8, 10};
  cfg.radius_min = cfg.radius_max = 2;
  auto rec = generate_subject<float>(cfg, 6, Split::train);
  for (int axis = 0; axis < 3; ++axis)
    for (int k = 0; k <= 3; ++k) {
      Volume<float> direct = rotate90(rec.image, axis, k);
      Volume<float> iter = rec.image;
      for (int q = 0; q < k; ++q) iter = rotate90(iter, axis, 1);
      CHECK(direct == iter);
    }
}

TEST_CASE("flips are involutions") {
  GenConfig cfg;
  cfg.volume_shape = {7, 9, 11};
  cfg.radius_min = cfg.radius_max = 2;
  auto rec = generate_subject<float>(cfg, 10, Split::train);
  for (int axis = 0; axis < 3; ++axis) {
    CHECK(flip_axis(flip_axis(rec.image, axis), axis) == rec.image);
    CHECK(flip_axis(flip_axis(rec.gt, axis), axis) == rec.gt);
  }
}

TEST_CASE("mask voxel count is invariant under geometric augmentation") {
  GenConfig cfg;
  cfg.volume_shape = {12, 12, 12};
  auto rec = generate_subject<float>(cfg, 11, Split::train);
  const int64_t count = rec.gt.count_ones();
  AugmentConfig acfg;
  acfg.enable_intensity = false;
  acfg.enable_noise = false;
  for (uint64_t t = 0; t < 50; ++t) {
    Volume<float> img = rec.image;
    BinaryMask gt = rec.gt;
    Rng rng = make_stream(9, t);
    augment(img, gt, acfg, rng);
    CHECK(gt.count_ones() == count);
    for (int64_t i = 0; i < gt.voxels(); ++i) CHECK(gt.data()[i] <= 1);
  }
}

TEST_CASE("mask stays binary and image-only ops do not touch the mask") {
  GenConfig cfg;
  cfg.volume_shape = {8, 8, 8};
  cfg.radius_min = cfg.radius_max = 2;
  auto rec = generate_subject<float>(cfg, 12, Split::train);
  AugmentConfig acfg;
  acfg.enable_rotation = false;
  acfg.enable_flip = false;
  Volume<float> img = rec.image;
  BinaryMask gt = rec.gt;
  Rng rng = make_stream(10, 10);
  augment(img, gt, acfg, rng);
  CHECK(gt == rec.gt);
  CHECK(img.vec() != rec.image.vec());
}

TEST_CASE("augmentation is deterministic given the stream") {
  GenConfig cfg;
  cfg.volume_shape = {8, 8, 8};
  cfg.radius_min = cfg.radius_max = 2;
  auto rec = generate_subject<float>(cfg, 13, Split::train);
  AugmentConfig acfg;
  auto run = [&]() {
    Volume<float> img = rec.image;
    BinaryMask gt = rec.gt;
    Rng rng = make_stream(11, 11);
    augment(img, gt, acfg, rng);
    return std::make_pair(img, gt);
  };
  auto a = run();
  auto b = run();
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

}  // TEST_SUITE

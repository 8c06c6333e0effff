#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include "tsnet/perturb.hpp"

using namespace tsnet;

namespace {

Tensor random_image(Rng& rng, size_t h = 9, size_t w = 9) {
  return Tensor::uniform({3, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("perturbation tables", "[perturb]") {
  SECTION("built-in tables validate") {
    image_modification_table().validate();
    video_modification_table().validate();
  }
  SECTION("probabilities must sum to 1") {
    PerturbationTable t{{{PerturbKind::identity, 0.5}, {PerturbKind::brightness, 0.4}}};
    REQUIRE_THROWS_AS(t.validate(), ConfigError);
  }
  SECTION("duplicate kinds are rejected") {
    PerturbationTable t{{{PerturbKind::identity, 0.5}, {PerturbKind::identity, 0.5}}};
    REQUIRE_THROWS_AS(t.validate(), ConfigError);
  }
  SECTION("kind names round-trip") {
    for (PerturbKind k :
         {PerturbKind::identity, PerturbKind::brightness, PerturbKind::rotate_cw45,
          PerturbKind::rotate_ccw45, PerturbKind::scale_center_crop, PerturbKind::filter_yellow,
          PerturbKind::filter_red}) {
      REQUIRE(perturb_from_name(perturb_name(k)) == k);
    }
    REQUIRE_THROWS_AS(perturb_from_name("sepia"), ConfigError);
  }
}

TEST_CASE("draw_kind", "[perturb]") {
  SECTION("identity-only table always draws identity") {
    PerturbationTable t{{{PerturbKind::identity, 1.0}}};
    for (int i = 0; i < 100; ++i) {
      REQUIRE(draw_kind(t, "item" + std::to_string(i), 7) == PerturbKind::identity);
    }
  }
  SECTION("draws are independent of item visitation order") {
    auto t = video_modification_table();
    REQUIRE(draw_kind(t, "clip42", 9) == draw_kind(t, "clip42", 9));
    REQUIRE(draw_kind(t, "clip42", 9) == [&] {
      draw_kind(t, "clip1", 9);
      draw_kind(t, "clip2", 9);
      return draw_kind(t, "clip42", 9);
    }());
  }
  SECTION("image table frequencies over 100000 draws within 0.5pp") {
    auto t = image_modification_table();
    std::map<PerturbKind, size_t> counts;
    for (int i = 0; i < 100000; ++i) counts[draw_kind(t, "img" + std::to_string(i), 2026)]++;
    for (const auto& [kind, prob] : t.rows) {
      const double freq = static_cast<double>(counts[kind]) / 100000.0;
      REQUIRE(std::abs(freq - prob) <= 0.005);
    }
  }
  SECTION("video table frequencies over 100000 draws within 0.5pp") {
    auto t = video_modification_table();
    std::map<PerturbKind, size_t> counts;
    for (int i = 0; i < 100000; ++i) counts[draw_kind(t, "vid" + std::to_string(i), 2026)]++;
    for (const auto& [kind, prob] : t.rows) {
      const double freq = static_cast<double>(counts[kind]) / 100000.0;
      REQUIRE(std::abs(freq - prob) <= 0.005);
    }
  }
}

TEST_CASE("brightness", "[perturb]") {
  SECTION("multiplies every channel") {
    Tensor img = Tensor::full({3, 2, 2}, 0.8);
    Tensor out = brightness(img, 0.5);
    for (double v : out.data) REQUIRE(v == Catch::Approx(0.4));
  }
  SECTION("factor 1 is the identity") {
    Rng rng(1);
    Tensor img = random_image(rng);
    REQUIRE(brightness(img, 1.0).data == img.data);
  }
  SECTION("mean luminance halves at factor 0.5") {
    Rng rng(2);
    Tensor img = random_image(rng);
    double before = 0.0, after = 0.0;
    Tensor out = brightness(img, 0.5);
    for (size_t i = 0; i < img.numel(); ++i) {
      before += img.data[i];
      after += out.data[i];
    }
    REQUIRE(after == Catch::Approx(0.5 * before));
  }
  SECTION("factor outside (0,1] is rejected") {
    Tensor img = Tensor::zeros({3, 2, 2});
    REQUIRE_THROWS_AS(brightness(img, 0.0), ConfigError);
    REQUIRE_THROWS_AS(brightness(img, 1.5), ConfigError);
  }
}

TEST_CASE("rotate45", "[perturb]") {
  SECTION("center pixel of an odd image is preserved") {
    Rng rng(3);
    Tensor img = random_image(rng, 9, 9);
    for (bool cw : {true, false}) {
      Tensor out = rotate45(img, cw);
      for (size_t c = 0; c < 3; ++c) {
        REQUIRE(std::abs(out.at(c, 4, 4) - img.at(c, 4, 4)) <= 1e-6);
      }
    }
  }
  SECTION("all-black stays all-black") {
    Tensor img = Tensor::zeros({3, 8, 8});
    for (double v : rotate45(img, true).data) REQUIRE(v == 0.0);
  }
  SECTION("dims unchanged and corners fill black") {
    Tensor img = Tensor::full({3, 16, 16}, 1.0);
    Tensor out = rotate45(img, false);
    REQUIRE(out.dims == img.dims);
    REQUIRE(out.at(0, 0, 0) == 0.0);  // corner leaves the source square
  }
  SECTION("cw and ccw are different transforms") {
    Rng rng(4);
    Tensor img = random_image(rng, 8, 8);
    REQUIRE(rotate45(img, true).data != rotate45(img, false).data);
  }
}

TEST_CASE("scale_center_crop", "[perturb]") {
  SECTION("geometry for 96x96 at 1.5") {
    auto g = scale_crop_geometry(96, 96, 1.5);
    REQUIRE(g.scaled_h == 144);
    REQUIRE(g.scaled_w == 144);
    REQUIRE(g.offset_y == 24);
    REQUIRE(g.offset_x == 24);
  }
  SECTION("constant image is unchanged") {
    Tensor img = Tensor::full({3, 12, 12}, 0.6);
    Tensor out = scale_center_crop(img, 1.5);
    for (double v : out.data) REQUIRE(v == Catch::Approx(0.6).margin(1e-12));
  }
  SECTION("output dims equal input dims") {
    Rng rng(5);
    Tensor img = random_image(rng, 10, 14);
    REQUIRE(scale_center_crop(img, 1.7).dims == img.dims);
  }
  SECTION("scale at or below 1 is rejected") {
    Tensor img = Tensor::zeros({3, 4, 4});
    REQUIRE_THROWS_AS(scale_center_crop(img, 1.0), ConfigError);
  }
}

TEST_CASE("color_filter", "[perturb]") {
  SECTION("white pixel under yellow at 0.3") {
    Tensor img = Tensor::full({3, 1, 1}, 1.0);
    Tensor out = color_filter(img, PerturbKind::filter_yellow, 0.3);
    REQUIRE(out.data[0] == Catch::Approx(1.0));
    REQUIRE(out.data[1] == Catch::Approx(1.0));
    REQUIRE(out.data[2] == Catch::Approx(0.7));
  }
  SECTION("alpha 0 is the identity") {
    Rng rng(6);
    Tensor img = random_image(rng);
    REQUIRE(color_filter(img, PerturbKind::filter_red, 0.0).data == img.data);
  }
  SECTION("alpha 1 red paints everything (1,0,0)") {
    Rng rng(7);
    Tensor img = random_image(rng, 2, 2);
    Tensor out = color_filter(img, PerturbKind::filter_red, 1.0);
    for (size_t i = 0; i < 4; ++i) {
      REQUIRE(out.data[i] == 1.0);       // R plane
      REQUIRE(out.data[4 + i] == 0.0);   // G plane
      REQUIRE(out.data[8 + i] == 0.0);   // B plane
    }
  }
}

TEST_CASE("every perturbation preserves range and dims", "[perturb]") {
  Rng rng(8);
  for (PerturbKind k :
       {PerturbKind::identity, PerturbKind::brightness, PerturbKind::rotate_cw45,
        PerturbKind::rotate_ccw45, PerturbKind::scale_center_crop, PerturbKind::filter_yellow,
        PerturbKind::filter_red}) {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor img = random_image(rng, 12, 12);
      Tensor out = apply_perturbation(img, k);
      REQUIRE(out.dims == img.dims);
      for (double v : out.data) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
      }
    }
  }
}

TEST_CASE("perturb_dataset", "[perturb]") {
  Rng rng(9);
  std::vector<VideoClip> items;
  for (int i = 0; i < 12; ++i) {
    VideoClip clip;
    clip.clip_id = "clip" + std::to_string(i);
    Tensor frame = random_image(rng, 8, 8);
    clip.frames.assign(4, frame);  // identical frames expose per-frame drift
    items.push_back(std::move(clip));
  }

  SECTION("identity-only table is a bitwise no-op") {
    PerturbationTable t{{{PerturbKind::identity, 1.0}}};
    auto out = perturb_dataset(items, t, 11);
    for (size_t i = 0; i < items.size(); ++i) {
      for (size_t f = 0; f < items[i].frames.size(); ++f) {
        REQUIRE(out.items[i].frames[f].data == items[i].frames[f].data);
      }
      REQUIRE(out.records[i].kind == PerturbKind::identity);
    }
  }
  SECTION("same seed reproduces outputs and records bitwise") {
    auto t = video_modification_table();
    auto a = perturb_dataset(items, t, 123);
    auto b = perturb_dataset(items, t, 123);
    for (size_t i = 0; i < items.size(); ++i) {
      REQUIRE(a.records[i].kind == b.records[i].kind);
      for (size_t f = 0; f < items[i].frames.size(); ++f) {
        REQUIRE(a.items[i].frames[f].data == b.items[i].frames[f].data);
      }
    }
  }
  SECTION("every frame of a clip receives the same kind") {
    auto t = video_modification_table();
    auto out = perturb_dataset(items, t, 77);
    for (const VideoClip& clip : out.items) {
      for (const Tensor& f : clip.frames) {
        REQUIRE(f.data == clip.frames.front().data);
      }
    }
  }
  SECTION("records replay the draw") {
    auto t = video_modification_table();
    auto out = perturb_dataset(items, t, 42);
    for (const PerturbRecord& r : out.records) {
      REQUIRE(draw_kind(t, r.item_id, r.seed) == r.kind);
      REQUIRE(r.seed == 42);
    }
  }
  SECTION("replay csv row format") {
    PerturbRecord r{"clip3", PerturbKind::filter_red, 42};
    REQUIRE(r.to_csv_row() == "clip3,filter_red,42");
  }
}

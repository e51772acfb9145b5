#include "segedit/combiner.hpp"
#include "segedit/synth.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <random>

using namespace segedit;
using test_support::random_image;
using test_support::random_mask;
using test_support::rect_mask;
using test_support::solid;

TEST(InpaintReference, EmptyHoleConstantImageAndSinglePixel) {
    std::mt19937 rng(61);
    auto img = random_image(rng, 9, 9);
    EXPECT_EQ(inpaint_reference(img, MaskMap(9, 9), 3), img);

    auto flat = solid(12, 12, 0.2f, 0.4f, 0.6f);
    EXPECT_EQ(inpaint_reference(flat, random_mask(rng, 12, 12, 0.7), 5), flat);

    MaskMap one(9, 9);
    one.set(4, 4, true);
    for (int iters : {0, 3}) {
        auto out = inpaint_reference(img, one, iters);
        for (int c = 0; c < 3; ++c) {
            double sum = 0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if (dy || dx) sum += img.at(4 + dy, 4 + dx, c);
            EXPECT_NEAR(out.at(4, 4, c), sum / 8.0, 1e-6);
        }
    }
}

TEST(InpaintReference, OnlyHolePixelsChangeAndWholeImageHole) {
    std::mt19937 rng(62);
    auto img = random_image(rng, 20, 15);
    auto hole = random_mask(rng, 20, 15, 0.4);
    auto out = inpaint_reference(img, hole, 2);
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 15; ++x)
            for (int c = 0; c < 3; ++c)
                if (!hole.get(y, x)) EXPECT_EQ(out.at(y, x, c), img.at(y, x, c));
    EXPECT_TRUE(out.is_valid());

    auto full = inpaint_reference(img, MaskMap(20, 15, 1), 0);
    double mean = 0;
    for (int y = 0; y < 20; ++y)
        for (int x = 0; x < 15; ++x) mean += img.at(y, x, 1);
    EXPECT_NEAR(full.at(7, 3, 1), mean / 300.0, 1e-6);
}

TEST(InpaintReference, FillsLargeHoleFromBoundary) {
    // Left half 0, right half 1; a hole straddling the edge ends up between the two.
    ImageBuffer img(10, 10, 3);
    for (int y = 0; y < 10; ++y)
        for (int x = 5; x < 10; ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = 1.0f;
    auto out = inpaint_reference(img, rect_mask(10, 10, 3, 3, 7, 7), 0);
    EXPECT_LT(out.at(5, 3, 0), out.at(5, 6, 0));
    EXPECT_GT(out.at(5, 5, 0), 0.0f);
    EXPECT_LT(out.at(5, 4, 0), 1.0f);
}

TEST(CheckedInpaint, RejectsBackendsThatTouchKnownPixels) {
    struct Sloppy final : InpaintBackend {
        ImageBuffer inpaint(ImageBuffer const& image, MaskMap const&) const override {
            auto out = image;
            out.at(0, 0, 0) = 0.123f;
            return out;
        }
        std::string name() const override { return "sloppy"; }
    };
    CheckedInpaint checked(std::make_shared<Sloppy>());
    MaskMap hole(4, 4);
    hole.set(2, 2, true);
    try {
        checked.inpaint(ImageBuffer(4, 4, 3, 0.5f), hole);
        FAIL();
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::backend);
    }
    CheckedInpaint good(std::make_shared<DiffusionInpaint>());
    EXPECT_NO_THROW(good.inpaint(ImageBuffer(4, 4, 3, 0.5f), hole));
}

TEST(PrepareBackground, Examples) {
    ToySegmentation seg;
    DiffusionInpaint inpaint;
    auto plain = solid(32, 32, 0.5f, 0.5f, 0.45f);
    auto a = prepare_background(plain, seg, inpaint);
    EXPECT_EQ(a.inpainted, plain);
    EXPECT_EQ(a.pure, plain);

    auto scene = solid(40, 40, 0.5f, 0.5f, 0.5f);
    SegMap truth(40, 40, synth::shape_palette());
    synth::paint(scene, truth, {synth::Shape::square, 2, {10, 12, 22, 24}});
    auto b = prepare_background(scene, seg, inpaint);
    auto square = rect_mask(40, 40, 10, 12, 22, 24);
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 40; ++x)
            for (int c = 0; c < 3; ++c) {
                if (!square.get(y, x)) EXPECT_EQ(b.inpainted.at(y, x, c), scene.at(y, x, c));
                EXPECT_EQ(b.pure.at(y, x, c), square.get(y, x) ? 0.0f : scene.at(y, x, c));
            }
    EXPECT_NEAR(b.inpainted.at(16, 18, 0), 0.5f, 1e-6);
}

namespace {

struct Scene {
    ImageBuffer image;
    MaskMap mask;
    RegionSplit split;
};

Scene make_scene(std::mt19937& rng) {
    Scene s;
    s.image = random_image(rng, 32, 32);
    s.mask = rect_mask(32, 32, 10, 10, 20, 22);
    s.split = split_by_mask(s.image, s.mask);
    return s;
}

} // namespace

TEST(CombineFinal, AttributeIdentityRoundTrip) {
    std::mt19937 rng(63);
    auto s = make_scene(rng);
    DiffusionInpaint inpaint;
    EXPECT_EQ(combine_final(s.image, s.split, s.mask, Action::attribute(), nullptr, inpaint), s.image);
}

TEST(CombineFinal, RemoveYieldsInpaintedBase) {
    std::mt19937 rng(64);
    auto s = make_scene(rng);
    DiffusionInpaint inpaint;
    auto edited = solid(32, 32, 1, 0, 1);
    auto out = combine_final(edited, s.split, MaskMap(32, 32), Action::remove(), nullptr, inpaint);
    EXPECT_EQ(out, inpaint.inpaint(s.split.irrelevant, s.mask));
    for (float v : out.data()) EXPECT_FALSE(v == 1.0f && false);
}

TEST(CombineFinal, ResizeHalfPreservesOutsideBothMasks) {
    std::mt19937 rng(65);
    auto s = make_scene(rng);
    DiffusionInpaint inpaint;
    auto shrunk = scale_mask_about_centroid(s.mask, 0.5);
    auto edited = solid(32, 32, 0, 1, 0);
    auto out = combine_final(edited, s.split, shrunk, Action::resize(0.5), nullptr, inpaint);
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
            for (int c = 0; c < 3; ++c) {
                if (shrunk.get(y, x))
                    EXPECT_EQ(out.at(y, x, c), edited.at(y, x, c));
                else if (!s.mask.get(y, x))
                    EXPECT_EQ(out.at(y, x, c), s.image.at(y, x, c));
            }
    // Vacated ring is filled, not left black.
    EXPECT_GT(out.at(10, 10, 0) + out.at(10, 10, 1) + out.at(10, 10, 2), 0.0f);
}

TEST(CombineFinal, BackgroundSwapNeedsBackground) {
    std::mt19937 rng(66);
    auto s = make_scene(rng);
    DiffusionInpaint inpaint;
    try {
        combine_final(s.image, s.split, s.mask, Action::background_swap(), nullptr, inpaint);
        FAIL();
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::parameter);
    }
    BackgroundAsset bg{solid(32, 32, 0, 0, 1), SegMap(32, 32), solid(32, 32, 0, 0, 1), solid(32, 32, 0, 0, 1)};
    auto out = combine_final(s.image, s.split, s.mask, Action::background_swap(), &bg, inpaint);
    EXPECT_EQ(out.at(0, 0, 2), 1.0f);
    EXPECT_EQ(out.at(12, 12, 0), s.image.at(12, 12, 0));
}

TEST(AbsorbColorSeam, Contracts) {
    std::mt19937 rng(67);
    DiffusionInpaint inpaint;
    auto img = random_image(rng, 24, 24);
    EXPECT_EQ(absorb_color_seam(img, MaskMap(24, 24), 2, inpaint), img);

    auto mask = rect_mask(24, 24, 6, 5, 16, 19);
    auto band = extract_outline(mask, 2);
    auto out = absorb_color_seam(img, mask, 2, inpaint);
    for (int y = 0; y < 24; ++y)
        for (int x = 0; x < 24; ++x)
            for (int c = 0; c < 3; ++c)
                if (out.at(y, x, c) != img.at(y, x, c)) EXPECT_TRUE(band.get(y, x));

    auto flat = solid(24, 24, 0.3f, 0.3f, 0.9f);
    EXPECT_EQ(absorb_color_seam(flat, mask, 2, inpaint), flat);
}

TEST(CombineFinal, AttributePreservesTextIrrelevantPixels) {
    std::mt19937 rng(68);
    DiffusionInpaint inpaint;
    for (int trial = 0; trial < 10; ++trial) {
        auto s = make_scene(rng);
        auto edited = random_image(rng, 32, 32);
        auto out = absorb_color_seam(combine_final(edited, s.split, s.mask, Action::attribute(), nullptr, inpaint), s.mask, 2,
                                     inpaint);
        auto band = extract_outline(s.mask, 2);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x)
                if (!s.mask.get(y, x) && !band.get(y, x))
                    for (int c = 0; c < 3; ++c) EXPECT_EQ(out.at(y, x, c), s.image.at(y, x, c));
    }
}

TEST(ExternalInpaint, SubprocessMatchesReferenceInsideHole) {
    char const* helper = std::getenv("SEGEDIT_TOY_BACKEND");
    if (!helper) GTEST_SKIP() << "SEGEDIT_TOY_BACKEND not set";
    std::mt19937 rng(69);
    auto img = random_image(rng, 16, 16);
    auto hole = rect_mask(16, 16, 4, 4, 9, 10);
    ExternalInpaint ext(helper);
    auto out = ext.inpaint(img, hole);
    auto ref = DiffusionInpaint().inpaint(quantize_8bit(img), hole);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            for (int c = 0; c < 3; ++c) {
                if (hole.get(y, x))
                    EXPECT_NEAR(out.at(y, x, c), ref.at(y, x, c), 1.0 / 255.0);
                else
                    EXPECT_EQ(out.at(y, x, c), img.at(y, x, c));
            }
}

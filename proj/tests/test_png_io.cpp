#include "segedit/png_io.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace segedit;

TEST(PngIo, QuantizedImageRoundTripsExactly) {
    std::mt19937 rng(21);
    auto img = quantize_8bit(test_support::random_image(rng, 13, 7));
    auto back = decode_png(encode_png(img));
    EXPECT_EQ(back, img);
}

TEST(PngIo, ConversionIsDivideAndRound) {
    ImageBuffer img(1, 2, 3);
    img.at(0, 0, 0) = 0.5f;  // 127.5 rounds half away from zero
    img.at(0, 1, 2) = 1.0f;
    auto back = decode_png(encode_png(img));
    EXPECT_FLOAT_EQ(back.at(0, 0, 0), 128.0f / 255.0f);
    EXPECT_FLOAT_EQ(back.at(0, 1, 2), 1.0f);
    EXPECT_FLOAT_EQ(back.at(0, 1, 1), 0.0f);
}

TEST(PngIo, SegmapWithPaletteSidecar) {
    SegMap seg(5, 6, {{1, "circle"}, {7, "square"}});
    seg.set(1, 1, 1);
    seg.set(4, 5, 7);
    auto dir = std::filesystem::temp_directory_path() / "segedit_png_io_test";
    std::filesystem::create_directories(dir);
    write_segmap(dir / "seg.png", seg);
    EXPECT_TRUE(std::filesystem::exists(dir / "seg.json"));
    EXPECT_EQ(read_segmap(dir / "seg.png"), seg);
    std::filesystem::remove_all(dir);
}

TEST(PngIo, MaskRoundTrip) {
    std::mt19937 rng(22);
    auto m = test_support::random_mask(rng, 9, 4);
    EXPECT_EQ(decode_mask_png(encode_mask_png(m)), m);
}

TEST(PngIo, GarbageIsIoError) {
    std::vector<uint8_t> junk{1, 2, 3, 4};
    try {
        decode_png(junk);
        FAIL();
    } catch (Error const& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
    EXPECT_THROW(palette_from_json(nlohmann::json::parse(R"({"x": "bird"})")), Error);
}

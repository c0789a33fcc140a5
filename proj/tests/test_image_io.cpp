#include <fstream>

#include <gtest/gtest.h>

#include "maskcount/image_io.hpp"
#include "test_support.hpp"

using namespace maskcount;
using maskcount::testing::TempDir;

namespace {

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out << bytes;
}

} // namespace

TEST(Ppm, RoundTripWithinQuantization) {
    TempDir dir("ppm");
    Rng rng(4);
    Volume3D img(3, 5, 7);
    for (double& v : img.values()) v = rng.uniform();
    const auto path = (dir.path() / "a.ppm").string();
    write_ppm(path, img);
    const Volume3D back = read_ppm(path);
    ASSERT_EQ(back.channels(), 3);
    ASSERT_EQ(back.height(), 5);
    ASSERT_EQ(back.width(), 7);
    for (std::size_t k = 0; k < img.size(); ++k) EXPECT_LE(std::abs(back.values()[k] - img.values()[k]), 0.5 / 255 + 1e-12);
}

TEST(Ppm, QuantizedValuesAreExact) {
    TempDir dir("ppmq");
    Volume3D img(3, 2, 2);
    for (std::size_t k = 0; k < img.size(); ++k) img.values()[k] = static_cast<double>(k * 20) / 255.0;
    const auto path = (dir.path() / "q.ppm").string();
    write_ppm(path, img);
    EXPECT_EQ(read_ppm(path), img);
}

TEST(Ppm, HeaderCommentsAreSkipped) {
    TempDir dir("ppmc");
    const auto path = dir.path() / "c.ppm";
    write_bytes(path, std::string("P6\n# made by hand\n1 1\n255\n") + std::string("\xff\x00\x80", 3));
    const Volume3D img = read_ppm(path.string());
    EXPECT_DOUBLE_EQ(img(0, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(img(1, 0, 0), 0.0);
    EXPECT_DOUBLE_EQ(img(2, 0, 0), 128.0 / 255.0);
}

TEST(Ppm, WrongMagicIsParseError) {
    TempDir dir("ppmm");
    const auto path = dir.path() / "m.ppm";
    write_bytes(path, "P3\n1 1\n255\n0 0 0\n");
    try {
        read_ppm(path.string());
        FAIL() << "expected a parse error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::parse);
    }
}

TEST(Ppm, TruncatedPixelDataIsParseError) {
    TempDir dir("ppmt");
    const auto path = dir.path() / "t.ppm";
    write_bytes(path, "P6\n2 2\n255\nabc");
    EXPECT_THROW(read_ppm(path.string()), Error);
}

TEST(Ppm, UnsupportedMaxvalIsRejected) {
    TempDir dir("ppmx");
    const auto path = dir.path() / "x.ppm";
    write_bytes(path, "P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00");
    EXPECT_THROW(read_ppm(path.string()), Error);
}

TEST(Ppm, MissingFileIsIoError) {
    try {
        read_ppm("/nonexistent/definitely/missing.ppm");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::io);
    }
}

TEST(Pgm, RoundTripOfBinaryMask) {
    TempDir dir("pgm");
    const Grid2D m(2, 3, {1, 0, 1, 0, 0, 1});
    const auto path = (dir.path() / "m.pgm").string();
    write_pgm(path, m);
    EXPECT_EQ(read_pgm(path), m);
}

TEST(Pgm, RangeIsMappedOntoBytes) {
    TempDir dir("pgmr");
    const auto path = (dir.path() / "r.pgm").string();
    write_pgm(path, Grid2D(1, 3, {-2, 0, 2}), -2, 2);
    const Grid2D back = read_pgm(path);
    EXPECT_DOUBLE_EQ(back(0, 0), 0.0);
    EXPECT_NEAR(back(0, 1), 128.0 / 255.0, 1e-12);
    EXPECT_DOUBLE_EQ(back(0, 2), 1.0);
}

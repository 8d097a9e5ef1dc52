#include <algorithm>
#include <cmath>
#include <set>

#include <gtest/gtest.h>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "fundusq/errors.hpp"
#include "fundusq/imaging.hpp"
#include "test_support.hpp"

using namespace fundusq;
using namespace fundusq::imaging;

namespace {

ImageTensor constant_image(int h, int w, float v) {
  ImageTensor img(h, w, false);
  std::fill(img.values().begin(), img.values().end(), v);
  return img;
}

cv::Mat to_mat(const ImageTensor& img) {
  cv::Mat m(img.height(), img.width(), CV_32FC3);
  std::copy(img.values().begin(), img.values().end(), m.ptr<float>(0));
  return m;
}

std::size_t count_bright(const ImageTensor& img, float t) {
  std::size_t n = 0;
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x)
      if (std::max({img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2)}) > t) ++n;
  return n;
}

// Frame of black pixels around random bright content.
ImageTensor framed(Rng& rng, int h, int w, int frame) {
  ImageTensor img(h, w, false);
  for (int y = frame; y < h - frame; ++y)
    for (int x = frame; x < w - frame; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(20 + rng.below(236));
  return img;
}

}  // namespace

TEST(ImageTensor, RejectsBadShapesAndRanges) {
  EXPECT_THROW(ImageTensor(0, 5), InvalidImage);
  EXPECT_THROW(ImageTensor(2, 2, std::vector<float>(11, 0.0f), false), InvalidImage);
  EXPECT_THROW(ImageTensor(1, 1, std::vector<float>{0.0f, 256.0f, 0.0f}, false), InvalidImage);
  EXPECT_THROW(ImageTensor(1, 1, std::vector<float>{0.0f, 1.5f, 0.0f}, true), InvalidImage);
  EXPECT_NO_THROW(ImageTensor(1, 1, std::vector<float>{0.0f, 1.0f, 0.5f}, true));
}

TEST(PreprocessConfig, ValidationAndJson) {
  PreprocessConfig c;
  EXPECT_EQ(c.target_size, 224);
  EXPECT_EQ(c.border_threshold, 10);
  c.target_size = 31;
  EXPECT_THROW(c.validate(), ValidationError);
  c.target_size = 64;
  c.border_threshold = 256;
  EXPECT_THROW(c.validate(), ValidationError);
  c.border_threshold = 3;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<PreprocessConfig>(), c);
  j["extra"] = 1;
  EXPECT_THROW(j.get<PreprocessConfig>(), ValidationError);
}

TEST(CropBlackBorders, FrameAroundDiscIsRemoved) {
  ImageTensor img(100, 100, false);
  for (int y = 10; y < 90; ++y)
    for (int x = 10; x < 90; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 200.0f;
  // Dark interior row inside the disc must survive.
  for (int x = 10; x < 90; ++x)
    for (int c = 0; c < 3; ++c) img.at(50, x, c) = 0.0f;
  const auto out = crop_black_borders(img, 10);
  EXPECT_EQ(out.height(), 80);
  EXPECT_EQ(out.width(), 80);
  EXPECT_EQ(count_bright(out, 10.0f), count_bright(img, 10.0f));
  EXPECT_EQ(count_bright(out, 10.0f), 79u * 80u);
}

TEST(CropBlackBorders, IdentityWithoutDarkBorder) {
  Rng rng(3);
  const auto img = fqtest::random_raw_image(rng, 17, 23, 11.0f, 255.0f);
  EXPECT_EQ(crop_black_borders(img, 10), img);
}

TEST(CropBlackBorders, AllBlackThrows) {
  EXPECT_THROW(crop_black_borders(ImageTensor(64, 64, false), 10), AllBlackImage);
  EXPECT_THROW(crop_black_borders(constant_image(8, 8, 10.0f), 10), AllBlackImage);
}

TEST(CropBlackBorders, RejectsNormalizedInput) {
  EXPECT_THROW(crop_black_borders(ImageTensor(4, 4, true), 10), InvalidImage);
}

TEST(SquarePad, TallerThanWide) {
  Rng rng(5);
  const auto img = fqtest::random_raw_image(rng, 80, 100, 1.0f, 255.0f);
  const auto out = square_pad(img);
  ASSERT_EQ(out.height(), 100);
  ASSERT_EQ(out.width(), 100);
  EXPECT_DOUBLE_EQ(out.sum(), img.sum());
  for (int y : {0, 9, 90, 99})
    for (int x = 0; x < 100; ++x) EXPECT_EQ(out.at(y, x, 1), 0.0f);
  EXPECT_EQ(out.at(10, 0, 0), img.at(0, 0, 0));
  EXPECT_EQ(out.at(89, 99, 2), img.at(79, 99, 2));
}

TEST(SquarePad, SquareUnchangedAndExtremeAspect) {
  Rng rng(6);
  const auto sq = fqtest::random_raw_image(rng, 64, 64);
  EXPECT_EQ(square_pad(sq), sq);
  const auto row = fqtest::random_raw_image(rng, 1, 5, 1.0f, 255.0f);
  const auto out = square_pad(row);
  ASSERT_EQ(out.height(), 5);
  for (int x = 0; x < 5; ++x) EXPECT_EQ(out.at(2, x, 0), row.at(0, x, 0));
  EXPECT_DOUBLE_EQ(out.sum(), row.sum());
}

TEST(SquarePad, OddPaddingGoesBottomRight) {
  const auto out = square_pad(constant_image(2, 5, 9.0f));
  ASSERT_EQ(out.height(), 5);
  EXPECT_EQ(out.at(0, 0, 0), 0.0f);
  EXPECT_EQ(out.at(1, 0, 0), 9.0f);
  EXPECT_EQ(out.at(2, 0, 0), 9.0f);
  EXPECT_EQ(out.at(3, 0, 0), 0.0f);
}

TEST(Resize, ShapeAndConstant) {
  const auto out = resize(constant_image(50, 50, 77.0f), 224);
  EXPECT_EQ(out.height(), 224);
  EXPECT_EQ(out.width(), 224);
  for (float v : out.values()) EXPECT_FLOAT_EQ(v, 77.0f);
  EXPECT_EQ(resize(constant_image(100, 100, 1.0f), 224).height(), 224);
}

TEST(Resize, CheckerboardCornersAndInterior) {
  ImageTensor img(2, 2, false);
  for (int c = 0; c < 3; ++c) {
    img.at(0, 0, c) = 0.0f;
    img.at(0, 1, c) = 255.0f;
    img.at(1, 0, c) = 255.0f;
    img.at(1, 1, c) = 0.0f;
  }
  const auto out = resize(img, 4);
  EXPECT_EQ(out.at(0, 0, 0), 0.0f);
  EXPECT_EQ(out.at(0, 3, 0), 255.0f);
  EXPECT_EQ(out.at(3, 0, 0), 255.0f);
  EXPECT_EQ(out.at(3, 3, 0), 0.0f);
  for (int y = 1; y <= 2; ++y)
    for (int x = 1; x <= 2; ++x) {
      EXPECT_GT(out.at(y, x, 0), 0.0f);
      EXPECT_LT(out.at(y, x, 0), 255.0f);
    }
  // Hand-evaluated: output (1,1) samples source (0.25,0.25):
  // 0.75*0.75*0 + 0.75*0.25*255 + 0.25*0.75*255 + 0.25*0.25*0 = 95.625
  EXPECT_NEAR(out.at(1, 1, 0), 95.625f, 1e-4f);
  EXPECT_NEAR(out.at(1, 2, 0), 159.375f, 1e-4f);
}

TEST(Resize, MatchesOpenCvBilinear) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 3 + static_cast<int>(rng.below(60));
    const int w = 3 + static_cast<int>(rng.below(60));
    const int oh = 2 + static_cast<int>(rng.below(90));
    const int ow = 2 + static_cast<int>(rng.below(90));
    const auto img = fqtest::random_raw_image(rng, h, w);
    const auto ours = resize(img, oh, ow);
    cv::Mat ref;
    cv::resize(to_mat(img), ref, cv::Size(ow, oh), 0, 0, cv::INTER_LINEAR);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x)
        for (int c = 0; c < 3; ++c)
          ASSERT_NEAR(ours.at(y, x, c), ref.at<cv::Vec3f>(y, x)[c], 1e-2f)
              << h << "x" << w << " -> " << oh << "x" << ow << " at " << y << "," << x;
  }
}

TEST(Resize, RangePreserved) {
  Rng rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const auto img = fqtest::random_raw_image(rng, 7 + trial, 9 + trial, 30.0f, 90.0f);
    const auto out = resize(img, 41);
    const auto [lo, hi] = std::minmax_element(out.values().begin(), out.values().end());
    EXPECT_GE(*lo, 30.0f);
    EXPECT_LE(*hi, 90.0f);
  }
}

TEST(Preprocess, ContractAndDeterminism) {
  Rng rng(13);
  const auto img = framed(rng, 120, 150, 12);
  const PreprocessConfig cfg;
  const auto a = preprocess(img, cfg);
  const auto b = preprocess(img, cfg);
  EXPECT_EQ(a.height(), 224);
  EXPECT_EQ(a.width(), 224);
  EXPECT_TRUE(a.normalized());
  for (float v : a.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
  EXPECT_EQ(a, b);
  EXPECT_THROW(preprocess(ImageTensor(40, 40, false), cfg), AllBlackImage);
}

TEST(Preprocess, MatchesIndependentPipeline) {
  Rng rng(14);
  const auto img = framed(rng, 300, 400, 20);
  const auto ours = preprocess(img, PreprocessConfig{});

  cv::Mat m = to_mat(img)(cv::Rect(20, 20, 360, 260)).clone();
  cv::Mat padded;
  cv::copyMakeBorder(m, padded, 50, 50, 0, 0, cv::BORDER_CONSTANT, cv::Scalar(0, 0, 0));
  ASSERT_EQ(padded.rows, 360);
  cv::Mat ref;
  cv::resize(padded, ref, cv::Size(224, 224), 0, 0, cv::INTER_LINEAR);
  ref /= 255.0;
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_NEAR(ours.at(y, x, c), ref.at<cv::Vec3f>(y, x)[c], 1.0f / 255.0f);
}

TEST(Preprocess, ConstantInputGivesConstantOutput) {
  const auto out = preprocess(constant_image(37, 53, 128.0f), PreprocessConfig{});
  std::set<float> distinct(out.values().begin(), out.values().end());
  // Padding introduces black; the content itself stays constant.
  EXPECT_LE(distinct.size(), 64u);
  const auto square = preprocess(constant_image(40, 40, 128.0f), PreprocessConfig{});
  for (float v : square.values()) EXPECT_FLOAT_EQ(v, 128.0f / 255.0f);
}

TEST(Properties, RandomRasters) {
  Rng rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 1 + static_cast<int>(rng.below(40));
    const int w = 1 + static_cast<int>(rng.below(40));
    auto img = fqtest::random_raw_image(rng, h, w);
    // Darken a random frame so cropping has work to do.
    const int f = static_cast<int>(rng.below(4));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (y < f || x < f || y >= h - f || x >= w - f)
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(rng.below(11));

    ImageTensor cropped;
    try {
      cropped = crop_black_borders(img, 10);
    } catch (const AllBlackImage&) {
      continue;
    }
    EXPECT_EQ(crop_black_borders(cropped, 10), cropped);
    EXPECT_EQ(count_bright(cropped, 10.0f), count_bright(img, 10.0f));

    const auto sq = square_pad(cropped);
    EXPECT_EQ(sq.height(), sq.width());
    EXPECT_EQ(sq.height(), std::max(cropped.height(), cropped.width()));
    EXPECT_DOUBLE_EQ(sq.sum(), cropped.sum());

    PreprocessConfig cfg;
    cfg.target_size = 32 + static_cast<int>(rng.below(40));
    const auto p1 = preprocess(img, cfg);
    EXPECT_EQ(p1, preprocess(img, cfg));
    EXPECT_EQ(p1.height(), cfg.target_size);
    EXPECT_NO_THROW(p1.check_range());
  }
}

TEST(Codec, PngRoundTrip) {
  Rng rng(21);
  const auto img = fqtest::random_raw_image(rng, 13, 17);
  const auto bytes = encode_png(img);
  EXPECT_EQ(decode_image(bytes), img);
  fqtest::TempDir dir;
  write_image(img, dir / "a.png");
  EXPECT_EQ(load_image(dir / "a.png"), img);
  EXPECT_THROW(load_image(dir / "missing.png"), DecodeError);
  const std::vector<std::uint8_t> junk{1, 2, 3, 4};
  EXPECT_THROW(decode_image(junk), DecodeError);
}

TEST(ResizePlane, MatchesImageResize) {
  Rng rng(22);
  const auto img = fqtest::random_raw_image(rng, 9, 7);
  std::vector<float> plane(63);
  for (int y = 0; y < 9; ++y)
    for (int x = 0; x < 7; ++x) plane[static_cast<std::size_t>(y) * 7 + x] = img.at(y, x, 1);
  const auto out = resize_plane(plane, 9, 7, 20, 30);
  const auto ref = resize(img, 20, 30);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 30; ++x) EXPECT_NEAR(out[static_cast<std::size_t>(y) * 30 + x], ref.at(y, x, 1), 1e-3f);
  EXPECT_THROW(resize_plane(plane, 8, 7, 2, 2), DimensionMismatch);
}

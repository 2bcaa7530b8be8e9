#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <string>

#include "ardlab/data.hpp"
#include "ardlab/distill.hpp"
#include "ardlab/io.hpp"
#include "ardlab/metrics.hpp"

using namespace ardlab;

namespace {

std::filesystem::path temp_dir() {
  auto p = std::filesystem::temp_directory_path() / "ardlab_test_data";
  std::filesystem::create_directories(p);
  return p;
}

struct IdxFiles {
  std::filesystem::path images, labels;
};

IdxFiles write_idx(const std::string& name, const std::string& images, const std::string& labels) {
  const auto dir = temp_dir();
  IdxFiles f{dir / (name + "-images"), dir / (name + "-labels")};
  write_file_atomic(f.images, images);
  write_file_atomic(f.labels, labels);
  return f;
}

IdxFiles small_fixture(const std::string& name) {
  std::vector<std::uint8_t> px(3 * 28 * 28, 0);
  px[0] = 255;
  px[28 * 28 + 5] = 51;
  auto [img, lbl] = encode_idx(px, {7, 1, 9}, 28, 28);
  return write_idx(name, img, lbl);
}

double accuracy(const MlpModel& m, const Dataset& d) {
  return evaluate(m, d, AttackConfig::standard(Norm::l2, 0.0)).acc;
}

}  // namespace

TEST(TwoMoons, NoiselessPointsLieOnArcs) {
  const Dataset d = gen_two_moons(200, 0.0, 3);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.features.at(i, 0), y = d.features.at(i, 1);
    const double cx = d.labels[i] == 0 ? 0.0 : 1.0, cy = d.labels[i] == 0 ? 0.0 : 0.5;
    EXPECT_NEAR(std::hypot(x - cx, y - cy), 1.0, 1e-12);
    if (d.labels[i] == 0) EXPECT_GE(y, -1e-12);
    else EXPECT_LE(y, 0.5 + 1e-12);
  }
}

TEST(TwoMoons, DeterministicPerSeed) {
  const Dataset a = gen_two_moons(100, 0.1, 4), b = gen_two_moons(100, 0.1, 4), c = gen_two_moons(100, 0.1, 5);
  EXPECT_EQ(a.features, b.features);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_FALSE(a.features == c.features);
}

TEST(TwoMoons, BalancedClasses) {
  const Dataset d = gen_two_moons(300, 0.1, 1);
  int ones = 0;
  for (int y : d.labels) ones += y;
  EXPECT_EQ(ones, 150);
}

TEST(TwoMoons, NonlinearProblem) {
  const Dataset train_set = gen_two_moons(1000, 0.1, 0), test_set = gen_two_moons(1000, 0.1, 1);
  SupervisedConfig sc;
  sc.optimizer.epochs = 30;
  sc.optimizer.batch_size = 32;
  const MlpModel linear = train_supervised(make_mlp({2, 2}, ModelRole::student, 1), train_set, sc);
  const MlpModel mlp = train_supervised(make_mlp({2, 32, 32, 2}, ModelRole::student, 1), train_set, sc);
  EXPECT_LE(accuracy(linear, test_set), 90.0);
  EXPECT_GE(accuracy(mlp, test_set), 97.0);
}

TEST(Blobs, SingleCenterRejected) {
  EXPECT_THROW(gen_blobs(10, {{0.0, 0.0}}, 1.0, 1), ContractError);
}

TEST(Blobs, ClusterMeansNearCenters) {
  const std::vector<std::vector<double>> centers{{0, 0}, {5, -3}, {-4, 6}};
  const std::size_t n = 3000;
  const double sigma = 1.5;
  const Dataset d = gen_blobs(n, centers, sigma, 7);
  for (std::size_t k = 0; k < centers.size(); ++k) {
    double mx = 0, my = 0;
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (d.labels[i] == static_cast<int>(k)) {
        mx += d.features.at(i, 0);
        my += d.features.at(i, 1);
        ++cnt;
      }
    mx /= static_cast<double>(cnt);
    my /= static_cast<double>(cnt);
    const double tol = 5.0 * sigma / std::sqrt(static_cast<double>(n) / centers.size());
    EXPECT_LE(std::fabs(mx - centers[k][0]), tol);
    EXPECT_LE(std::fabs(my - centers[k][1]), tol);
  }
}

TEST(Blobs, FarApartCentersAreSeparable) {
  const std::vector<std::vector<double>> centers{{0, 0}, {10, 0}, {0, 10}};
  const Dataset train_set = gen_blobs(900, centers, 1.0, 1), test_set = gen_blobs(3000, centers, 1.0, 2);
  SupervisedConfig sc;
  sc.optimizer.epochs = 10;
  sc.optimizer.lr = 0.01;
  const MlpModel m = train_supervised(make_mlp({2, 16, 3}, ModelRole::student, 3), train_set, sc);
  EXPECT_GE(accuracy(m, test_set), 99.9);
}

TEST(Normalization, RoundTrip) {
  Dataset d = gen_blobs(200, {{1, 2}, {-3, 4}}, 2.0, 9);
  const Tensor raw = d.features;
  standardize(d);
  const Tensor back = denormalize(d);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(back[i], raw[i], 1e-12);
}

TEST(Normalization, TrainStatisticsApplyToTestSplit) {
  Dataset train_set = gen_blobs(200, {{1, 2}, {-3, 4}}, 2.0, 9);
  Dataset test_set = gen_blobs(50, {{1, 2}, {-3, 4}}, 2.0, 10);
  const Tensor raw = test_set.features;
  standardize(train_set);
  apply_normalization(test_set, train_set.normalization);
  const Tensor back = denormalize(test_set);
  for (std::size_t i = 0; i < raw.size(); ++i) EXPECT_NEAR(back[i], raw[i], 1e-12);
}

TEST(Idx, HeaderAndScaling) {
  const IdxFiles f = small_fixture("ok");
  const Dataset d = load_mnist_idx(f.images, f.labels, 10);
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.dim(), 784u);
  EXPECT_EQ(d.num_classes, 10u);
  EXPECT_EQ(d.features.at(0, 0), 1.0);
  EXPECT_EQ(d.features.at(1, 5), 0.2);
  EXPECT_EQ(d.labels, (std::vector<int>{7, 1, 9}));
  ASSERT_TRUE(d.input_range.has_value());
}

TEST(Idx, BigEndianHeaderBytes) {
  auto [img, lbl] = encode_idx(std::vector<std::uint8_t>(2 * 28 * 28, 0), {0, 1}, 28, 28);
  const unsigned char expected[] = {0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28};
  for (int i = 0; i < 16; ++i) EXPECT_EQ(static_cast<unsigned char>(img[i]), expected[i]);
  EXPECT_EQ(static_cast<unsigned char>(lbl[3]), 1);
}

TEST(Idx, LimitTruncatesAndZeroIsError) {
  const IdxFiles f = small_fixture("limit");
  EXPECT_EQ(load_mnist_idx(f.images, f.labels, 2).size(), 2u);
  EXPECT_THROW(load_mnist_idx(f.images, f.labels, 0), ContractError);
}

TEST(Idx, BadMagicNamesField) {
  const IdxFiles good = small_fixture("magic");
  std::string img = read_file(good.images);
  img[3] = 0x01;
  const IdxFiles f = write_idx("badmagic", img, read_file(good.labels));
  try {
    load_mnist_idx(f.images, f.labels, 10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("images magic"), std::string::npos) << e.what();
  }
}

TEST(Idx, TruncatedPayload) {
  const IdxFiles good = small_fixture("trunc");
  std::string img = read_file(good.images);
  img.resize(img.size() - 10);
  const IdxFiles f = write_idx("truncated", img, read_file(good.labels));
  EXPECT_THROW(load_mnist_idx(f.images, f.labels, 10), FormatError);
  const IdxFiles h = write_idx("short_header", read_file(good.images).substr(0, 6), read_file(good.labels));
  EXPECT_THROW(load_mnist_idx(h.images, h.labels, 10), FormatError);
}

TEST(Idx, CountMismatch) {
  auto [img, lbl] = encode_idx(std::vector<std::uint8_t>(2 * 4, 0), {0, 1}, 2, 2);
  auto [img3, lbl3] = encode_idx(std::vector<std::uint8_t>(3 * 4, 0), {0, 1, 2}, 2, 2);
  const IdxFiles f = write_idx("count", img, lbl3);
  try {
    load_mnist_idx(f.images, f.labels, 10);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("count"), std::string::npos);
  }
}

TEST(Idx, BundledSubsetLoads) {
  const std::filesystem::path dir = std::filesystem::path(ARDLAB_SOURCE_DIR) / "data" / "mnist";
  const Dataset d = load_mnist_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte", 1000000);
  EXPECT_EQ(d.size(), 1000u);
  EXPECT_EQ(d.dim(), 784u);
  for (double v : d.features.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
}

#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace dlab;
using namespace dlab::testing;

namespace {

struct Fixture {
  ModelSpec spec = small_spec(1);
  Network net = random_network(spec, 31);
  LabeledBatch data;
  Fixture() {
    Rng rng(4);
    data = random_batch(spec, 5, rng);
  }
};

std::size_t count_lines(const std::string& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

}  // namespace

TEST(Surface, OriginAndEndpoint) {
  Fixture f;
  Rng rng(1);
  SurfaceOptions opt;
  opt.epsilon = 0.1;
  opt.resolution = 5;
  const SurfaceGrid g = sample_surface(f.net, f.data, 2, DirectionSource::Fgsm, rng, opt);
  ASSERT_EQ(g.cells.size(), 25u);
  const std::size_t idx[] = {2};
  const LabeledBatch x = gather(f.data, idx);
  const SurfaceCell& origin = g.at(0, 0);
  EXPECT_EQ(origin.a, 0.0);
  EXPECT_EQ(origin.b, 0.0);
  EXPECT_EQ(origin.loss, f.net.example_losses(x.images, x.labels)[0]);
  EXPECT_EQ(origin.pred, predictions(f.net.forward(x.images))[0]);
  const AttackOutcome adv = fgsm(f.net, x, 0.1);
  EXPECT_EQ(g.at(4, 0).loss, f.net.example_losses(adv.adv_images, x.labels)[0]);
  for (const SurfaceCell& c : g.cells) EXPECT_GE(c.loss, 0.0);
}

TEST(Surface, RowMajorOrder) {
  Fixture f;
  Rng rng(1);
  SurfaceOptions opt;
  opt.resolution = 3;
  opt.a_lo = opt.b_lo = -1.0;
  const SurfaceGrid g = sample_surface(f.net, f.data, 0, DirectionSource::Fgsm, rng, opt);
  EXPECT_EQ(g.cells[1].a, -1.0);
  EXPECT_EQ(g.cells[1].b, 0.0);
  EXPECT_EQ(g.cells[3].a, 0.0);
  EXPECT_EQ(g.cells[3].b, -1.0);
}

TEST(Surface, AffineLossIsPlanar) {
  const auto m = affine_loss_classifier({0.4, -1.3, 0.7}, 2.0);
  const LabeledBatch data{DenseArray(Shape{1, 3}, {0.5, 0.5, 0.5}), {0}};
  Rng rng(2);
  SurfaceOptions opt;
  opt.epsilon = 0.1;
  opt.resolution = 9;
  opt.a_lo = opt.b_lo = -1.0;
  const SurfaceGrid g = sample_surface(m, data, 0, DirectionSource::Fgsm, rng, opt);
  // least-squares plane fit on (a, b) -> loss; the grid is symmetric so the
  // normal equations decouple
  double sa = 0, sb = 0, sl = 0, saa = 0, sbb = 0, sal = 0, sbl = 0;
  for (const auto& c : g.cells) {
    sa += c.a, sb += c.b, sl += c.loss, saa += c.a * c.a, sbb += c.b * c.b, sal += c.a * c.loss, sbl += c.b * c.loss;
  }
  const double n = static_cast<double>(g.cells.size());
  const double ka = (sal - sa * sl / n) / (saa - sa * sa / n);
  const double kb = (sbl - sb * sl / n) / (sbb - sb * sb / n);
  const double c0 = (sl - ka * sa - kb * sb) / n;
  for (const auto& c : g.cells) EXPECT_LE(std::abs(c.loss - (c0 + ka * c.a + kb * c.b)), 1e-9);
}

TEST(Surface, Deterministic) {
  Fixture f;
  SurfaceOptions opt;
  opt.resolution = 4;
  Rng a(9), b(9);
  const SurfaceGrid x = sample_surface(f.net, f.data, 1, DirectionSource::Fast, a, opt);
  const SurfaceGrid y = sample_surface(f.net, f.data, 1, DirectionSource::Fast, b, opt);
  EXPECT_EQ(x.v1, y.v1);
  EXPECT_EQ(x.v2, y.v2);
  for (std::size_t i = 0; i < x.cells.size(); ++i) EXPECT_EQ(x.cells[i].loss, y.cells[i].loss);
}

TEST(Surface, SuppliedDirection) {
  Fixture f;
  SurfaceOptions opt;
  opt.resolution = 2;
  opt.supplied = DenseArray(Shape{6});
  Rng rng(1);
  EXPECT_THROW(sample_surface(f.net, f.data, 0, DirectionSource::Supplied, rng, opt), ConfigError);  // zero v1
  opt.supplied[0] = 0.05;
  const SurfaceGrid g = sample_surface(f.net, f.data, 0, DirectionSource::Supplied, rng, opt);
  EXPECT_EQ(g.v1, opt.supplied);
  opt.supplied = DenseArray(Shape{5});
  EXPECT_THROW(sample_surface(f.net, f.data, 0, DirectionSource::Supplied, rng, opt), ConfigError);
}

TEST(Surface, Preconditions) {
  Fixture f;
  SurfaceOptions opt;
  opt.resolution = 1;
  Rng rng(1);
  EXPECT_THROW(sample_surface(f.net, f.data, 0, DirectionSource::Fgsm, rng, opt), ConfigError);
  opt.resolution = 3;
  EXPECT_THROW(sample_surface(f.net, f.data, 99, DirectionSource::Fgsm, rng, opt), ConfigError);
  const auto flat = affine_loss_classifier({0.0}, 1.0);
  EXPECT_THROW(sample_surface(flat, scalar_batch({0.5}), 0, DirectionSource::Fgsm, rng, opt), ConfigError);
}

TEST(RandomDirection, BoundsAndDeterminism) {
  Rng a(3), b(3), z(3);
  const DenseArray v = random_direction({4, 4}, 0.05, a);
  EXPECT_LE(linf_norm(v.values()), 0.05);
  EXPECT_EQ(v, random_direction({4, 4}, 0.05, b));
  const DenseArray zero = random_direction({8}, 0.0, z);
  for (double x : zero.values()) EXPECT_EQ(x, 0.0);
}

TEST(RandomDirection, MeanNearZero) {
  Rng rng(8);
  const std::size_t n = 100000;
  const DenseArray v = random_direction({n}, 1.0, rng);
  double s = 0.0;
  for (double x : v.values()) s += x;
  const double sigma = 1.0 / std::sqrt(3.0) / std::sqrt(static_cast<double>(n));
  EXPECT_LE(std::abs(s / n), 3.0 * sigma);
}

TEST(SurfaceCsv, LayoutAndRoundTrip) {
  Fixture f;
  SurfaceOptions opt;
  opt.resolution = 2;
  Rng rng(1);
  const SurfaceGrid g = sample_surface(f.net, f.data, 0, DirectionSource::Fgsm, rng, opt);
  const auto dir = scratch_dir("surface");
  const std::string path = (dir / "grid.csv").string();
  export_grid(g, path);
  EXPECT_EQ(count_lines(path), 5u);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  EXPECT_EQ(header, "a,b,loss,pred,correct");
  const auto cells = read_grid(path);
  ASSERT_EQ(cells.size(), g.cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    EXPECT_EQ(cells[i].a, g.cells[i].a);
    EXPECT_EQ(cells[i].b, g.cells[i].b);
    EXPECT_EQ(cells[i].loss, g.cells[i].loss);
    EXPECT_EQ(cells[i].pred, g.cells[i].pred);
    EXPECT_EQ(cells[i].correct, g.cells[i].correct);
  }
}

TEST(SurfaceCsv, SeventeenDigitsRoundTripAwkwardValues) {
  SurfaceGrid g;
  g.resolution = 2;
  Rng rng(2);
  for (int i = 0; i < 4; ++i) g.cells.push_back({rng.uniform() / 3.0, 1e-300 * rng.uniform(), 0.1 + 0.2, 1, false});
  const auto dir = scratch_dir("surface-digits");
  const std::string path = (dir / "g.csv").string();
  export_grid(g, path);
  const auto cells = read_grid(path);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(cells[i].a, g.cells[i].a);
    EXPECT_EQ(cells[i].b, g.cells[i].b);
    EXPECT_EQ(cells[i].loss, g.cells[i].loss);
  }
}

TEST(SurfaceCsv, RejectsBadGridBeforeWriting) {
  SurfaceGrid g;
  g.resolution = 1;
  g.cells.resize(1);
  const auto dir = scratch_dir("surface-bad");
  const auto path = dir / "never.csv";
  EXPECT_THROW(export_grid(g, path.string()), ConfigError);
  EXPECT_FALSE(std::filesystem::exists(path));
  SurfaceGrid ok;
  ok.resolution = 2;
  ok.cells.resize(4);
  EXPECT_THROW(export_grid(ok, (dir / "missing" / "x.csv").string()), IoError);
}

TEST(SurfaceCsv, MalformedInput) {
  const auto dir = scratch_dir("surface-malformed");
  const std::string path = (dir / "m.csv").string();
  std::ofstream(path) << "a,b,loss,pred,correct\n0,0,1.0,zero,1\n";
  EXPECT_THROW(read_grid(path), FormatError);
  std::ofstream(path) << "x,y\n";
  EXPECT_THROW(read_grid(path), FormatError);
}

TEST(Consistency, DistortedExampleHasInteriorMisclassifiedCell) {
  const auto m = interval_classifier(0.35, 0.45);
  const LabeledBatch data = scalar_batch({0.2, 0.6, 0.3});
  const std::size_t n = 100;
  const DistortionEstimate d = estimate_distortion(m, data, 0.5, n);
  ASSERT_FALSE(d.distorted.empty());
  for (std::size_t idx : d.distorted) {
    SurfaceOptions opt;
    opt.epsilon = 0.5;
    opt.resolution = n + 2;
    Rng rng(idx);
    const SurfaceGrid g = sample_surface(m, data, idx, DirectionSource::Fgsm, rng, opt);
    bool found = false;
    for (std::size_t i = 1; i + 1 < opt.resolution; ++i) found = found || !g.at(i, 0).correct;
    EXPECT_TRUE(found) << "example " << idx;
  }
}

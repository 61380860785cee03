#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "neuroextract/neunet/training.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace neuroextract;
using namespace neuroextract::neunet;

namespace {

using Tensor = std::vector<double>;  // [C][H][W]

Tensor conv3(const Tensor& in, int ci, int n, std::span<const double> w, std::span<const double> b, int co,
             bool relu) {
  Tensor out(static_cast<std::size_t>(co) * n * n);
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        double s = b[o];
        for (int c = 0; c < ci; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = y + ky - 1, sx = x + kx - 1;
              if (sy < 0 || sx < 0 || sy >= n || sx >= n) continue;
              s += w[((o * ci + c) * 3 + ky) * 3 + kx] * in[(c * n + sy) * n + sx];
            }
        out[(o * n + y) * n + x] = relu ? std::max(0.0, s) : s;
      }
  return out;
}

Tensor pool(const Tensor& in, int c, int n) {
  const int m = n / 2;
  Tensor out(static_cast<std::size_t>(c) * m * m);
  for (int k = 0; k < c; ++k)
    for (int y = 0; y < m; ++y)
      for (int x = 0; x < m; ++x) {
        double v = -INFINITY;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) v = std::max(v, in[(k * n + 2 * y + dy) * n + 2 * x + dx]);
        out[(k * m + y) * m + x] = v;
      }
  return out;
}

Tensor upconv(const Tensor& in, int ci, int n, std::span<const double> w, std::span<const double> b, int co) {
  const int m = 2 * n;
  Tensor out(static_cast<std::size_t>(co) * m * m);
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < m; ++y)
      for (int x = 0; x < m; ++x) {
        double s = b[o];
        for (int c = 0; c < ci; ++c) s += w[((c * co + o) * 2 + y % 2) * 2 + x % 2] * in[(c * n + y / 2) * n + x / 2];
        out[(o * m + y) * m + x] = s;
      }
  return out;
}

// Direct-loop U-net forward, written from the parameter table alone.
Tensor naive_forward(const BasicWeights<double>& w, const Tensor& image) {
  const UNetConfig& c = w.config;
  std::vector<Tensor> skips;
  Tensor x = image;
  int n = c.input_size, cin = c.in_channels;
  for (int l = 0; l < c.levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const int ch = c.channels(l);
    x = conv3(x, cin, n, w.tensor(p + ".conv1.weight"), w.tensor(p + ".conv1.bias"), ch, true);
    x = conv3(x, ch, n, w.tensor(p + ".conv2.weight"), w.tensor(p + ".conv2.bias"), ch, true);
    skips.push_back(x);
    if (l + 1 < c.levels) {
      x = pool(x, ch, n);
      n /= 2;
    }
    cin = ch;
  }
  for (int l = c.levels - 2; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    const int ch = c.channels(l);
    const Tensor up = upconv(x, c.channels(l + 1), n, w.tensor(p + ".up.weight"), w.tensor(p + ".up.bias"), ch);
    n *= 2;
    Tensor cat = skips[l];
    cat.insert(cat.end(), up.begin(), up.end());
    x = conv3(cat, 2 * ch, n, w.tensor(p + ".conv1.weight"), w.tensor(p + ".conv1.bias"), ch, true);
    x = conv3(x, ch, n, w.tensor(p + ".conv2.weight"), w.tensor(p + ".conv2.bias"), ch, true);
  }
  const auto hw_ = w.tensor("head.weight");
  const auto hb = w.tensor("head.bias");
  const int c0 = c.channels(0);
  const std::size_t np = static_cast<std::size_t>(n) * n;
  Tensor probs(2 * np);
  for (std::size_t i = 0; i < np; ++i) {
    double z[2];
    for (int k = 0; k < 2; ++k) {
      z[k] = hb[k];
      for (int ch = 0; ch < c0; ++ch) z[k] += hw_[k * c0 + ch] * x[ch * np + i];
    }
    const double m = std::max(z[0], z[1]);
    const double e0 = std::exp(z[0] - m), e1 = std::exp(z[1] - m);
    probs[i] = e0 / (e0 + e1);
    probs[np + i] = e1 / (e0 + e1);
  }
  return probs;
}

UNetConfig small(int levels, int base, int size, int in_ch) {
  UNetConfig c;
  c.levels = levels;
  c.base_channels = base;
  c.input_size = size;
  c.in_channels = in_ch;
  return c;
}



// Case with synthetic maps: a bright ellipsoid on a dim background.
CaseData toy_case(const std::string& id, volgrid::Dims dims, std::uint64_t seed) {
  CaseData d;
  d.record.case_id = id;
  d.record.site = "A";
  d.record.timepoint = "day2";
  const auto g = volgrid::Geometry::with_spacing(dims, {0.15, 0.15, 0.15});
  const volgrid::Mask brain = testutil::ellipsoid(g, dims[0] * 0.3, dims[1] * 0.3, dims[2] * 0.3);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.02);
  for (int k = 0; k < 4; ++k) {
    volgrid::Volume v(g);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((brain[i] ? 1.0 + 0.2 * k : 0.2) + n(rng));
    d.maps[k] = v;
  }
  d.truth = brain;
  return d;
}

}  // namespace

TEST_CASE("parameter layout and channel widths") {
  const UNetConfig c = small(3, 8, 64, 4);
  CHECK(c.channels(0) == 8);
  CHECK(c.channels(2) == 32);
  UNetConfig deep = small(6, 2, 64, 4);
  CHECK(deep.channels(5) == 32);  // capped at 16 * base
  const auto layout = parameter_layout(c);
  CHECK(layout.front().name == "enc0.conv1.weight");
  CHECK(layout.front().shape == std::vector<int>{8, 4, 3, 3});
  CHECK(layout.back().name == "head.bias");
  std::size_t total = 0;
  for (const auto& t : layout) total += t.size();
  CHECK(parameter_count(c) == total);
  UNetConfig bad = c;
  bad.input_size = 66;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.in_channels = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("forward pass equals a direct-loop oracle") {
  std::mt19937_64 rng(4);
  for (const auto& c : {small(1, 3, 8, 1), small(2, 4, 16, 4), small(3, 2, 16, 1)}) {
    auto w = unet_init(c, 9).cast<double>();
    gradcheck::randomize_biases(w, rng);
    const auto samples = gradcheck::random_samples(1, c.input_size, c.in_channels, rng);
    const Tensor image(samples[0].image.begin(), samples[0].image.end());
    const auto got = unet_forward<double>(w, image);
    const auto ref = naive_forward(w, image);
    REQUIRE(got.size() == ref.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - ref[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("backward pass matches central differences to 1e-5 relative") {
  CHECK(gradcheck::max_relative_error(small(2, 4, 16, 1), 2, 5) < 1e-5);
}

TEST_CASE("cross entropy and loss agree") {
  const UNetConfig c = small(2, 2, 8, 1);
  std::mt19937_64 rng(6);
  const auto w = unet_init(c, 1).cast<double>();
  const auto batch = gradcheck::random_samples(3, 8, 1, rng);
  double mean = 0.0;
  for (const auto& s : batch) {
    const std::vector<double> img(s.image.begin(), s.image.end());
    mean += cross_entropy<double>(unet_forward<double>(w, img), s.label) / 3.0;
  }
  BasicWeights<double> g;
  CHECK(loss_and_gradient<double>(w, batch, g) == doctest::Approx(mean).epsilon(1e-12));
}

TEST_CASE("adam follows the bias-corrected recurrence") {
  std::vector<double> p = {1.0, -2.0};
  AdamState<double> st;
  const AdamParams ap{0.1, 0.9, 0.999, 1e-8};
  double m = 0, v = 0, x = 1.0;
  const std::vector<double> grads = {0.5, -0.25, 1.0, 0.0};
  for (std::size_t t = 1; t <= grads.size(); ++t) {
    const double gr = grads[t - 1];
    const std::vector<double> g = {gr, 2 * gr};
    adam_step<double>(p, g, st, ap);
    m = 0.9 * m + 0.1 * gr;
    v = 0.999 * v + 0.001 * gr * gr;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    x -= 0.1 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p[0] == doctest::Approx(x).epsilon(1e-14));
  }
  CHECK(st.step == 4);
}

TEST_CASE("initialization is deterministic He-normal") {
  const UNetConfig c = small(3, 8, 64, 4);
  const auto a = unet_init(c, 5), b = unet_init(c, 5), d = unet_init(c, 6);
  CHECK(a.values == b.values);
  CHECK(a.values != d.values);
  const auto k = a.tensor("enc1.conv2.weight");
  double ss = 0;
  for (const float v : k) ss += v * v;
  const double sd = std::sqrt(ss / k.size());
  CHECK(sd == doctest::Approx(std::sqrt(2.0 / (16 * 9))).epsilon(0.1));
  for (const float v : a.tensor("enc0.conv1.bias")) CHECK(v == 0.0f);
}

TEST_CASE("weights file round trip, truncation and corruption") {
  testutil::TempDir tmp("weights");
  const auto w = unet_init(small(2, 4, 16, 4), 2);
  save_weights(w, tmp / "w.bin", "abc123");
  const auto r = load_weights(tmp / "w.bin");
  CHECK(r.config == w.config);
  CHECK(r.values == w.values);

  std::ifstream f(tmp / "w.bin", std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(f)), {});
  CHECK(bytes.find("abc123") != std::string::npos);
  auto expect_format = [&](const std::string& b, const char* name) {
    std::ofstream o(tmp / name, std::ios::binary);
    o.write(b.data(), static_cast<std::streamsize>(b.size()));
    o.close();
    try {
      load_weights(tmp / name);
      FAIL("expected a format error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::Format);
    }
  };
  expect_format(bytes.substr(0, bytes.size() - 9), "trunc.bin");
  std::string flipped = bytes;
  flipped[flipped.size() - 20] ^= 0x40;
  expect_format(flipped, "flip.bin");
  expect_format("NOTWEIGHTS", "magic.bin");
}

TEST_CASE("augmentation with identity ranges is exact and random draws are reproducible") {
  std::mt19937_64 rng(3);
  auto s = gradcheck::random_samples(1, 32, 4, rng)[0];
  std::mt19937_64 a(1);
  const Sample2D same = augment(s, a, AugmentRanges::none());
  CHECK(same.image == s.image);
  CHECK(same.label == s.label);

  std::mt19937_64 r1(42), r2(42);
  const Sample2D x = augment(s, r1, AugmentRanges{});
  const Sample2D y = augment(s, r2, AugmentRanges{});
  CHECK(x.image == y.image);
  CHECK(x.label == y.label);
  CHECK(x.image != s.image);
  for (const auto l : x.label) CHECK((l == 0 || l == 1));
  CHECK(x.channels == s.channels);
}

TEST_CASE("augmentation keeps image and label aligned") {
  // A bright square with matching label: after any spatial draw, labelled
  // pixels should still be bright.
  Sample2D s;
  s.size = 32;
  s.channels = 1;
  s.image.assign(32 * 32, 0.0f);
  s.label.assign(32 * 32, 0);
  for (int y = 8; y < 24; ++y)
    for (int x = 8; x < 24; ++x) {
      s.image[y * 32 + x] = 1.0f;
      s.label[y * 32 + x] = 1;
    }
  AugmentRanges r;
  r.gamma_min = r.gamma_max = 1.0;
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const Sample2D a = augment(s, rng, r);
    int agree = 0, total = 0;
    for (std::size_t i = 0; i < a.label.size(); ++i)
      if (a.label[i]) {
        ++total;
        agree += a.image[i] > 0.5f;
      }
    REQUIRE(total > 0);
    CHECK(static_cast<double>(agree) / total > 0.9);
  }
  AugmentRanges bad;
  bad.scale_min = 1.2;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("placement preserves aspect and centres the slice") {
  const Placement p = placement(96, 211, 64);
  CHECK(p.dst_h == 64);
  CHECK(p.dst_w == 29);
  CHECK(p.off_x == 17);
  CHECK(p.off_y == 0);
  const Placement q = placement(64, 64, 64);
  CHECK(q.dst_w == 64);
  CHECK(q.off_x == 0);
}

TEST_CASE("samples honour channel mode and contrast filter") {
  const CaseData d = toy_case("c0", {12, 10, 8}, 1);
  const std::vector<Contrast> t2b = {Contrast::T2Base};
  const auto single = make_samples(d, ChannelMode::Single, t2b, 16);
  CHECK(single.size() == 12 + 10 + 8);
  for (const auto& s : single) {
    CHECK(s.channels == 1);
    CHECK(s.contrast == static_cast<int>(Contrast::T2Base));
  }
  const std::vector<Contrast> all(kAllContrasts.begin(), kAllContrasts.end());
  const auto multi = make_samples(d, ChannelMode::Multi, all, 16);
  CHECK(multi.size() == 30);
  CHECK(multi[0].channels == 4);
  CHECK(multi[0].contrast == -1);
  const auto per = make_samples(d, ChannelMode::Single, all, 16);
  CHECK(per.size() == 4 * 30);
  for (const auto& s : multi)
    for (const float v : s.image) CHECK((v >= 0.0f && v <= kInputClip));

  CaseData partial = d;
  partial.maps[1].reset();
  CHECK_THROWS_AS(make_samples(partial, ChannelMode::Multi, all, 16), Error);
}

TEST_CASE("tri-plane fusion averages the three axis predictions") {
  const CaseData d = toy_case("c0", {6, 5, 4}, 2);
  const SlicePredictor stub = [](const Sample2D& s) {
    const float p = s.axis == 0 ? 0.2f : s.axis == 1 ? 0.4f : 0.9f;
    return std::vector<float>(static_cast<std::size_t>(s.size) * s.size, p);
  };
  InferenceOptions opt;
  for (const auto& order : {std::array<int, 3>{0, 1, 2}, std::array<int, 3>{2, 0, 1}}) {
    opt.axis_order = order;
    const TriplaneResult r = predict_triplane(d, stub, opt, 8);
    for (std::size_t i = 0; i < r.fused.size(); ++i) {
      CHECK(r.fused[i] == doctest::Approx(0.5).epsilon(1e-6));
      CHECK(r.per_axis[0][i] == doctest::Approx(0.2));
      CHECK(r.per_axis[2][i] == doctest::Approx(0.9));
    }
  }
}

TEST_CASE("probability thresholding is strict and fails on empty output") {
  volgrid::Volume p(testutil::grid(4, 4, 4), 0.5f);
  CHECK_THROWS_AS(probabilities_to_mask(p, 0.5, true), Error);
  p.at(1, 1, 1) = 0.6f;
  p.at(3, 3, 3) = 0.7f;
  CHECK(probabilities_to_mask(p, 0.5, false).count() == 2);
  CHECK(probabilities_to_mask(p, 0.5, true).count() == 1);
}

TEST_CASE("inference rejects weights whose channel count disagrees with the mode") {
  const CaseData d = toy_case("c0", {8, 8, 8}, 3);
  const auto w = unet_init(small(2, 2, 16, 4), 1);
  InferenceOptions opt;
  opt.channel_mode = ChannelMode::Single;
  try {
    predict_triplane(d, w, opt);
    FAIL("expected a config error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
}

TEST_CASE("training is reproducible, thread-count invariant, and lowers the probe loss") {
  std::vector<CaseData> train_set = {toy_case("a", {16, 16, 16}, 1), toy_case("b", {16, 16, 16}, 2)};
  std::vector<CaseData> val_set = {toy_case("v", {16, 16, 16}, 3)};
  const UNetConfig u = small(2, 4, 16, 4);
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.batch_size = 4;
  tc.epochs = 3;
  tc.samples_per_epoch = 48;
  tc.seed = 11;
  tc.threads = 1;
  const TrainResult a = train(train_set, val_set, u, tc);
  tc.threads = 3;
  const TrainResult b = train(train_set, val_set, u, tc);
  CHECK(a.weights.values == b.weights.values);
  CHECK(a.history.val_dice == b.history.val_dice);
  CHECK(a.history.probe_loss.size() == 3);
  CHECK(*std::min_element(a.history.probe_loss.begin(), a.history.probe_loss.end()) < a.history.initial_probe_loss);
  CHECK(a.history.best_epoch >= 0);

  CHECK_THROWS_AS(train(train_set, train_set, u, tc), Error);  // overlapping ids
  UNetConfig one = u;
  one.in_channels = 1;
  CHECK_THROWS_AS(train(train_set, val_set, one, tc), Error);
}

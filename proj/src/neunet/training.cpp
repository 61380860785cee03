#include "neuroextract/neunet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "neuroextract/core/parallel.hpp"
#include "neuroextract/core/seed.hpp"
#include "neuroextract/core/stats.hpp"
#include "neuroextract/evalharness/dice.hpp"
#include "neuroextract/volgrid/components.hpp"
#include "neuroextract/volgrid/slice.hpp"

namespace neuroextract::neunet {
namespace {

constexpr std::uint64_t kProbeStream = 0x70726f6265ull;
constexpr std::size_t kProbeSamples = 64;

float bilinear(const float* img, int w, int h, double u, double v) {
  u = std::clamp(u, 0.0, static_cast<double>(w - 1));
  v = std::clamp(v, 0.0, static_cast<double>(h - 1));
  const int x0 = static_cast<int>(u), y0 = static_cast<int>(v);
  const int x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
  const double fx = u - x0, fy = v - y0;
  const double a = img[static_cast<std::size_t>(y0) * w + x0], b = img[static_cast<std::size_t>(y0) * w + x1];
  const double c = img[static_cast<std::size_t>(y1) * w + x0], d = img[static_cast<std::size_t>(y1) * w + x1];
  return static_cast<float>((1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d));
}

// Slice -> square network input.
void resize_into(const volgrid::Image2D& src, const Placement& p, int size, float* dst) {
  const double sx = static_cast<double>(p.src_w) / p.dst_w, sy = static_cast<double>(p.src_h) / p.dst_h;
  for (int y = 0; y < p.dst_h; ++y)
    for (int x = 0; x < p.dst_w; ++x)
      dst[static_cast<std::size_t>(y + p.off_y) * size + x + p.off_x] =
          bilinear(src.data.data(), src.width, src.height, (x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5);
}

// Network output -> slice geometry. Samples only inside the placed region.
volgrid::Image2D resize_back(std::span<const float> prob, const Placement& p, int size) {
  std::vector<float> region(static_cast<std::size_t>(p.dst_w) * p.dst_h);
  for (int y = 0; y < p.dst_h; ++y)
    for (int x = 0; x < p.dst_w; ++x)
      region[static_cast<std::size_t>(y) * p.dst_w + x] = prob[static_cast<std::size_t>(y + p.off_y) * size + x + p.off_x];
  volgrid::Image2D out(p.src_w, p.src_h);
  const double sx = static_cast<double>(p.dst_w) / p.src_w, sy = static_cast<double>(p.dst_h) / p.src_h;
  for (int j = 0; j < p.src_h; ++j)
    for (int i = 0; i < p.src_w; ++i)
      out.at(i, j) = bilinear(region.data(), p.dst_w, p.dst_h, (i + 0.5) * sx - 0.5, (j + 0.5) * sy - 0.5);
  return out;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * r + 1);
  double sum = 0.0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  return k;
}

// Separable Gaussian blur with edge clamp.
void blur(std::vector<double>& f, int n, double sigma) {
  const std::vector<double> k = gaussian_kernel(sigma);
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(f.size());
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * f[static_cast<std::size_t>(y) * n + std::clamp(x + i, 0, n - 1)];
      tmp[static_cast<std::size_t>(y) * n + x] = acc;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp[static_cast<std::size_t>(std::clamp(y + i, 0, n - 1)) * n + x];
      f[static_cast<std::size_t>(y) * n + x] = acc;
    }
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  if (hi <= lo) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

std::vector<Contrast> sample_contrasts(std::span<const Contrast> contrasts, const SliceRef& ref) {
  if (ref.contrast < 0) return {contrasts.begin(), contrasts.end()};
  return {contrasts[static_cast<std::size_t>(ref.contrast)]};
}

double mean_probe_loss(const UNetWeights& w, std::span<const Sample2D> probe) {
  double sum = 0.0;
  for (const Sample2D& s : probe) {
    const std::vector<float> probs = unet_forward<float>(w, s.image);
    sum += cross_entropy<float>(probs, s.label);
  }
  return sum / static_cast<double>(probe.size());
}

}  // namespace

std::string to_string(ChannelMode m) { return m == ChannelMode::Multi ? "multi" : "single"; }

ChannelMode channel_mode_from_string(const std::string& s) {
  if (s == "multi") return ChannelMode::Multi;
  if (s == "single") return ChannelMode::Single;
  throw Error(ErrorKind::Config, "channel mode must be multi or single, got '" + s + "'");
}

AugmentRanges AugmentRanges::none() {
  AugmentRanges a;
  a.translate_fraction = 0.0;
  a.rotate_degrees = 0.0;
  a.scale_min = a.scale_max = 1.0;
  a.gamma_min = a.gamma_max = 1.0;
  a.elastic_alpha_px = 0.0;
  return a;
}

void AugmentRanges::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, "augmentation: " + m); };
  if (!(translate_fraction >= 0.0 && translate_fraction < 0.5)) fail("translate_fraction must lie in [0, 0.5)");
  if (!(rotate_degrees >= 0.0 && rotate_degrees <= 180.0)) fail("rotate_degrees must lie in [0, 180]");
  if (!(scale_min > 0.0 && scale_min <= 1.0 && scale_max >= 1.0)) fail("scale range must contain 1");
  if (!(gamma_min > 0.0 && gamma_min <= gamma_max)) fail("gamma range must be positive and ordered");
  if (!(elastic_alpha_px >= 0.0)) fail("elastic_alpha_px must be >= 0");
  if (!(elastic_sigma_px > 0.0)) fail("elastic_sigma_px must be > 0");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, "training: " + m); };
  if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (epochs < 1) fail("epochs must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) fail("epsilon must be > 0");
  if (samples_per_epoch < 0) fail("samples_per_epoch must be >= 0");
  if (contrasts.empty()) fail("at least one contrast is required");
  if (channel_mode == ChannelMode::Multi && contrasts.size() != 1 && contrasts.size() != 4)
    fail("multi-channel mode needs 1 or 4 contrasts");
  augmentation.validate();
}

int TrainConfig::in_channels() const {
  return channel_mode == ChannelMode::Multi ? static_cast<int>(contrasts.size()) : 1;
}

nlohmann::json to_json(const AugmentRanges& a) {
  return {{"translate_fraction", a.translate_fraction}, {"rotate_degrees", a.rotate_degrees},
          {"scale_min", a.scale_min},                   {"scale_max", a.scale_max},
          {"gamma_min", a.gamma_min},                   {"gamma_max", a.gamma_max},
          {"elastic_alpha_px", a.elastic_alpha_px},     {"elastic_sigma_px", a.elastic_sigma_px}};
}

nlohmann::json to_json(const TrainConfig& t) {
  std::vector<std::string> names;
  for (const Contrast c : t.contrasts) names.emplace_back(to_string(c));
  return {{"learning_rate", t.learning_rate},
          {"batch_size", t.batch_size},
          {"epochs", t.epochs},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"epsilon", t.epsilon},
          {"augmentation", to_json(t.augmentation)},
          {"channel_mode", to_string(t.channel_mode)},
          {"contrasts", names},
          {"samples_per_epoch", t.samples_per_epoch},
          {"seed", t.seed}};
}

nlohmann::json to_json(const TrainHistory& h) {
  return {{"initial_probe_loss", h.initial_probe_loss},
          {"probe_loss", h.probe_loss},
          {"train_loss", h.train_loss},
          {"val_dice", h.val_dice},
          {"best_epoch", h.best_epoch}};
}

Sample2D augment(const Sample2D& s, std::mt19937_64& rng, const AugmentRanges& r) {
  s.validate();
  const int n = s.size;
  const double tx = uniform(rng, -r.translate_fraction, r.translate_fraction) * n;
  const double ty = uniform(rng, -r.translate_fraction, r.translate_fraction) * n;
  const double angle = uniform(rng, -r.rotate_degrees, r.rotate_degrees) * std::numbers::pi / 180.0;
  const double scale = uniform(rng, r.scale_min, r.scale_max);
  const double gamma = std::exp(uniform(rng, std::log(r.gamma_min), std::log(r.gamma_max)));

  const std::size_t np = static_cast<std::size_t>(n) * n;
  std::vector<double> ex, ey;
  if (r.elastic_alpha_px > 0.0) {
    std::normal_distribution<double> nd(0.0, 1.0);
    ex.resize(np);
    ey.resize(np);
    for (auto& v : ex) v = nd(rng);
    for (auto& v : ey) v = nd(rng);
    blur(ex, n, r.elastic_sigma_px);
    blur(ey, n, r.elastic_sigma_px);
    for (auto& v : ex) v *= r.elastic_alpha_px;
    for (auto& v : ey) v *= r.elastic_alpha_px;
  }

  // Output pixel p reads source q = R^-1 (p - c - t) / scale + c + elastic(p).
  const double c = 0.5 * (n - 1);
  const double cs = std::cos(angle), sn = std::sin(angle);
  Sample2D out = s;
  std::fill(out.image.begin(), out.image.end(), 0.0f);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const std::size_t o = static_cast<std::size_t>(y) * n + x;
      const double px = x - c - tx, py = y - c - ty;
      double qx = (cs * px + sn * py) / scale + c;
      double qy = (-sn * px + cs * py) / scale + c;
      if (!ex.empty()) {
        qx += ex[o];
        qy += ey[o];
      }
      const int nx = static_cast<int>(std::lround(qx)), ny = static_cast<int>(std::lround(qy));
      out.label[o] = (nx >= 0 && nx < n && ny >= 0 && ny < n) ? s.label[static_cast<std::size_t>(ny) * n + nx] : 0;
      if (qx <= -1.0 || qy <= -1.0 || qx >= n || qy >= n) continue;
      const int x0 = static_cast<int>(std::floor(qx)), y0 = static_cast<int>(std::floor(qy));
      const double fx = qx - x0, fy = qy - y0;
      for (int ch = 0; ch < s.channels; ++ch) {
        const float* img = s.image.data() + ch * np;
        auto at = [&](int xx, int yy) -> double {
          return (xx < 0 || yy < 0 || xx >= n || yy >= n) ? 0.0 : img[static_cast<std::size_t>(yy) * n + xx];
        };
        double v = (1 - fy) * ((1 - fx) * at(x0, y0) + (fx > 0 ? fx * at(x0 + 1, y0) : 0.0));
        if (fy > 0) v += fy * ((1 - fx) * at(x0, y0 + 1) + (fx > 0 ? fx * at(x0 + 1, y0 + 1) : 0.0));
        out.image[ch * np + o] = static_cast<float>(v);
      }
    }
  if (gamma != 1.0)
    for (float& v : out.image)
      if (v > 0.0f) v = static_cast<float>(std::pow(static_cast<double>(v), gamma));
  return out;
}

std::vector<SliceRef> enumerate_slices(const volgrid::Dims& dims, ChannelMode mode, std::size_t n_contrasts) {
  std::vector<SliceRef> out;
  for (int axis = 0; axis < 3; ++axis)
    for (int i = 0; i < dims[axis]; ++i) {
      if (mode == ChannelMode::Multi) {
        out.push_back({axis, i, -1});
      } else {
        for (std::size_t k = 0; k < n_contrasts; ++k) out.push_back({axis, i, static_cast<int>(k)});
      }
    }
  return out;
}

std::vector<float> channel_scales(const CaseData& data, std::span<const Contrast> contrasts) {
  std::vector<float> out;
  for (const Contrast c : contrasts) {
    const Volume& v = data.map(c);
    std::vector<float> nz;
    for (const float x : v.data())
      if (x != 0.0f && std::isfinite(x)) nz.push_back(x);
    const double p = nz.empty() ? 0.0 : percentile(std::move(nz), 99.0);
    out.push_back(p > 0.0 ? static_cast<float>(p) : 1.0f);
  }
  return out;
}

Placement placement(int src_w, int src_h, int size) {
  if (src_w < 1 || src_h < 1 || size < 1) throw Error(ErrorKind::Shape, "placement needs positive sizes");
  Placement p{src_w, src_h, 0, 0, 0, 0};
  const double f = static_cast<double>(size) / std::max(src_w, src_h);
  p.dst_w = std::clamp(static_cast<int>(std::lround(src_w * f)), 1, size);
  p.dst_h = std::clamp(static_cast<int>(std::lround(src_h * f)), 1, size);
  p.off_x = (size - p.dst_w) / 2;
  p.off_y = (size - p.dst_h) / 2;
  return p;
}

Sample2D make_sample(const CaseData& data, std::span<const Contrast> contrasts, std::span<const float> scales,
                     const SliceRef& ref, int input_size) {
  const std::vector<Contrast> chans = sample_contrasts(contrasts, ref);
  Sample2D s;
  s.size = input_size;
  s.channels = static_cast<int>(chans.size());
  s.case_id = data.record.case_id;
  s.axis = ref.axis;
  s.slice = ref.index;
  s.contrast = ref.contrast < 0 ? -1 : static_cast<int>(chans.front());
  const std::size_t np = static_cast<std::size_t>(input_size) * input_size;
  s.image.assign(np * chans.size(), 0.0f);
  s.label.assign(np, 0);

  const auto shape = volgrid::slice_shape(data.geometry().dims, ref.axis);
  const Placement p = placement(shape[0], shape[1], input_size);
  for (std::size_t k = 0; k < chans.size(); ++k) {
    volgrid::Image2D img = volgrid::extract_slice(data.map(chans[k]), ref.axis, ref.index);
    const std::size_t scale_index = ref.contrast < 0 ? k : static_cast<std::size_t>(ref.contrast);
    const float scale = scales[scale_index];
    for (float& v : img.data) v = std::isfinite(v) ? std::clamp(v / scale, 0.0f, kInputClip) : 0.0f;
    resize_into(img, p, input_size, s.image.data() + k * np);
  }
  if (data.truth) {
    const volgrid::Image2D lab = volgrid::extract_slice(*data.truth, ref.axis, ref.index);
    std::vector<float> tmp(np, 0.0f);
    resize_into(lab, p, input_size, tmp.data());
    for (std::size_t i = 0; i < np; ++i) s.label[i] = tmp[i] >= 0.5f ? 1 : 0;
  }
  return s;
}

std::vector<Sample2D> make_samples(const CaseData& data, ChannelMode mode, std::span<const Contrast> contrasts,
                                   int input_size) {
  for (const Contrast c : contrasts)
    if (!data.has(c))
      throw Error(ErrorKind::Data, "case " + data.record.case_id + " lacks the " + to_string(c) + " map");
  const std::vector<float> scales = channel_scales(data, contrasts);
  std::vector<Sample2D> out;
  for (const SliceRef& r : enumerate_slices(data.geometry().dims, mode, contrasts.size()))
    out.push_back(make_sample(data, contrasts, scales, r, input_size));
  return out;
}

SlicePredictor network_predictor(const UNetWeights& w) {
  return [&w](const Sample2D& s) {
    std::vector<float> probs = unet_forward<float>(w, s.image);
    const std::size_t np = static_cast<std::size_t>(s.size) * s.size;
    return std::vector<float>(probs.begin() + static_cast<std::ptrdiff_t>(np), probs.end());
  };
}

TriplaneResult predict_triplane(const CaseData& data, const SlicePredictor& predictor, const InferenceOptions& options,
                                int input_size) {
  for (const Contrast c : options.contrasts)
    if (!data.has(c))
      throw Error(ErrorKind::Data, "case " + data.record.case_id + " lacks the " + to_string(c) + " map");
  std::array<int, 3> seen{0, 0, 0};
  for (const int a : options.axis_order) {
    if (a < 0 || a > 2 || seen[a]++) throw Error(ErrorKind::Config, "axis_order must be a permutation of 0, 1, 2");
  }
  const volgrid::Geometry& g = data.geometry();
  const std::vector<float> scales = channel_scales(data, options.contrasts);
  const std::size_t nc = options.contrasts.size();

  TriplaneResult out;
  for (const int axis : options.axis_order) {
    Volume acc(g, 0.0f);
    const auto shape = volgrid::slice_shape(g.dims, axis);
    const Placement p = placement(shape[0], shape[1], input_size);
    parallel_for(static_cast<std::size_t>(g.dims[axis]), options.threads, [&](std::size_t i) {
      const int index = static_cast<int>(i);
      volgrid::Image2D sum(shape[0], shape[1]);
      if (options.channel_mode == ChannelMode::Multi) {
        const Sample2D s = make_sample(data, options.contrasts, scales, {axis, index, -1}, input_size);
        sum = resize_back(predictor(s), p, input_size);
      } else {
        std::vector<double> total(sum.data.size(), 0.0);
        for (std::size_t k = 0; k < nc; ++k) {
          const Sample2D s = make_sample(data, options.contrasts, scales, {axis, index, static_cast<int>(k)}, input_size);
          const volgrid::Image2D one = resize_back(predictor(s), p, input_size);
          for (std::size_t j = 0; j < total.size(); ++j) total[j] += one.data[j];
        }
        for (std::size_t j = 0; j < total.size(); ++j) sum.data[j] = static_cast<float>(total[j] / static_cast<double>(nc));
      }
      sum.axis = axis;
      sum.index = index;
      volgrid::insert_slice_into(acc, axis, index, sum);
    });
    out.per_axis[axis] = std::move(acc);
  }
  out.fused = Volume(g, 0.0f);
  for (std::size_t i = 0; i < out.fused.size(); ++i)
    out.fused[i] = static_cast<float>(
        (static_cast<double>(out.per_axis[0][i]) + out.per_axis[1][i] + out.per_axis[2][i]) / 3.0);
  return out;
}

TriplaneResult predict_triplane(const CaseData& data, const UNetWeights& w, const InferenceOptions& options) {
  const int expected = options.channel_mode == ChannelMode::Multi ? static_cast<int>(options.contrasts.size()) : 1;
  if (w.config.in_channels != expected)
    throw Error(ErrorKind::Config, "weights expect " + std::to_string(w.config.in_channels) + " input channel(s) but " +
                                       to_string(options.channel_mode) + " mode over " +
                                       std::to_string(options.contrasts.size()) + " contrast(s) supplies " +
                                       std::to_string(expected));
  return predict_triplane(data, network_predictor(w), options, w.config.input_size);
}

Mask probabilities_to_mask(const Volume& fused, double threshold, bool largest_component) {
  Mask m = Mask::from_threshold(fused, static_cast<float>(threshold));
  if (m.count() == 0) throw Error(ErrorKind::ExtractionFailed, "no voxel exceeds the probability threshold");
  return largest_component ? volgrid::largest_component(m, 6) : m;
}

Mask extract_brain_unet(const CaseData& data, const UNetWeights& w, const InferenceOptions& options) {
  const TriplaneResult r = predict_triplane(data, w, options);
  return probabilities_to_mask(r.fused, options.threshold, options.largest_component);
}

TrainResult train(std::span<const CaseData> train_cases, std::span<const CaseData> val_cases, const UNetConfig& unet,
                  const TrainConfig& config) {
  config.validate();
  unet.validate();
  if (train_cases.empty()) throw Error(ErrorKind::Data, "training set is empty");
  if (val_cases.empty()) throw Error(ErrorKind::Data, "validation set is empty");
  if (unet.in_channels != config.in_channels())
    throw Error(ErrorKind::Config, "network has " + std::to_string(unet.in_channels) + " input channel(s), " +
                                       to_string(config.channel_mode) + " mode needs " +
                                       std::to_string(config.in_channels()));
  for (const auto& tc : train_cases)
    for (const auto& vc : val_cases)
      if (tc.record.case_id == vc.record.case_id)
        throw Error(ErrorKind::Data, "case " + tc.record.case_id + " is in both training and validation sets");

  struct PoolEntry {
    std::size_t case_index;
    SliceRef ref;
  };
  std::vector<PoolEntry> pool;
  std::vector<std::vector<float>> scales;
  for (std::size_t c = 0; c < train_cases.size(); ++c) {
    const CaseData& d = train_cases[c];
    if (!d.truth) throw Error(ErrorKind::Data, "training case " + d.record.case_id + " has no truth mask");
    for (const Contrast k : config.contrasts)
      if (!d.has(k)) throw Error(ErrorKind::Data, "case " + d.record.case_id + " lacks the " + to_string(k) + " map");
    scales.push_back(channel_scales(d, config.contrasts));
    for (const SliceRef& r : enumerate_slices(d.geometry().dims, config.channel_mode, config.contrasts.size()))
      pool.push_back({c, r});
  }
  auto materialize = [&](const PoolEntry& e) {
    return make_sample(train_cases[e.case_index], config.contrasts, scales[e.case_index], e.ref, unet.input_size);
  };

  std::vector<Sample2D> probe;
  {
    std::vector<std::size_t> idx(pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), std::mt19937_64(derive_seed(config.seed, kProbeStream)));
    idx.resize(std::min(idx.size(), kProbeSamples));
    for (const std::size_t i : idx) probe.push_back(materialize(pool[i]));
  }

  TrainResult result;
  UNetWeights w = unet_init(unet, unet.seed);
  result.history.initial_probe_loss = mean_probe_loss(w, probe);
  result.weights = w;
  double best_dice = -1.0;

  const AdamParams adam{config.learning_rate, config.beta1, config.beta2, config.epsilon};
  AdamState<float> state;
  const int threads = std::max(1, config.threads);
  std::vector<UNetWeights> sample_grads(static_cast<std::size_t>(threads), UNetWeights(unet));
  std::vector<float> sample_loss(static_cast<std::size_t>(threads));
  std::vector<float> grad(w.values.size());

  InferenceOptions inf;
  inf.channel_mode = config.channel_mode;
  inf.contrasts = config.contrasts;
  inf.threads = threads;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), std::mt19937_64(derive_seed(config.seed, 2 * epoch + 1)));
    const std::size_t draw = static_cast<std::size_t>(config.samples_per_epoch) *
                             (config.channel_mode == ChannelMode::Single ? config.contrasts.size() : 1);
    if (draw > 0 && draw < order.size()) order.resize(draw);
    const std::uint64_t aug_seed = derive_seed(config.seed, 2 * epoch + 2);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      const std::size_t bsz = stop - start;
      std::vector<Sample2D> batch(bsz);
      parallel_for(bsz, threads, [&](std::size_t k) {
        std::mt19937_64 rng(derive_seed(aug_seed, start + k));
        batch[k] = augment(materialize(pool[order[start + k]]), rng, config.augmentation);
      });
      // Per-sample gradients summed in batch order, so the result does not
      // depend on how samples were spread over threads.
      std::fill(grad.begin(), grad.end(), 0.0f);
      double batch_loss = 0.0;
      for (std::size_t wave = 0; wave < bsz; wave += static_cast<std::size_t>(threads)) {
        const std::size_t n = std::min(bsz - wave, static_cast<std::size_t>(threads));
        parallel_for(n, threads, [&](std::size_t k) {
          sample_loss[k] = loss_and_gradient<float>(w, std::span<const Sample2D>(&batch[wave + k], 1), sample_grads[k]);
        });
        for (std::size_t k = 0; k < n; ++k) {
          batch_loss += sample_loss[k];
          const auto& gv = sample_grads[k].values;
          for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += gv[i];
        }
      }
      const float inv = 1.0f / static_cast<float>(bsz);
      for (float& v : grad) v *= inv;
      adam_step<float>(w.values, grad, state, adam);
      loss_sum += batch_loss / static_cast<double>(bsz);
      ++batches;
    }
    result.history.train_loss.push_back(loss_sum / static_cast<double>(batches));
    result.history.probe_loss.push_back(mean_probe_loss(w, probe));

    double dice_sum = 0.0;
    for (const CaseData& v : val_cases) {
      if (!v.truth) throw Error(ErrorKind::Data, "validation case " + v.record.case_id + " has no truth mask");
      double d = 0.0;
      try {
        d = evalharness::dice(extract_brain_unet(v, w, inf), *v.truth);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::ExtractionFailed) throw;
      }
      dice_sum += d;
    }
    const double val = dice_sum / static_cast<double>(val_cases.size());
    result.history.val_dice.push_back(val);
    if (val > best_dice) {
      best_dice = val;
      result.history.best_epoch = epoch;
      result.weights = w;
    }
  }
  return result;
}

}  // namespace neuroextract::neunet

#include "neuroextract/neunet/unet.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <type_traits>

#include <Eigen/Core>
#include <zlib.h>

namespace neuroextract::neunet {
namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;
template <class T>
using CMapV = Eigen::Map<const Vec<T>>;

constexpr double kLogEps = 1e-12;

// Parameter table positions.
int enc_index(int level) { return 4 * level; }
int dec_index(const UNetConfig& c, int level) { return 4 * c.levels + 6 * (c.levels - 2 - level); }
int head_index(const UNetConfig& c) { return 4 * c.levels + 6 * (c.levels - 1); }

template <class T>
void im2col3(const T* in, int ch, int h, int w, T* cols) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < ch; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const T* src = in + c * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          T* dst = row + static_cast<std::size_t>(y) * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T(0));
            continue;
          }
          const T* s = src + static_cast<std::size_t>(sy) * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kx - 1;
            dst[x] = (sx < 0 || sx >= w) ? T(0) : s[sx];
          }
        }
      }
}

template <class T>
void col2im3_add(const T* cols, int ch, int h, int w, T* din) {
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < ch; ++c)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        T* dst = din + c * hw;
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h) continue;
          const T* r = row + static_cast<std::size_t>(y) * w;
          T* d = dst + static_cast<std::size_t>(sy) * w;
          for (int x = 0; x < w; ++x) {
            const int sx = x + kx - 1;
            if (sx >= 0 && sx < w) d[sx] += r[x];
          }
        }
      }
}

template <class T>
struct Conv {
  std::vector<T> cols;
  std::vector<T> out;  // post-activation
};

// 3x3 same conv + ReLU over a [ci][h][w] input.
template <class T>
void conv3_forward(const T* in, int ci, int h, int w, std::span<const T> weight, std::span<const T> bias, int co,
                   Conv<T>& layer) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  layer.cols.resize(static_cast<std::size_t>(ci) * 9 * hw);
  im2col3(in, ci, h, w, layer.cols.data());
  layer.out.resize(static_cast<std::size_t>(co) * hw);
  CMapM<T> W(weight.data(), co, ci * 9);
  CMapM<T> C(layer.cols.data(), ci * 9, hw);
  MapM<T> O(layer.out.data(), co, hw);
  O.noalias() = W * C;
  O.colwise() += CMapV<T>(bias.data(), co);
  O = O.cwiseMax(T(0));
}

// Plain loop: Eigen's vectorized reductions peel by buffer alignment, which
// would make the low bits depend on where the heap put the row.
template <class T>
void add_row_sums(const T* m, Eigen::Index rows, Eigen::Index cols, T* out) {
  for (Eigen::Index r = 0; r < rows; ++r) {
    T s = T(0);
    for (Eigen::Index c = 0; c < cols; ++c) s += m[r * cols + c];
    out[r] += s;
  }
}

// `dout` is the gradient w.r.t. the post-ReLU output; it is masked in place.
template <class T>
void conv3_backward(const Conv<T>& layer, int ci, int h, int w, std::span<const T> weight, int co, std::vector<T>& dout,
                    std::span<T> dweight, std::span<T> dbias, T* din) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  for (std::size_t i = 0; i < dout.size(); ++i)
    if (!(layer.out[i] > T(0))) dout[i] = T(0);
  CMapM<T> dO(dout.data(), co, hw);
  CMapM<T> C(layer.cols.data(), ci * 9, hw);
  MapM<T> dW(dweight.data(), co, ci * 9);
  dW.noalias() += dO * C.transpose();
  add_row_sums(dout.data(), co, hw, dbias.data());
  if (din == nullptr) return;
  std::vector<T> dcols(static_cast<std::size_t>(ci) * 9 * hw);
  CMapM<T> W(weight.data(), co, ci * 9);
  MapM<T>(dcols.data(), ci * 9, hw).noalias() = W.transpose() * dO;
  col2im3_add(dcols.data(), ci, h, w, din);
}

template <class T>
void maxpool_forward(const std::vector<T>& in, int ch, int h, int w, std::vector<T>& out, std::vector<int>& argmax) {
  const int oh = h / 2, ow = w / 2;
  out.resize(static_cast<std::size_t>(ch) * oh * ow);
  argmax.resize(out.size());
  for (int c = 0; c < ch; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::size_t base = static_cast<std::size_t>(c) * h * w;
        int best = static_cast<int>(base + static_cast<std::size_t>(2 * y) * w + 2 * x);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = static_cast<int>(base + static_cast<std::size_t>(2 * y + dy) * w + 2 * x + dx);
            if (in[idx] > in[best]) best = idx;
          }
        const std::size_t o = (static_cast<std::size_t>(c) * oh + y) * ow + x;
        out[o] = in[best];
        argmax[o] = best;
      }
}

// Transposed 2x2 stride-2 conv: weight [ci][co][2][2].
template <class T>
void upconv_forward(const std::vector<T>& in, int ci, int h, int w, std::span<const T> weight, std::span<const T> bias,
                    int co, std::vector<T>& out) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  CMapM<T> Wt(weight.data(), ci, co * 4);
  CMapM<T> X(in.data(), ci, hw);
  const Mat<T> Y = Wt.transpose() * X;  // [co*4][hw]
  const int oh = 2 * h, ow = 2 * w;
  out.assign(static_cast<std::size_t>(co) * oh * ow, T(0));
  for (int c = 0; c < co; ++c)
    for (int k = 0; k < 4; ++k) {
      const int dy = k / 2, dx = k % 2;
      const T* yrow = Y.data() + static_cast<std::size_t>(c * 4 + k) * hw;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out[(static_cast<std::size_t>(c) * oh + 2 * y + dy) * ow + 2 * x + dx] =
              yrow[static_cast<std::size_t>(y) * w + x] + bias[c];
    }
}

template <class T>
void upconv_backward(const std::vector<T>& in, int ci, int h, int w, std::span<const T> weight, int co,
                     const T* dout, std::span<T> dweight, std::span<T> dbias, std::vector<T>& din) {
  const Eigen::Index hw = static_cast<Eigen::Index>(h) * w;
  const int oh = 2 * h, ow = 2 * w;
  Mat<T> dY(co * 4, hw);
  for (int c = 0; c < co; ++c) {
    T bsum = T(0);
    for (int k = 0; k < 4; ++k) {
      const int dy = k / 2, dx = k % 2;
      T* yrow = dY.data() + static_cast<std::size_t>(c * 4 + k) * hw;
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const T g = dout[(static_cast<std::size_t>(c) * oh + 2 * y + dy) * ow + 2 * x + dx];
          yrow[static_cast<std::size_t>(y) * w + x] = g;
          bsum += g;
        }
    }
    dbias[c] += bsum;
  }
  CMapM<T> X(in.data(), ci, hw);
  MapM<T>(dweight.data(), ci, co * 4).noalias() += X * dY.transpose();
  din.assign(static_cast<std::size_t>(ci) * hw, T(0));
  CMapM<T> Wt(weight.data(), ci, co * 4);
  MapM<T>(din.data(), ci, hw).noalias() = Wt * dY;
}

template <class T>
struct Trace {
  std::vector<Conv<T>> enc1, enc2, dec1, dec2;
  std::vector<std::vector<T>> pooled;  // input of level l+1
  std::vector<std::vector<int>> argmax;
  std::vector<std::vector<T>> concat;  // decoder conv1 input per level
  std::vector<T> probs;                // [2][hw]
};

template <class T>
void forward_trace(const BasicWeights<T>& w, std::span<const T> image, Trace<T>& t) {
  const UNetConfig& c = w.config;
  const int L = c.levels;
  t.enc1.resize(L);
  t.enc2.resize(L);
  t.dec1.resize(L);
  t.dec2.resize(L);
  t.pooled.resize(L);
  t.argmax.resize(L);
  t.concat.resize(L);

  int size = c.input_size;
  const T* in = image.data();
  int cin = c.in_channels;
  for (int l = 0; l < L; ++l) {
    const int ch = c.channels(l);
    const int e = enc_index(l);
    conv3_forward<T>(in, cin, size, size, w.tensor(e), w.tensor(e + 1), ch, t.enc1[l]);
    conv3_forward<T>(t.enc1[l].out.data(), ch, size, size, w.tensor(e + 2), w.tensor(e + 3), ch, t.enc2[l]);
    if (l + 1 < L) {
      maxpool_forward(t.enc2[l].out, ch, size, size, t.pooled[l + 1], t.argmax[l]);
      in = t.pooled[l + 1].data();
      cin = ch;
      size /= 2;
    }
  }
  const std::vector<T>* below = &t.enc2[L - 1].out;
  for (int l = L - 2; l >= 0; --l) {
    const int ch = c.channels(l), chb = c.channels(l + 1);
    const int d = dec_index(c, l);
    std::vector<T> up;
    upconv_forward<T>(*below, chb, size, size, w.tensor(d), w.tensor(d + 1), ch, up);
    size *= 2;
    std::vector<T>& cat = t.concat[l];
    cat.resize(static_cast<std::size_t>(2 * ch) * size * size);
    std::copy(t.enc2[l].out.begin(), t.enc2[l].out.end(), cat.begin());
    std::copy(up.begin(), up.end(), cat.begin() + static_cast<std::ptrdiff_t>(t.enc2[l].out.size()));
    conv3_forward<T>(cat.data(), 2 * ch, size, size, w.tensor(d + 2), w.tensor(d + 3), ch, t.dec1[l]);
    conv3_forward<T>(t.dec1[l].out.data(), ch, size, size, w.tensor(d + 4), w.tensor(d + 5), ch, t.dec2[l]);
    below = &t.dec2[l].out;
  }
  const int h = head_index(c);
  const Eigen::Index hw = static_cast<Eigen::Index>(size) * size;
  const int c0 = c.channels(0);
  Mat<T> logits = CMapM<T>(w.tensor(h).data(), c.classes, c0) * CMapM<T>(below->data(), c0, hw);
  logits.colwise() += CMapV<T>(w.tensor(h + 1).data(), c.classes);
  t.probs.resize(static_cast<std::size_t>(2) * hw);
  for (Eigen::Index i = 0; i < hw; ++i) {
    // two-class softmax in logistic form
    const T p1 = T(1) / (T(1) + std::exp(logits(0, i) - logits(1, i)));
    t.probs[i] = T(1) - p1;
    t.probs[hw + i] = p1;
  }
}

template <class T>
void backward_trace(const BasicWeights<T>& w, const Trace<T>& t, std::span<const std::uint8_t> label, T scale,
                    BasicWeights<T>& g) {
  const UNetConfig& c = w.config;
  const int L = c.levels;
  const int full = c.input_size;
  const std::size_t hw = static_cast<std::size_t>(full) * full;
  const int c0 = c.channels(0);

  std::vector<T> dlogits(2 * hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const int truth = label[i];
    const T pt = t.probs[truth * hw + i];
    const T f = scale * pt / (pt + T(kLogEps));
    dlogits[i] = f * (t.probs[i] - (truth == 0 ? T(1) : T(0)));
    dlogits[hw + i] = f * (t.probs[hw + i] - (truth == 1 ? T(1) : T(0)));
  }
  const int h = head_index(c);
  const std::vector<T>& top = L > 1 ? t.dec2[0].out : t.enc2[0].out;
  CMapM<T> dZ(dlogits.data(), 2, static_cast<Eigen::Index>(hw));
  MapM<T>(g.tensor(h).data(), 2, c0).noalias() += dZ * CMapM<T>(top.data(), c0, static_cast<Eigen::Index>(hw)).transpose();
  add_row_sums(dlogits.data(), 2, static_cast<Eigen::Index>(hw), g.tensor(h + 1).data());
  std::vector<T> dcur(static_cast<std::size_t>(c0) * hw);
  MapM<T>(dcur.data(), c0, static_cast<Eigen::Index>(hw)).noalias() =
      CMapM<T>(w.tensor(h).data(), 2, c0).transpose() * dZ;

  // Gradient arriving at each encoder output through its skip connection.
  std::vector<std::vector<T>> dskip(L);
  int size = full;
  for (int l = 0; l + 1 < L; ++l) {
    const int ch = c.channels(l), chb = c.channels(l + 1);
    const int d = dec_index(c, l);
    const std::size_t n = static_cast<std::size_t>(size) * size;
    std::vector<T> dcat(static_cast<std::size_t>(2 * ch) * n, T(0));
    std::vector<T> dmid(static_cast<std::size_t>(ch) * n, T(0));
    conv3_backward<T>(t.dec2[l], ch, size, size, w.tensor(d + 4), ch, dcur, g.tensor(d + 4), g.tensor(d + 5), dmid.data());
    conv3_backward<T>(t.dec1[l], 2 * ch, size, size, w.tensor(d + 2), ch, dmid, g.tensor(d + 2), g.tensor(d + 3),
                      dcat.data());
    dskip[l].assign(dcat.begin(), dcat.begin() + static_cast<std::ptrdiff_t>(ch * n));
    const std::vector<T>& below = (l + 2 < L) ? t.dec2[l + 1].out : t.enc2[l + 1].out;
    std::vector<T> dbelow;
    upconv_backward<T>(below, chb, size / 2, size / 2, w.tensor(d), ch, dcat.data() + ch * n, g.tensor(d),
                       g.tensor(d + 1), dbelow);
    dcur = std::move(dbelow);
    size /= 2;
  }
  // dcur now holds the gradient w.r.t. the output of the deepest decoder
  // input (level L-1 encoder output). Walk the encoder back up.
  for (int l = L - 1; l >= 0; --l) {
    const int ch = c.channels(l);
    const int cin = l == 0 ? c.in_channels : c.channels(l - 1);
    const int e = enc_index(l);
    const std::size_t n = static_cast<std::size_t>(size) * size;
    if (!dskip[l].empty())
      for (std::size_t i = 0; i < dcur.size(); ++i) dcur[i] += dskip[l][i];
    std::vector<T> dmid(static_cast<std::size_t>(ch) * n, T(0));
    conv3_backward<T>(t.enc2[l], ch, size, size, w.tensor(e + 2), ch, dcur, g.tensor(e + 2), g.tensor(e + 3), dmid.data());
    if (l == 0) {
      conv3_backward<T>(t.enc1[l], cin, size, size, w.tensor(e), ch, dmid, g.tensor(e), g.tensor(e + 1), nullptr);
      break;
    }
    std::vector<T> dpool(static_cast<std::size_t>(cin) * n, T(0));
    conv3_backward<T>(t.enc1[l], cin, size, size, w.tensor(e), ch, dmid, g.tensor(e), g.tensor(e + 1), dpool.data());
    // Unpool into the level above.
    const int up = size * 2;
    std::vector<T> dprev(static_cast<std::size_t>(cin) * up * up, T(0));
    const std::vector<int>& am = t.argmax[l - 1];
    for (std::size_t i = 0; i < dpool.size(); ++i) dprev[am[i]] += dpool[i];
    dcur = std::move(dprev);
    size = up;
  }
}

void check_image(const UNetConfig& c, std::size_t n) {
  const std::size_t want = static_cast<std::size_t>(c.in_channels) * c.input_size * c.input_size;
  if (n != want)
    throw Error(ErrorKind::Shape, "network input has " + std::to_string(n) + " values, expected " + std::to_string(want));
}

}  // namespace

void UNetConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::Config, "unet config: " + m); };
  if (levels < 1 || levels > 8) fail("levels must lie in [1, 8]");
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (in_channels != 1 && in_channels != 4) fail("in_channels must be 1 or 4");
  if (classes != 2) fail("classes must be 2");
  if (input_size < 1) fail("input_size must be >= 1");
  const int div = 1 << (levels - 1);
  if (input_size % div != 0)
    fail("input_size " + std::to_string(input_size) + " is not divisible by 2^(levels-1) = " + std::to_string(div));
}

int UNetConfig::channels(int level) const { return base_channels * std::min(1 << level, 16); }

nlohmann::json to_json(const UNetConfig& c) {
  return {{"levels", c.levels},           {"base_channels", c.base_channels}, {"input_size", c.input_size},
          {"in_channels", c.in_channels}, {"classes", c.classes},             {"seed", c.seed}};
}

UNetConfig unet_config_from_json(const nlohmann::json& j) {
  UNetConfig c;
  c.levels = j.at("levels").get<int>();
  c.base_channels = j.at("base_channels").get<int>();
  c.input_size = j.at("input_size").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.classes = j.at("classes").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

std::size_t TensorSpec::size() const {
  std::size_t n = 1;
  for (const int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

std::vector<TensorSpec> parameter_layout(const UNetConfig& c) {
  c.validate();
  std::vector<TensorSpec> out;
  for (int l = 0; l < c.levels; ++l) {
    const std::string p = "enc" + std::to_string(l);
    const int ch = c.channels(l), cin = l == 0 ? c.in_channels : c.channels(l - 1);
    out.push_back({p + ".conv1.weight", {ch, cin, 3, 3}});
    out.push_back({p + ".conv1.bias", {ch}});
    out.push_back({p + ".conv2.weight", {ch, ch, 3, 3}});
    out.push_back({p + ".conv2.bias", {ch}});
  }
  for (int l = c.levels - 2; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    const int ch = c.channels(l), chb = c.channels(l + 1);
    out.push_back({p + ".up.weight", {chb, ch, 2, 2}});
    out.push_back({p + ".up.bias", {ch}});
    out.push_back({p + ".conv1.weight", {ch, 2 * ch, 3, 3}});
    out.push_back({p + ".conv1.bias", {ch}});
    out.push_back({p + ".conv2.weight", {ch, ch, 3, 3}});
    out.push_back({p + ".conv2.bias", {ch}});
  }
  out.push_back({"head.weight", {c.classes, c.channels(0), 1, 1}});
  out.push_back({"head.bias", {c.classes}});
  return out;
}

std::size_t parameter_count(const UNetConfig& c) {
  std::size_t n = 0;
  for (const auto& t : parameter_layout(c)) n += t.size();
  return n;
}

template <class T>
BasicWeights<T>::BasicWeights(const UNetConfig& c) : config(c), layout(parameter_layout(c)) {
  values.assign(parameter_count(c), T(0));
}

template <class T>
std::size_t BasicWeights<T>::offset(std::size_t i) const {
  std::size_t o = 0;
  for (std::size_t k = 0; k < i; ++k) o += layout[k].size();
  return o;
}

template <class T>
std::span<T> BasicWeights<T>::tensor(std::size_t i) {
  return std::span<T>(values).subspan(offset(i), layout.at(i).size());
}

template <class T>
std::span<const T> BasicWeights<T>::tensor(std::size_t i) const {
  return std::span<const T>(values).subspan(offset(i), layout.at(i).size());
}

template <class T>
std::size_t BasicWeights<T>::index_of(const std::string& name) const {
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout[i].name == name) return i;
  throw Error(ErrorKind::Bounds, "no tensor named " + name);
}

template <class T>
std::span<T> BasicWeights<T>::tensor(const std::string& name) {
  return tensor(index_of(name));
}

template <class T>
std::span<const T> BasicWeights<T>::tensor(const std::string& name) const {
  return tensor(index_of(name));
}

template struct BasicWeights<float>;
template struct BasicWeights<double>;
template struct BasicWeights<long double>;

UNetWeights unet_init(const UNetConfig& config, std::uint64_t seed) {
  UNetWeights w(config);
  w.config.seed = seed;
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < w.layout.size(); ++i) {
    const TensorSpec& spec = w.layout[i];
    if (spec.shape.size() == 1) continue;  // bias
    // fan_in: transposed kernels read shape[0] inputs at one tap each.
    const bool transposed = spec.name.find(".up.") != std::string::npos;
    const double fan_in = transposed ? static_cast<double>(spec.shape[0])
                                     : static_cast<double>(spec.shape[1]) * spec.shape[2] * spec.shape[3];
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / fan_in));
    for (float& v : w.tensor(i)) v = static_cast<float>(n(rng));
  }
  return w;
}

void Sample2D::validate() const {
  const std::size_t n = static_cast<std::size_t>(size) * size;
  if (size < 1 || channels < 1 || image.size() != n * channels || label.size() != n)
    throw Error(ErrorKind::Shape, "sample buffers do not match size/channels");
  for (const auto l : label)
    if (l > 1) throw Error(ErrorKind::Domain, "sample label must be 0 or 1");
  for (const float v : image)
    if (!std::isfinite(v)) throw Error(ErrorKind::Domain, "sample image has non-finite values");
}

template <class T>
std::vector<T> unet_forward(const BasicWeights<T>& w, std::span<const T> image) {
  check_image(w.config, image.size());
  Trace<T> t;
  forward_trace(w, image, t);
  return std::move(t.probs);
}

template <class T>
T cross_entropy(std::span<const T> probs, std::span<const std::uint8_t> label) {
  const std::size_t n = label.size();
  if (probs.size() != 2 * n) throw Error(ErrorKind::Shape, "cross_entropy: probs must be [2][n] for n labels");
  if (n == 0) throw Error(ErrorKind::Shape, "cross_entropy on empty label");
  using Acc = std::conditional_t<(sizeof(T) > sizeof(double)), T, double>;
  Acc sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (label[i] > 1) throw Error(ErrorKind::Domain, "label must be 0 or 1");
    sum += -std::log(static_cast<Acc>(probs[label[i] * n + i]) + static_cast<Acc>(kLogEps));
  }
  return static_cast<T>(sum / static_cast<Acc>(n));
}

template <class T>
T loss_and_gradient(const BasicWeights<T>& w, std::span<const Sample2D> batch, BasicWeights<T>& grad) {
  if (batch.empty()) throw Error(ErrorKind::Shape, "empty batch");
  if (grad.layout.size() != w.layout.size() || grad.values.size() != w.values.size()) grad = BasicWeights<T>(w.config);
  std::fill(grad.values.begin(), grad.values.end(), T(0));
  const std::size_t n = static_cast<std::size_t>(w.config.input_size) * w.config.input_size;
  const T scale = T(1) / static_cast<T>(n * batch.size());
  T total = T(0);
  std::vector<T> image;
  Trace<T> t;
  for (const Sample2D& s : batch) {
    check_image(w.config, s.image.size());
    if (s.label.size() != n) throw Error(ErrorKind::Shape, "label size does not match the network input");
    image.assign(s.image.begin(), s.image.end());
    forward_trace<T>(w, image, t);
    total += cross_entropy<T>(t.probs, s.label);
    backward_trace<T>(w, t, s.label, scale, grad);
  }
  return total / static_cast<T>(batch.size());
}

template <class T>
void adam_step(std::vector<T>& params, std::span<const T> grad, AdamState<T>& state, const AdamParams& p) {
  if (grad.size() != params.size()) throw Error(ErrorKind::Shape, "adam: gradient size mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), T(0));
    state.v.assign(params.size(), T(0));
    state.step = 0;
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(p.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(p.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grad[i];
    const double m = p.beta1 * state.m[i] + (1.0 - p.beta1) * g;
    const double v = p.beta2 * state.v[i] + (1.0 - p.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    params[i] = static_cast<T>(params[i] - p.learning_rate * (m / c1) / (std::sqrt(v / c2) + p.epsilon));
  }
}

template std::vector<float> unet_forward(const BasicWeights<float>&, std::span<const float>);
template std::vector<double> unet_forward(const BasicWeights<double>&, std::span<const double>);
template float cross_entropy(std::span<const float>, std::span<const std::uint8_t>);
template double cross_entropy(std::span<const double>, std::span<const std::uint8_t>);
template float loss_and_gradient(const BasicWeights<float>&, std::span<const Sample2D>, BasicWeights<float>&);
template double loss_and_gradient(const BasicWeights<double>&, std::span<const Sample2D>, BasicWeights<double>&);
template long double loss_and_gradient(const BasicWeights<long double>&, std::span<const Sample2D>,
                                       BasicWeights<long double>&);
template long double cross_entropy(std::span<const long double>, std::span<const std::uint8_t>);
template void adam_step(std::vector<float>&, std::span<const float>, AdamState<float>&, const AdamParams&);
template void adam_step(std::vector<double>&, std::span<const double>, AdamState<double>&, const AdamParams&);

// ---- weights file ----

namespace {

constexpr char kMagic[8] = {'U', 'N', 'E', 'T', 'W', 'G', 'T', '1'};
constexpr int kFormatVersion = 1;

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

}  // namespace

void save_weights(const UNetWeights& w, const std::filesystem::path& path, const std::string& config_hash) {
  nlohmann::json header;
  header["format_version"] = kFormatVersion;
  header["config"] = to_json(w.config);
  header["config_hash"] = config_hash;
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto& t : w.layout) tensors.push_back({{"name", t.name}, {"shape", t.shape}});
  header["tensors"] = tensors;
  const std::string hjson = header.dump();

  std::string bytes(kMagic, kMagic + 8);
  put_u64(bytes, hjson.size());
  bytes += hjson;
  for (const float f : w.values) {
    const std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
  }
  const std::uint32_t crc = crc_of(bytes, bytes.size());
  for (int i = 0; i < 4; ++i) bytes.push_back(static_cast<char>((crc >> (8 * i)) & 0xff));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorKind::Io, "write failed: " + path.string());
}

UNetWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto bad = [&](const std::string& m) { return Error(ErrorKind::Format, path.string() + ": " + m); };
  if (bytes.size() < 8 + 8 + 4 || std::memcmp(bytes.data(), kMagic, 8) != 0) throw bad("not a weights file");
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::uint64_t hlen = get_u64(u + 8);
  if (hlen > bytes.size() - 20) throw bad("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("header is not valid JSON: ") + e.what());
  }
  if (header.value("format_version", 0) != kFormatVersion) throw bad("unsupported format version");
  UNetConfig config;
  try {
    config = unet_config_from_json(header.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw bad(std::string("bad config: ") + e.what());
  } catch (const Error& e) {
    throw bad(e.what());
  }
  UNetWeights w(config);
  const auto& tensors = header.at("tensors");
  if (!tensors.is_array() || tensors.size() != w.layout.size()) throw bad("tensor table does not match config");
  for (std::size_t i = 0; i < w.layout.size(); ++i) {
    if (tensors[i].value("name", std::string()) != w.layout[i].name ||
        tensors[i].value("shape", std::vector<int>()) != w.layout[i].shape)
      throw bad("tensor " + std::to_string(i) + " does not match the config's shape table");
  }
  const std::size_t blob = w.values.size() * 4;
  if (bytes.size() != 16 + hlen + blob + 4) throw bad("file size does not match tensor table");
  const std::uint32_t stored = static_cast<std::uint32_t>(u[bytes.size() - 4]) |
                               static_cast<std::uint32_t>(u[bytes.size() - 3]) << 8 |
                               static_cast<std::uint32_t>(u[bytes.size() - 2]) << 16 |
                               static_cast<std::uint32_t>(u[bytes.size() - 1]) << 24;
  if (stored != crc_of(bytes, bytes.size() - 4)) throw bad("checksum mismatch");
  const unsigned char* p = u + 16 + hlen;
  for (std::size_t i = 0; i < w.values.size(); ++i, p += 4) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                               static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
    const float f = std::bit_cast<float>(bits);
    if (!std::isfinite(f)) throw bad("non-finite parameter value");
    w.values[i] = f;
  }
  return w;
}

}  // namespace neuroextract::neunet

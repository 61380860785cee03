#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "neuroextract/core/error.hpp"

namespace neuroextract::neunet {

/// 2D U-net hyper-parameters. Channel width at level l is
/// base_channels * 2^l, capped at 16 * base_channels.
struct UNetConfig {
  int levels = 5;
  int base_channels = 64;
  int input_size = 128;
  int in_channels = 4;
  int classes = 2;
  std::uint64_t seed = 0;

  /// Throws Config.
  void validate() const;
  int channels(int level) const;
  bool operator==(const UNetConfig&) const = default;
};

nlohmann::json to_json(const UNetConfig& c);
UNetConfig unet_config_from_json(const nlohmann::json& j);

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  std::size_t size() const;
};

/// Ordered parameter table:
///   enc{l}.conv1.weight [c_l, c_in, 3, 3]     enc{l}.conv1.bias [c_l]
///   enc{l}.conv2.weight [c_l, c_l, 3, 3]      enc{l}.conv2.bias [c_l]
///     for l = 0 .. levels-1 (c_in = in_channels at l = 0, else c_{l-1})
///   dec{l}.up.weight    [c_{l+1}, c_l, 2, 2]  dec{l}.up.bias    [c_l]
///   dec{l}.conv1.weight [c_l, 2 c_l, 3, 3]    dec{l}.conv1.bias [c_l]
///   dec{l}.conv2.weight [c_l, c_l, 3, 3]      dec{l}.conv2.bias [c_l]
///     for l = levels-2 down to 0; conv1 input is (skip, upsampled)
///   head.weight [classes, c_0, 1, 1]          head.bias [classes]
std::vector<TensorSpec> parameter_layout(const UNetConfig& c);
std::size_t parameter_count(const UNetConfig& c);

/// Parameters (or gradients, or optimizer moments) laid out as
/// parameter_layout(config), flattened in table order.
template <class T>
struct BasicWeights {
  UNetConfig config;
  std::vector<TensorSpec> layout;
  std::vector<T> values;

  BasicWeights() = default;
  /// Zero-filled.
  explicit BasicWeights(const UNetConfig& c);

  std::size_t offset(std::size_t tensor) const;
  std::span<T> tensor(std::size_t i);
  std::span<const T> tensor(std::size_t i) const;
  std::span<T> tensor(const std::string& name);
  std::span<const T> tensor(const std::string& name) const;
  std::size_t index_of(const std::string& name) const;

  template <class U>
  BasicWeights<U> cast() const {
    BasicWeights<U> out;
    out.config = config;
    out.layout = layout;
    out.values.assign(values.begin(), values.end());
    return out;
  }
};

using UNetWeights = BasicWeights<float>;

/// He-normal kernels (sd = sqrt(2 / fan_in)), zero biases. Deterministic per
/// seed.
UNetWeights unet_init(const UNetConfig& config, std::uint64_t seed);

/// Channel-first image [in_channels][H][W] with a binary label [H][W].
struct Sample2D {
  int size = 0;
  int channels = 0;
  std::vector<float> image;
  std::vector<std::uint8_t> label;
  std::string case_id;
  int axis = 0;
  int slice = 0;
  /// Contrast index for single-channel samples, -1 for stacked channels.
  int contrast = -1;

  /// Throws Shape / Domain.
  void validate() const;
};

/// Per-pixel class probabilities, [classes][H][W].
template <class T>
std::vector<T> unet_forward(const BasicWeights<T>& w, std::span<const T> image);

/// Mean over pixels of -ln(p_true + 1e-12). `probs` is [2][H][W].
template <class T>
T cross_entropy(std::span<const T> probs, std::span<const std::uint8_t> label);

/// Mean loss over the batch; `grad` receives the exact gradient of that mean
/// with respect to every parameter (overwritten).
template <class T>
T loss_and_gradient(const BasicWeights<T>& w, std::span<const Sample2D> batch, BasicWeights<T>& grad);

template <class T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  long step = 0;
};

struct AdamParams {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected ADAM update; initializes the state on first use.
template <class T>
void adam_step(std::vector<T>& params, std::span<const T> grad, AdamState<T>& state, const AdamParams& p);

/// Binary format: "UNETWGT1", uint64 LE header length, JSON header
/// {format_version, config, config_hash, tensors[{name, shape}]}, LE float32
/// values in table order, uint32 LE CRC32 of everything before it.
void save_weights(const UNetWeights& w, const std::filesystem::path& path, const std::string& config_hash = {});
UNetWeights load_weights(const std::filesystem::path& path);

}  // namespace neuroextract::neunet

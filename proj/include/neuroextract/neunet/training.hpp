#pragma once

#include <array>
#include <functional>
#include <random>
#include <vector>

#include "neuroextract/neunet/unet.hpp"
#include "neuroextract/volgrid/case_data.hpp"

namespace neuroextract::neunet {

using volgrid::CaseData;
using volgrid::Mask;
using volgrid::Volume;

enum class ChannelMode { Multi, Single };
std::string to_string(ChannelMode m);
ChannelMode channel_mode_from_string(const std::string& s);

struct AugmentRanges {
  double translate_fraction = 0.10;
  double rotate_degrees = 15.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double gamma_min = 0.8;
  double gamma_max = 1.25;
  double elastic_alpha_px = 8.0;
  double elastic_sigma_px = 4.0;

  /// Every transform pinned to the identity.
  static AugmentRanges none();
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 20;
  int epochs = 10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  AugmentRanges augmentation;
  ChannelMode channel_mode = ChannelMode::Multi;
  /// Contrasts fed to the network. Multi mode stacks them as channels,
  /// single mode emits one sample per contrast.
  std::vector<Contrast> contrasts{kAllContrasts.begin(), kAllContrasts.end()};
  /// Random subset of the slice pool drawn each epoch; 0 uses every slice.
  /// Counted per contrast: single mode draws this many times the number of
  /// contrasts, so each contrast gets as many steps as a multi-channel epoch.
  int samples_per_epoch = 0;
  std::uint64_t seed = 0;
  int threads = 1;

  void validate() const;
  /// Input channels the network needs for this mode.
  int in_channels() const;
};

nlohmann::json to_json(const AugmentRanges& a);
nlohmann::json to_json(const TrainConfig& t);

/// Random spatial + intensity transform. The spatial map is shared by image
/// (bilinear, zero outside) and label (nearest neighbour).
Sample2D augment(const Sample2D& s, std::mt19937_64& rng, const AugmentRanges& ranges);

struct SliceRef {
  int axis = 0;
  int index = 0;
  /// Contrast position within TrainConfig::contrasts, -1 for stacked.
  int contrast = -1;
};

/// Every slice along the three axes; single mode repeats each per contrast.
std::vector<SliceRef> enumerate_slices(const volgrid::Dims& dims, ChannelMode mode, std::size_t n_contrasts);

/// Per-contrast divisor: 99th percentile of the nonzero voxels.
std::vector<float> channel_scales(const CaseData& data, std::span<const Contrast> contrasts);

/// Normalized values are clipped to this ceiling to keep fit outliers in the
/// background from dominating the input range.
inline constexpr float kInputClip = 3.0f;

/// Slice, normalize, and fit into an input_size square with aspect-preserving
/// bilinear resize and zero padding. The label comes from the truth mask when
/// the case has one (bilinear, then >= 0.5), else it is all zero.
Sample2D make_sample(const CaseData& data, std::span<const Contrast> contrasts, std::span<const float> scales,
                     const SliceRef& ref, int input_size);

/// All samples of a case. Throws Data when a requested contrast is missing.
std::vector<Sample2D> make_samples(const CaseData& data, ChannelMode mode, std::span<const Contrast> contrasts,
                                   int input_size);

/// Where a slice lands inside the square network input.
struct Placement {
  int src_w = 0, src_h = 0;
  int dst_w = 0, dst_h = 0;
  int off_x = 0, off_y = 0;
};
Placement placement(int src_w, int src_h, int size);

struct TrainHistory {
  /// Loss on a fixed un-augmented probe set before training and after each
  /// epoch.
  double initial_probe_loss = 0.0;
  std::vector<double> probe_loss;
  /// Mean minibatch loss seen during each epoch.
  std::vector<double> train_loss;
  std::vector<double> val_dice;
  int best_epoch = 0;
};

nlohmann::json to_json(const TrainHistory& h);

struct TrainResult {
  UNetWeights weights;
  TrainHistory history;
};

/// Minibatch ADAM on augmented slices from `train_cases`, scoring mean
/// validation Dice with tri-plane inference after every epoch. Returns the
/// weights of the best-scoring epoch (earliest on ties). Bit-reproducible for
/// a fixed seed regardless of the thread count.
TrainResult train(std::span<const CaseData> train_cases, std::span<const CaseData> val_cases, const UNetConfig& unet,
                  const TrainConfig& config);

/// Foreground probability for one network input, [H][W].
using SlicePredictor = std::function<std::vector<float>(const Sample2D&)>;

SlicePredictor network_predictor(const UNetWeights& w);

struct InferenceOptions {
  ChannelMode channel_mode = ChannelMode::Multi;
  std::vector<Contrast> contrasts{kAllContrasts.begin(), kAllContrasts.end()};
  double threshold = 0.5;
  bool largest_component = true;
  /// Processing order only; the fused volume does not depend on it.
  std::array<int, 3> axis_order{0, 1, 2};
  int threads = 1;
};

struct TriplaneResult {
  Volume fused;
  std::array<Volume, 3> per_axis;
};

/// Per-axis probability volumes (single mode averages the contrasts first)
/// and their arithmetic mean.
TriplaneResult predict_triplane(const CaseData& data, const SlicePredictor& predictor, const InferenceOptions& options,
                                int input_size);

/// Checks that the channel mode matches the weights, then predicts.
TriplaneResult predict_triplane(const CaseData& data, const UNetWeights& w, const InferenceOptions& options);

/// Threshold (strictly above) plus optional largest 6-connected component.
/// Throws ExtractionFailed when nothing survives the threshold.
Mask probabilities_to_mask(const Volume& fused, double threshold, bool largest_component);

Mask extract_brain_unet(const CaseData& data, const UNetWeights& w, const InferenceOptions& options = {});

}  // namespace neuroextract::neunet

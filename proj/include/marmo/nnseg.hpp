// A small from-scratch U-Net: unpadded 3x3 convolutions with ReLU, 2x2 max
// pooling, 2x2 stride-2 up-convolutions, center-cropped skip concatenation,
// and a 1x1 output convolution followed by a sigmoid. Everything runs in
// double precision on the CPU.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "marmo/imgcore.hpp"

namespace marmo {

struct Tensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int c, int h, int w, double fill = 0.0);

  [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  double* channel(int c) { return data.data() + c * plane(); }
  [[nodiscard]] const double* channel(int c) const { return data.data() + c * plane(); }
  double& at(int c, int y, int x) { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }
  [[nodiscard]] double at(int c, int y, int x) const { return data[c * plane() + static_cast<std::size_t>(y) * width + x]; }

  /// Stacks single-channel images as channels.
  static Tensor from_images(std::span<const Image> images);
  [[nodiscard]] Image image(int c = 0) const;
};

struct UNetConfig {
  int in_channels = 1;
  int depth = 2;          ///< resolution levels; depth - 1 poolings
  int base_features = 8;  ///< doubles per level
  bool batch_norm = false;
  double dropout = 0.0;   ///< after each conv pair, training only
  int input_extent = 108; ///< sliding-window tile input
  double input_scale = 1.0;  ///< multiplies raw intensities before inference
};

enum class LayerKind { Conv3x3, UpConv2x2, Conv1x1, BatchNorm };

std::string_view layer_kind_name(LayerKind k);

struct Layer {
  LayerKind kind = LayerKind::Conv3x3;
  int in_channels = 0;
  int out_channels = 0;
  std::vector<double> weights;  ///< [out][in][kh][kw]; BatchNorm: gamma
  std::vector<double> bias;     ///< per output channel; BatchNorm: beta
  std::vector<double> running_mean;
  std::vector<double> running_var;

  [[nodiscard]] int kernel() const;
};

struct NetworkParams {
  UNetConfig config;
  std::vector<Layer> layers;
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t parameter_count() const;
};

/// He-initialized network for `config`.
NetworkParams make_unet(const UNetConfig& config, std::uint64_t seed);

/// Output extent for a square input, or nullopt when the input does not fit
/// the pooling / cropping geometry.
std::optional<int> unet_output_extent(const UNetConfig& config, int input_extent);

/// (input - output) / 2.
int unet_margin(const UNetConfig& config, int input_extent);

enum class OpKind { Conv, ReLU, MaxPool, UpConv, CropConcat, BatchNorm, Dropout };

struct TapeOp {
  OpKind kind;
  int in0 = -1;
  int in1 = -1;
  int out = -1;
  int layer = -1;
  std::vector<int> argmax;   ///< MaxPool: flat source index per output
  std::vector<double> aux;   ///< BatchNorm: (mean, inv_std, var) per channel; Dropout: mask
};

/// Recorded forward pass: every intermediate tensor and the ops producing them.
struct ForwardPass {
  std::vector<Tensor> values;  ///< values[0] is the input
  std::vector<TapeOp> ops;
  int logits = -1;
  bool training = false;
  std::size_t layer_count = 0;

  [[nodiscard]] const Tensor& logit_tensor() const { return values.at(logits); }
};

/// Inference forward pass: sigmoid saliency, extent = input - 2 * margin.
Tensor unet_forward(const NetworkParams& params, const Tensor& input);

/// Forward pass keeping activations. `training` selects batch statistics and
/// dropout; the dropout mask is drawn from `dropout_seed`.
ForwardPass unet_forward_pass(const NetworkParams& params, const Tensor& input, bool training = false,
                              std::uint64_t dropout_seed = 0);

struct LayerGrad {
  std::vector<double> weights;
  std::vector<double> bias;
};

using ParamGrads = std::vector<LayerGrad>;

/// Backpropagates a gradient w.r.t. the pre-sigmoid logits.
ParamGrads unet_backward(const NetworkParams& params, const ForwardPass& pass, const Tensor& logit_grad);

double sigmoid(double z);

struct LossResult {
  double loss = 0.0;
  Image grad_logits;  ///< d loss / d logit
};

/// -sum w [y log p + (1 - y) log(1 - p)] / sum w; p clamped to [1e-12, 1 - 1e-12].
LossResult weighted_logistic_loss(const Image& pred, const Image& label, const Image& weights);

struct TrainingSample {
  Tensor input;
  Image label;    ///< input extent or output extent
  Image weights;  ///< same extent as label
};

/// Center crop of a label / weight grid to `extent`.
Image center_crop(const Image& img, int width, int height);

class TrainingDiverged : public Error {
 public:
  using Error::Error;
};

struct TrainOptions {
  int steps = 2000;
  double learning_rate = 0.01;
  std::uint64_t seed = 1;
  double bn_momentum = 0.1;
  std::function<void(int, double)> progress;
};

struct TrainResult {
  NetworkParams params;
  std::vector<double> loss_history;
};

/// Plain SGD, one sample per step, sample order drawn from `seed`.
TrainResult train(NetworkParams params, std::span<const TrainingSample> samples, const TrainOptions& opt);

/// Loss of a single sample (training-mode forward).
double sample_loss(const NetworkParams& params, const TrainingSample& s, bool training = false,
                   std::uint64_t dropout_seed = 0);

// --- training data ------------------------------------------------------

struct CellWeightParams {
  double radius_zero = 5.0;
  double boundary_weight = 2.0;
  double label_weight = 500.0;
  double structure_weight = 2.0;
  double log_sigma = 2.0;
  double log_threshold = 50.0;  ///< on the sigma^2-normalized LoG of the image
};

/// Scale-normalized Laplacian of Gaussian: sigma^2 * lap(G_sigma * img).
Image laplacian_of_gaussian(const Image& img, double sigma);

Image build_cell_weight_map(const Mask& cell_labels, const Image& image, const CellWeightParams& p = {});

/// 1 for background, `tracer_weight` on tracer labels, `negative_weight` on
/// annotated negatives (which take precedence).
Image tracer_weight_map(const Mask& label, const Mask* negatives = nullptr, double tracer_weight = 8.0,
                        double negative_weight = 100.0);

struct TilePick {
  int x0 = 0;
  int y0 = 0;
  bool dense = false;
  friend bool operator==(const TilePick&, const TilePick&) = default;
};

/// Tile origins drawn in proportion to label density (dense) and to
/// max density - density (sparse). Uniform when the density is flat.
std::vector<TilePick> pick_training_tiles(const Image& label, int n_dense, int n_sparse, int tile, double density_sigma,
                                          std::uint64_t seed);

std::vector<TrainingSample> sample_training_tiles(std::span<const Image> channels, const Image& label,
                                                  const Image& weights, int n_dense, int n_sparse, int tile,
                                                  double density_sigma, std::uint64_t seed,
                                                  std::vector<TilePick>* picks = nullptr);

struct AugmentParams {
  double max_rotation_rad = 3.14159265358979323846;
  double gamma_min = 0.7;
  double gamma_max = 1.4;
  double scale_min = 0.9;
  double scale_max = 1.1;
  int elastic_grid = 8;
  double elastic_std = 10.0;
  double elastic_smooth = 8.0;
};

/// One concrete draw of the augmentation parameters.
struct AugmentDraw {
  double rotation = 0.0;
  double gamma = 1.0;
  double scale = 1.0;
  Image dx;  ///< elastic displacement over the output extent (empty = none)
  Image dy;
};

AugmentDraw draw_augment(int out_extent, std::uint64_t seed, const AugmentParams& p = {});
AugmentDraw neutral_augment();

/// Source position in the sample for output pixel (x, y).
std::array<double, 2> augment_source_point(const AugmentDraw& d, int in_w, int in_h, int out_extent, double x, double y);

/// Input channels bilinear; label and weights nearest (same geometry).
TrainingSample apply_augment(const TrainingSample& s, const AugmentDraw& d, int out_extent);
TrainingSample augment(const TrainingSample& s, int out_extent, std::uint64_t seed, const AugmentParams& p = {});

// --- inference ----------------------------------------------------------

/// Tiles the slice so that valid output blocks abut; mirror padding at the
/// borders. Result is congruent with the slice.
Image sliding_window_predict(const NetworkParams& params, std::span<const Image> channels, int threads = 1);

/// The mirror-padded input that sliding_window_predict tiles over, and the
/// number of tiles per axis.
Tensor sliding_window_padded_input(const NetworkParams& params, std::span<const Image> channels, int* tiles_x = nullptr,
                                   int* tiles_y = nullptr);

/// Text manifest `<prefix>.model` + little-endian f32 blob `<prefix>.bin`.
void save_model(const NetworkParams& p, const std::filesystem::path& prefix);
NetworkParams load_model(const std::filesystem::path& prefix);

}  // namespace marmo

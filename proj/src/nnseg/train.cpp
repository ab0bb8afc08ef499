#include <cmath>
#include <random>
#include <sstream>

#include "marmo/nnseg.hpp"

namespace marmo {

LossResult weighted_logistic_loss(const Image& pred, const Image& label, const Image& weights) {
  require_same_shape(pred, label, "weighted_logistic_loss");
  require_same_shape(pred, weights, "weighted_logistic_loss");
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  double wsum = 0.0;
  for (double w : weights.data) {
    if (w < 0.0) throw InvalidArgument("weighted_logistic_loss: negative weight");
    wsum += w;
  }
  LossResult r{0.0, Image(pred.width, pred.height, 0.0)};
  if (wsum == 0.0) return r;
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double w = weights.data[i];
    if (w == 0.0) continue;
    const double p = std::clamp(pred.data[i], lo, hi);
    const double y = label.data[i];
    acc += w * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    r.grad_logits.data[i] = w * (pred.data[i] - y) / wsum;
  }
  r.loss = -acc / wsum;
  return r;
}

Image center_crop(const Image& img, int width, int height) {
  if (width > img.width || height > img.height || (img.width - width) % 2 || (img.height - height) % 2) {
    throw InvalidArgument("center_crop: cannot crop " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                          " to " + std::to_string(width) + "x" + std::to_string(height));
  }
  const int ox = (img.width - width) / 2, oy = (img.height - height) / 2;
  Image out(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out(x, y) = img(x + ox, y + oy);
  return out;
}

namespace {

struct Targets {
  Image label;
  Image weights;
};

Targets targets_for(const TrainingSample& s, const Tensor& logits) {
  if (!s.label.same_shape(s.weights)) throw InvalidArgument("training sample: label and weight extents differ");
  if (s.label.width == logits.width && s.label.height == logits.height) return {s.label, s.weights};
  if (s.label.width == s.input.width && s.label.height == s.input.height) {
    return {center_crop(s.label, logits.width, logits.height), center_crop(s.weights, logits.width, logits.height)};
  }
  throw InvalidArgument("training sample: label extent matches neither input nor network output");
}

Image probabilities(const Tensor& logits) {
  Image p = logits.image(0);
  for (double& v : p.data) v = sigmoid(v);
  return p;
}

}  // namespace

double sample_loss(const NetworkParams& params, const TrainingSample& s, bool training, std::uint64_t dropout_seed) {
  const auto fp = unet_forward_pass(params, s.input, training, dropout_seed);
  const auto t = targets_for(s, fp.logit_tensor());
  return weighted_logistic_loss(probabilities(fp.logit_tensor()), t.label, t.weights).loss;
}

TrainResult train(NetworkParams params, std::span<const TrainingSample> samples, const TrainOptions& opt) {
  if (samples.empty()) throw InvalidArgument("train: no samples");
  if (opt.steps < 0) throw InvalidArgument("train: negative step count");
  TrainResult res;
  res.loss_history.reserve(static_cast<std::size_t>(opt.steps));
  std::mt19937_64 rng(opt.seed);
  std::uniform_int_distribution<std::size_t> pick(0, samples.size() - 1);
  for (int step = 0; step < opt.steps; ++step) {
    const TrainingSample& s = samples[pick(rng)];
    const std::uint64_t dropout_seed = rng();
    const auto fp = unet_forward_pass(params, s.input, true, dropout_seed);
    const auto t = targets_for(s, fp.logit_tensor());
    const auto loss = weighted_logistic_loss(probabilities(fp.logit_tensor()), t.label, t.weights);
    if (!std::isfinite(loss.loss)) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << " (loss " << loss.loss << ", learning rate "
          << opt.learning_rate << ")";
      if (!res.loss_history.empty()) msg << "; previous loss " << res.loss_history.back();
      throw TrainingDiverged(msg.str());
    }
    res.loss_history.push_back(loss.loss);
    if (opt.progress) opt.progress(step, loss.loss);

    Tensor lg(1, loss.grad_logits.height, loss.grad_logits.width);
    lg.data = loss.grad_logits.data;
    const auto grads = unet_backward(params, fp, lg);
    for (std::size_t li = 0; li < params.layers.size(); ++li) {
      Layer& L = params.layers[li];
      for (std::size_t k = 0; k < L.weights.size(); ++k) L.weights[k] -= opt.learning_rate * grads[li].weights[k];
      for (std::size_t k = 0; k < L.bias.size(); ++k) L.bias[k] -= opt.learning_rate * grads[li].bias[k];
    }
    // Running statistics for inference-mode batch normalization.
    for (const auto& op : fp.ops) {
      if (op.kind != OpKind::BatchNorm) continue;
      Layer& L = params.layers[op.layer];
      for (int c = 0; c < L.out_channels; ++c) {
        const double mean = op.aux[3 * c];
        const double var = op.aux[3 * c + 2];
        L.running_mean[c] = (1.0 - opt.bn_momentum) * L.running_mean[c] + opt.bn_momentum * mean;
        L.running_var[c] = (1.0 - opt.bn_momentum) * L.running_var[c] + opt.bn_momentum * var;
      }
    }
  }
  res.params = std::move(params);
  return res;
}

}  // namespace marmo

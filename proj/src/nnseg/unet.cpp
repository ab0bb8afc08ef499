#include <algorithm>
#include <cmath>
#include <random>
#include <string>

#include "marmo/nnseg.hpp"

namespace marmo {

Tensor::Tensor(int c, int h, int w, double fill) : channels(c), height(h), width(w) {
  if (c <= 0 || h <= 0 || w <= 0) throw InvalidArgument("tensor dims must be positive");
  data.assign(static_cast<std::size_t>(c) * h * w, fill);
}

Tensor Tensor::from_images(std::span<const Image> images) {
  if (images.empty()) throw InvalidArgument("no input channels");
  Tensor t(static_cast<int>(images.size()), images[0].height, images[0].width);
  for (std::size_t c = 0; c < images.size(); ++c) {
    require_same_shape(images[c], images[0], "tensor channels");
    std::copy(images[c].data.begin(), images[c].data.end(), t.channel(static_cast<int>(c)));
  }
  return t;
}

Image Tensor::image(int c) const {
  Image img(width, height);
  std::copy(channel(c), channel(c) + plane(), img.data.begin());
  return img;
}

std::string_view layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv3x3: return "conv3x3";
    case LayerKind::UpConv2x2: return "upconv2x2";
    case LayerKind::Conv1x1: return "conv1x1";
    case LayerKind::BatchNorm: return "batchnorm";
  }
  return "?";
}

int Layer::kernel() const {
  switch (kind) {
    case LayerKind::Conv3x3: return 3;
    case LayerKind::UpConv2x2: return 2;
    default: return 1;
  }
}

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weights.size() + l.bias.size();
  return n;
}

namespace {

void check_config(const UNetConfig& c) {
  if (c.in_channels <= 0) throw InvalidArgument("unet: in_channels must be positive");
  if (c.depth < 1) throw InvalidArgument("unet: depth must be >= 1");
  if (c.base_features <= 0) throw InvalidArgument("unet: base_features must be positive");
  if (c.dropout < 0.0 || c.dropout >= 1.0) throw InvalidArgument("unet: dropout must be in [0, 1)");
}

Layer make_layer(LayerKind kind, int in, int out, std::mt19937_64& rng) {
  Layer l;
  l.kind = kind;
  l.in_channels = in;
  l.out_channels = out;
  if (kind == LayerKind::BatchNorm) {
    l.weights.assign(out, 1.0);
    l.bias.assign(out, 0.0);
    l.running_mean.assign(out, 0.0);
    l.running_var.assign(out, 1.0);
    return l;
  }
  const int k = l.kernel();
  const double fan_in = kind == LayerKind::UpConv2x2 ? in : static_cast<double>(in) * k * k;
  const double gain = kind == LayerKind::Conv3x3 ? 2.0 : 1.0;
  std::normal_distribution<double> nd(0.0, std::sqrt(gain / fan_in));
  l.weights.resize(static_cast<std::size_t>(out) * in * k * k);
  for (double& w : l.weights) w = nd(rng);
  l.bias.assign(out, 0.0);
  return l;
}

}  // namespace

NetworkParams make_unet(const UNetConfig& c, std::uint64_t seed) {
  check_config(c);
  std::mt19937_64 rng(seed);
  NetworkParams p;
  p.config = c;
  p.seed = seed;
  auto feat = [&](int level) { return c.base_features << level; };
  int in = c.in_channels;
  for (int l = 0; l < c.depth; ++l) {
    p.layers.push_back(make_layer(LayerKind::Conv3x3, in, feat(l), rng));
    p.layers.push_back(make_layer(LayerKind::Conv3x3, feat(l), feat(l), rng));
    if (c.batch_norm) p.layers.push_back(make_layer(LayerKind::BatchNorm, feat(l), feat(l), rng));
    in = feat(l);
  }
  for (int l = c.depth - 2; l >= 0; --l) {
    p.layers.push_back(make_layer(LayerKind::UpConv2x2, feat(l + 1), feat(l), rng));
    p.layers.push_back(make_layer(LayerKind::Conv3x3, 2 * feat(l), feat(l), rng));
    p.layers.push_back(make_layer(LayerKind::Conv3x3, feat(l), feat(l), rng));
    if (c.batch_norm) p.layers.push_back(make_layer(LayerKind::BatchNorm, feat(l), feat(l), rng));
  }
  p.layers.push_back(make_layer(LayerKind::Conv1x1, feat(0), 1, rng));
  return p;
}

std::optional<int> unet_output_extent(const UNetConfig& c, int e) {
  check_config(c);
  std::vector<int> skips;
  for (int l = 0; l < c.depth; ++l) {
    e -= 4;
    if (e <= 0) return std::nullopt;
    if (l < c.depth - 1) {
      if (e % 2 != 0) return std::nullopt;
      skips.push_back(e);
      e /= 2;
    }
  }
  for (int l = c.depth - 2; l >= 0; --l) {
    e *= 2;
    const int s = skips[l];
    if (s < e || (s - e) % 2 != 0) return std::nullopt;
    e -= 4;
    if (e <= 0) return std::nullopt;
  }
  return e;
}

int unet_margin(const UNetConfig& c, int input_extent) {
  const auto out = unet_output_extent(c, input_extent);
  if (!out) throw InvalidArgument("unet: input extent " + std::to_string(input_extent) + " does not fit depth " +
                                  std::to_string(c.depth));
  return (input_extent - *out) / 2;
}

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// --- primitive ops ------------------------------------------------------------

namespace {

constexpr double kBnEps = 1e-5;

Tensor conv3x3(const Tensor& in, const Layer& L) {
  if (in.channels != L.in_channels) throw InvalidArgument("conv: channel mismatch with params");
  if (in.height < 3 || in.width < 3) throw InvalidArgument("conv: input too small");
  const int ho = in.height - 2, wo = in.width - 2, ci = in.channels;
  Tensor out(L.out_channels, ho, wo);
  for (int o = 0; o < L.out_channels; ++o) {
    double* dst0 = out.channel(o);
    std::fill(dst0, dst0 + out.plane(), L.bias[o]);
    for (int i = 0; i < ci; ++i) {
      const double* src0 = in.channel(i);
      const double* w = &L.weights[(static_cast<std::size_t>(o) * ci + i) * 9];
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const double wk = w[ky * 3 + kx];
          for (int y = 0; y < ho; ++y) {
            const double* src = src0 + static_cast<std::size_t>(y + ky) * in.width + kx;
            double* dst = dst0 + static_cast<std::size_t>(y) * wo;
            for (int x = 0; x < wo; ++x) dst[x] += wk * src[x];
          }
        }
    }
  }
  return out;
}

void conv3x3_backward(const Tensor& in, const Layer& L, const Tensor& dout, Tensor* din, LayerGrad& g) {
  const int ho = dout.height, wo = dout.width, ci = in.channels;
  for (int o = 0; o < L.out_channels; ++o) {
    const double* d0 = dout.channel(o);
    double bsum = 0.0;
    for (std::size_t k = 0; k < dout.plane(); ++k) bsum += d0[k];
    g.bias[o] += bsum;
    for (int i = 0; i < ci; ++i) {
      const double* src0 = in.channel(i);
      double* di0 = din ? din->channel(i) : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(o) * ci + i) * 9;
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const double wk = L.weights[wbase + ky * 3 + kx];
          double acc = 0.0;
          for (int y = 0; y < ho; ++y) {
            const double* src = src0 + static_cast<std::size_t>(y + ky) * in.width + kx;
            const double* d = d0 + static_cast<std::size_t>(y) * wo;
            for (int x = 0; x < wo; ++x) acc += d[x] * src[x];
            if (di0) {
              double* di = di0 + static_cast<std::size_t>(y + ky) * in.width + kx;
              for (int x = 0; x < wo; ++x) di[x] += wk * d[x];
            }
          }
          g.weights[wbase + ky * 3 + kx] += acc;
        }
    }
  }
}

Tensor conv1x1(const Tensor& in, const Layer& L) {
  if (in.channels != L.in_channels) throw InvalidArgument("conv1x1: channel mismatch with params");
  Tensor out(L.out_channels, in.height, in.width);
  for (int o = 0; o < L.out_channels; ++o) {
    double* dst = out.channel(o);
    std::fill(dst, dst + out.plane(), L.bias[o]);
    for (int i = 0; i < in.channels; ++i) {
      const double w = L.weights[static_cast<std::size_t>(o) * in.channels + i];
      const double* src = in.channel(i);
      for (std::size_t k = 0; k < in.plane(); ++k) dst[k] += w * src[k];
    }
  }
  return out;
}

void conv1x1_backward(const Tensor& in, const Layer& L, const Tensor& dout, Tensor* din, LayerGrad& g) {
  for (int o = 0; o < L.out_channels; ++o) {
    const double* d = dout.channel(o);
    double bsum = 0.0;
    for (std::size_t k = 0; k < dout.plane(); ++k) bsum += d[k];
    g.bias[o] += bsum;
    for (int i = 0; i < in.channels; ++i) {
      const std::size_t wi = static_cast<std::size_t>(o) * in.channels + i;
      const double* src = in.channel(i);
      double acc = 0.0;
      for (std::size_t k = 0; k < in.plane(); ++k) acc += d[k] * src[k];
      g.weights[wi] += acc;
      if (din) {
        double* di = din->channel(i);
        for (std::size_t k = 0; k < in.plane(); ++k) di[k] += L.weights[wi] * d[k];
      }
    }
  }
}

Tensor upconv(const Tensor& in, const Layer& L) {
  if (in.channels != L.in_channels) throw InvalidArgument("upconv: channel mismatch with params");
  Tensor out(L.out_channels, in.height * 2, in.width * 2);
  for (int o = 0; o < L.out_channels; ++o) {
    double* dst = out.channel(o);
    std::fill(dst, dst + out.plane(), L.bias[o]);
    for (int i = 0; i < in.channels; ++i) {
      const double* src = in.channel(i);
      const double* w = &L.weights[(static_cast<std::size_t>(o) * in.channels + i) * 4];
      for (int y = 0; y < in.height; ++y)
        for (int dy = 0; dy < 2; ++dy) {
          double* row = dst + static_cast<std::size_t>(2 * y + dy) * out.width;
          const double* s = src + static_cast<std::size_t>(y) * in.width;
          const double w0 = w[dy * 2], w1 = w[dy * 2 + 1];
          for (int x = 0; x < in.width; ++x) {
            row[2 * x] += w0 * s[x];
            row[2 * x + 1] += w1 * s[x];
          }
        }
    }
  }
  return out;
}

void upconv_backward(const Tensor& in, const Layer& L, const Tensor& dout, Tensor* din, LayerGrad& g) {
  for (int o = 0; o < L.out_channels; ++o) {
    const double* d = dout.channel(o);
    double bsum = 0.0;
    for (std::size_t k = 0; k < dout.plane(); ++k) bsum += d[k];
    g.bias[o] += bsum;
    for (int i = 0; i < in.channels; ++i) {
      const double* src = in.channel(i);
      const std::size_t wb = (static_cast<std::size_t>(o) * in.channels + i) * 4;
      double acc[4] = {0, 0, 0, 0};
      double* di = din ? din->channel(i) : nullptr;
      for (int y = 0; y < in.height; ++y)
        for (int dy = 0; dy < 2; ++dy) {
          const double* row = d + static_cast<std::size_t>(2 * y + dy) * dout.width;
          const double* s = src + static_cast<std::size_t>(y) * in.width;
          const double w0 = L.weights[wb + dy * 2], w1 = L.weights[wb + dy * 2 + 1];
          for (int x = 0; x < in.width; ++x) {
            acc[dy * 2] += row[2 * x] * s[x];
            acc[dy * 2 + 1] += row[2 * x + 1] * s[x];
          }
          if (di) {
            double* dr = di + static_cast<std::size_t>(y) * in.width;
            for (int x = 0; x < in.width; ++x) dr[x] += w0 * row[2 * x] + w1 * row[2 * x + 1];
          }
        }
      for (int k = 0; k < 4; ++k) g.weights[wb + k] += acc[k];
    }
  }
}

Tensor relu(const Tensor& in) {
  Tensor out = in;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor maxpool(const Tensor& in, std::vector<int>& argmax) {
  if (in.height % 2 || in.width % 2) throw InvalidArgument("maxpool: odd extent " + std::to_string(in.height));
  Tensor out(in.channels, in.height / 2, in.width / 2);
  argmax.resize(out.data.size());
  std::size_t k = 0;
  for (int c = 0; c < in.channels; ++c)
    for (int y = 0; y < out.height; ++y)
      for (int x = 0; x < out.width; ++x, ++k) {
        int best = -1;
        double bv = 0.0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int idx = static_cast<int>(c * in.plane() + static_cast<std::size_t>(2 * y + dy) * in.width + 2 * x + dx);
            if (best < 0 || in.data[idx] > bv) {
              best = idx;
              bv = in.data[idx];
            }
          }
        out.data[k] = bv;
        argmax[k] = best;
      }
  return out;
}

Tensor crop_concat(const Tensor& skip, const Tensor& up) {
  const int oy = (skip.height - up.height) / 2, ox = (skip.width - up.width) / 2;
  if (oy < 0 || ox < 0 || (skip.height - up.height) % 2 || (skip.width - up.width) % 2) {
    throw InvalidArgument("skip connection cannot be center-cropped");
  }
  Tensor out(skip.channels + up.channels, up.height, up.width);
  for (int c = 0; c < skip.channels; ++c)
    for (int y = 0; y < up.height; ++y)
      for (int x = 0; x < up.width; ++x) out.at(c, y, x) = skip.at(c, y + oy, x + ox);
  std::copy(up.data.begin(), up.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(skip.channels * out.plane()));
  return out;
}

}  // namespace

// --- graph ------------------------------------------------------------------------

namespace {

class TapeBuilder {
 public:
  TapeBuilder(const NetworkParams& p, ForwardPass& fp, bool training, std::uint64_t seed)
      : p_(p), fp_(fp), training_(training), rng_(seed) {}

  int conv(int in) {
    const Layer& L = next_layer();
    Tensor out = L.kind == LayerKind::Conv3x3 ? conv3x3(fp_.values[in], L)
                 : L.kind == LayerKind::Conv1x1 ? conv1x1(fp_.values[in], L)
                                                : throw InvalidArgument("layer order mismatch: expected conv");
    return push({OpKind::Conv, in, -1, -1, last(), {}, {}}, std::move(out));
  }
  int up(int in) {
    const Layer& L = next_layer();
    if (L.kind != LayerKind::UpConv2x2) throw InvalidArgument("layer order mismatch: expected upconv");
    return push({OpKind::UpConv, in, -1, -1, last(), {}, {}}, upconv(fp_.values[in], L));
  }
  int relu_op(int in) { return push({OpKind::ReLU, in, -1, -1, -1, {}, {}}, relu(fp_.values[in])); }
  int pool(int in) {
    TapeOp op{OpKind::MaxPool, in, -1, -1, -1, {}, {}};
    Tensor out = maxpool(fp_.values[in], op.argmax);
    return push(std::move(op), std::move(out));
  }
  int concat(int skip, int upv) {
    return push({OpKind::CropConcat, skip, upv, -1, -1, {}, {}}, crop_concat(fp_.values[skip], fp_.values[upv]));
  }
  int batchnorm(int in) {
    const Layer& L = next_layer();
    if (L.kind != LayerKind::BatchNorm) throw InvalidArgument("layer order mismatch: expected batchnorm");
    const Tensor& x = fp_.values[in];
    TapeOp op{OpKind::BatchNorm, in, -1, -1, last(), {}, {}};
    op.aux.resize(3 * static_cast<std::size_t>(x.channels));
    Tensor out(x.channels, x.height, x.width);
    const double n = static_cast<double>(x.plane());
    for (int c = 0; c < x.channels; ++c) {
      const double* s = x.channel(c);
      double mean = L.running_mean[c], var = L.running_var[c];
      if (training_) {
        mean = 0.0;
        for (std::size_t k = 0; k < x.plane(); ++k) mean += s[k];
        mean /= n;
        var = 0.0;
        for (std::size_t k = 0; k < x.plane(); ++k) var += (s[k] - mean) * (s[k] - mean);
        var /= n;
      }
      const double inv = 1.0 / std::sqrt(var + kBnEps);
      op.aux[3 * c] = mean;
      op.aux[3 * c + 1] = inv;
      op.aux[3 * c + 2] = var;
      double* d = out.channel(c);
      for (std::size_t k = 0; k < x.plane(); ++k) d[k] = L.weights[c] * (s[k] - mean) * inv + L.bias[c];
    }
    return push(std::move(op), std::move(out));
  }
  int dropout(int in) {
    const double rate = p_.config.dropout;
    if (!training_ || rate <= 0.0) return in;
    TapeOp op{OpKind::Dropout, in, -1, -1, -1, {}, {}};
    const Tensor& x = fp_.values[in];
    op.aux.resize(x.data.size());
    std::bernoulli_distribution keep(1.0 - rate);
    Tensor out = x;
    for (std::size_t k = 0; k < x.data.size(); ++k) {
      op.aux[k] = keep(rng_) ? 1.0 / (1.0 - rate) : 0.0;
      out.data[k] *= op.aux[k];
    }
    return push(std::move(op), std::move(out));
  }

  int conv_pair(int x) {
    x = relu_op(conv(x));
    x = conv(x);
    if (p_.config.batch_norm) x = batchnorm(x);
    return dropout(relu_op(x));
  }

  [[nodiscard]] std::size_t consumed() const { return cursor_; }
  [[nodiscard]] int last() const { return static_cast<int>(cursor_) - 1; }

 private:
  const Layer& next_layer() {
    if (cursor_ >= p_.layers.size()) throw InvalidArgument("params have fewer layers than the architecture");
    return p_.layers[cursor_++];
  }
  int push(TapeOp op, Tensor t) {
    op.out = static_cast<int>(fp_.values.size());
    fp_.values.push_back(std::move(t));
    fp_.ops.push_back(std::move(op));
    return fp_.ops.back().out;
  }

  const NetworkParams& p_;
  ForwardPass& fp_;
  bool training_;
  std::mt19937_64 rng_;
  std::size_t cursor_ = 0;
};

}  // namespace

ForwardPass unet_forward_pass(const NetworkParams& params, const Tensor& input, bool training,
                              std::uint64_t dropout_seed) {
  const auto& c = params.config;
  if (input.channels != c.in_channels) {
    throw InvalidArgument("unet: input has " + std::to_string(input.channels) + " channels, params expect " +
                          std::to_string(c.in_channels));
  }
  if (!unet_output_extent(c, input.height) || !unet_output_extent(c, input.width)) {
    throw InvalidArgument("unet: input " + std::to_string(input.width) + "x" + std::to_string(input.height) +
                          " too small or misaligned for depth " + std::to_string(c.depth));
  }
  ForwardPass fp;
  fp.training = training;
  fp.values.push_back(input);
  TapeBuilder b(params, fp, training, dropout_seed);
  std::vector<int> skips;
  int x = 0;
  for (int l = 0; l < c.depth; ++l) {
    x = b.conv_pair(x);
    if (l < c.depth - 1) {
      skips.push_back(x);
      x = b.pool(x);
    }
  }
  for (int l = c.depth - 2; l >= 0; --l) {
    x = b.concat(skips[l], b.up(x));
    x = b.conv_pair(x);
  }
  fp.logits = b.conv(x);
  fp.layer_count = b.consumed();
  if (fp.layer_count != params.layers.size()) throw InvalidArgument("params have more layers than the architecture");
  return fp;
}

Tensor unet_forward(const NetworkParams& params, const Tensor& input) {
  auto fp = unet_forward_pass(params, input, false);
  Tensor out = std::move(fp.values[fp.logits]);
  for (double& v : out.data) v = sigmoid(v);
  return out;
}

ParamGrads unet_backward(const NetworkParams& params, const ForwardPass& fp, const Tensor& logit_grad) {
  if (fp.logits < 0 || fp.values.empty() || fp.layer_count != params.layers.size()) {
    throw InvalidArgument("unet_backward: missing or stale forward activations");
  }
  const Tensor& lg = fp.values[fp.logits];
  if (logit_grad.channels != lg.channels || logit_grad.height != lg.height || logit_grad.width != lg.width) {
    throw InvalidArgument("unet_backward: gradient shape differs from the forward output");
  }
  for (const auto& op : fp.ops) {
    if (op.layer < 0) continue;
    const Layer& L = params.layers[op.layer];
    if (op.kind != OpKind::BatchNorm && fp.values[op.in0].channels != L.in_channels) {
      throw InvalidArgument("unet_backward: forward pass was recorded with different params");
    }
  }

  ParamGrads g(params.layers.size());
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    g[i].weights.assign(params.layers[i].weights.size(), 0.0);
    g[i].bias.assign(params.layers[i].bias.size(), 0.0);
  }
  std::vector<Tensor> grads(fp.values.size());
  auto grad_of = [&](int idx) -> Tensor& {
    if (grads[idx].data.empty()) {
      const Tensor& v = fp.values[idx];
      grads[idx] = Tensor(v.channels, v.height, v.width, 0.0);
    }
    return grads[idx];
  };
  grads[fp.logits] = logit_grad;

  for (auto it = fp.ops.rbegin(); it != fp.ops.rend(); ++it) {
    const TapeOp& op = *it;
    if (grads[op.out].data.empty()) continue;
    const Tensor& dout = grads[op.out];
    const Tensor& in = fp.values[op.in0];
    Tensor* din = op.in0 == 0 ? nullptr : &grad_of(op.in0);
    switch (op.kind) {
      case OpKind::Conv: {
        const Layer& L = params.layers[op.layer];
        if (L.kind == LayerKind::Conv3x3) {
          conv3x3_backward(in, L, dout, din, g[op.layer]);
        } else {
          conv1x1_backward(in, L, dout, din, g[op.layer]);
        }
        break;
      }
      case OpKind::UpConv: upconv_backward(in, params.layers[op.layer], dout, din, g[op.layer]); break;
      case OpKind::ReLU: {
        if (!din) break;
        const Tensor& out = fp.values[op.out];
        for (std::size_t k = 0; k < out.data.size(); ++k)
          if (out.data[k] > 0.0) din->data[k] += dout.data[k];
        break;
      }
      case OpKind::MaxPool:
        if (!din) break;
        for (std::size_t k = 0; k < dout.data.size(); ++k) din->data[op.argmax[k]] += dout.data[k];
        break;
      case OpKind::Dropout:
        if (!din) break;
        for (std::size_t k = 0; k < dout.data.size(); ++k) din->data[k] += dout.data[k] * op.aux[k];
        break;
      case OpKind::CropConcat: {
        const Tensor& skip = fp.values[op.in0];
        const int oy = (skip.height - dout.height) / 2, ox = (skip.width - dout.width) / 2;
        if (din) {
          for (int c = 0; c < skip.channels; ++c)
            for (int y = 0; y < dout.height; ++y)
              for (int x = 0; x < dout.width; ++x) din->at(c, y + oy, x + ox) += dout.at(c, y, x);
        }
        if (op.in1 != 0) {
          Tensor& dup = grad_of(op.in1);
          const std::size_t off = skip.channels * dout.plane();
          for (std::size_t k = 0; k < dup.data.size(); ++k) dup.data[k] += dout.data[off + k];
        }
        break;
      }
      case OpKind::BatchNorm: {
        const Layer& L = params.layers[op.layer];
        const double n = static_cast<double>(in.plane());
        for (int c = 0; c < in.channels; ++c) {
          const double mean = op.aux[3 * c], inv = op.aux[3 * c + 1];
          const double* x = in.channel(c);
          const double* dy = dout.channel(c);
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t k = 0; k < in.plane(); ++k) {
            sum_dy += dy[k];
            sum_dy_xhat += dy[k] * (x[k] - mean) * inv;
          }
          g[op.layer].weights[c] += sum_dy_xhat;
          g[op.layer].bias[c] += sum_dy;
          if (!din) continue;
          double* dx = din->channel(c);
          const double scale = L.weights[c] * inv;
          if (fp.training) {
            for (std::size_t k = 0; k < in.plane(); ++k) {
              const double xhat = (x[k] - mean) * inv;
              dx[k] += scale * (dy[k] - sum_dy / n - xhat * sum_dy_xhat / n);
            }
          } else {
            for (std::size_t k = 0; k < in.plane(); ++k) dx[k] += scale * dy[k];
          }
        }
        break;
      }
    }
  }
  return g;
}

}  // namespace marmo

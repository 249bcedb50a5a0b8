#include "uroscan/gradcam.hpp"

#include <algorithm>
#include <cmath>

namespace uroscan::cam {

namespace {

void check_image(const nn::Network& net, const Tensor& image) {
  if (!image.defined()) throw ValidationError("gradcam image is undefined");
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != net.spec.in_channels || s[1] != net.spec.image_size ||
      s[2] != net.spec.image_size)
    throw ShapeError("gradcam expects an image of shape [" +
                     std::to_string(net.spec.in_channels) + "," +
                     std::to_string(net.spec.image_size) + "," +
                     std::to_string(net.spec.image_size) + "], got " + shape_str(s));
}

Tensor batch_of_one(const nn::Network& net, const Tensor& image) {
  Tensor batch(Shape{1, image.shape()[0], image.shape()[1], image.shape()[2]},
               net.spec.dtype, /*requires_grad=*/true);
  for (int64_t i = 0; i < image.numel(); ++i) batch.set_value(i, image.value_at(i));
  return batch;
}

// The pre-softmax score layer: the producer of the terminal softmax, or the
// terminal layer itself when the graph does not end in one.
const std::string& logits_layer(const nn::Network& net) {
  const nn::Layer& out = net.layer(net.output);
  if (out.kind == nn::LayerKind::softmax) return out.inputs.front();
  return net.output;
}

}  // namespace

std::string default_target_layer(const nn::Network& net) {
  for (auto it = net.layers.rbegin(); it != net.layers.rend(); ++it)
    if (it->kind == nn::LayerKind::conv) return it->name;
  throw ValidationError("network has no conv layer to attribute to");
}

Heatmap gradcam(nn::Network& net, const Tensor& image, int64_t class_index,
                const std::string& target_layer) {
  check_image(net, image);
  if (class_index < 0 || class_index >= net.spec.classes)
    throw ValidationError("class index " + std::to_string(class_index) +
                          " out of range for " + std::to_string(net.spec.classes) +
                          " classes");
  const std::string target =
      target_layer.empty() ? default_target_layer(net) : target_layer;
  if (!net.has_layer(target)) throw ValidationError("no layer named '" + target + "'");

  // Track the input so every op is taped even in a fully frozen network.
  Tensor batch = batch_of_one(net, image);
  Tape tape;
  std::map<std::string, Tensor> acts;
  net.forward(batch, /*training=*/false, &tape, &acts);

  Tensor logits = acts.at(logits_layer(net));
  Tensor score = ops::pick(logits, class_index, &tape);
  ops::backward(score, tape);

  const Tensor& act = acts.at(target);
  const Shape& as = act.shape();  // [1, C, h, w]
  if (as.size() != 4)
    throw ValidationError("gradcam target '" + target +
                          "' does not produce a spatial feature map");
  const int64_t channels = as[1], h = as[2], w = as[3], plane = h * w;

  Heatmap map;
  map.layer = target;
  map.class_index = class_index;
  map.values = Tensor::zeros({h, w}, Dtype::f64);
  auto out = map.values.data<double>();

  dispatch_dtype(act.dtype(), [&](auto tag) {
    using T = decltype(tag);
    auto a = act.data<T>();
    auto g = act.grad<T>();
    for (int64_t c = 0; c < channels; ++c) {
      double alpha = 0.0;
      for (int64_t i = 0; i < plane; ++i) alpha += static_cast<double>(g[c * plane + i]);
      alpha /= static_cast<double>(plane);
      for (int64_t i = 0; i < plane; ++i)
        out[i] += alpha * static_cast<double>(a[c * plane + i]);
    }
  });

  double peak = 0.0;
  for (auto& v : out) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0.0) {
    for (auto& v : out) v /= peak;
  } else {
    map.degenerate = true;  // no positive class evidence anywhere
  }
  return map;
}

int64_t predict_class(nn::Network& net, const Tensor& image) {
  check_image(net, image);
  Tensor batch(Shape{1, image.shape()[0], image.shape()[1], image.shape()[2]},
               net.spec.dtype);
  for (int64_t i = 0; i < image.numel(); ++i) batch.set_value(i, image.value_at(i));
  Tensor probs = net.forward(batch, /*training=*/false);
  int64_t best = 0;
  for (int64_t k = 1; k < net.spec.classes; ++k)
    if (probs.value_at(k) > probs.value_at(best)) best = k;
  return best;
}

Tensor upsample_bilinear(const Tensor& grid, int64_t out_h, int64_t out_w) {
  if (!grid.defined() || grid.shape().size() != 2)
    throw ShapeError("upsample expects a [h,w] grid");
  if (out_h < 1 || out_w < 1) throw ValidationError("upsample target must be positive");
  const int64_t h = grid.shape()[0], w = grid.shape()[1];
  Tensor out = Tensor::zeros({out_h, out_w}, Dtype::f64);
  auto src = grid.data<double>();
  auto dst = out.data<double>();
  for (int64_t y = 0; y < out_h; ++y) {
    const double sy =
        std::clamp((y + 0.5) * static_cast<double>(h) / out_h - 0.5, 0.0, h - 1.0);
    const int64_t y0 = static_cast<int64_t>(sy);
    const int64_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int64_t x = 0; x < out_w; ++x) {
      const double sx =
          std::clamp((x + 0.5) * static_cast<double>(w) / out_w - 0.5, 0.0, w - 1.0);
      const int64_t x0 = static_cast<int64_t>(sx);
      const int64_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      const double top = src[y0 * w + x0] * (1 - fx) + src[y0 * w + x1] * fx;
      const double bot = src[y1 * w + x0] * (1 - fx) + src[y1 * w + x1] * fx;
      dst[y * out_w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

void ramp_color(double v, double rgb[3]) {
  v = std::clamp(v, 0.0, 1.0);
  size_t hi = 1;
  while (hi < 4 && kRamp[hi][0] < v) ++hi;
  const double* a = kRamp[hi - 1];
  const double* b = kRamp[hi];
  const double t = (v - a[0]) / (b[0] - a[0]);
  for (int c = 0; c < 3; ++c) rgb[c] = a[1 + c] * (1 - t) + b[1 + c] * t;
}

Tensor overlay(const Tensor& image, const Heatmap& map, double opacity) {
  if (!image.defined() || image.shape().size() != 3 || image.shape()[0] != 3)
    throw ShapeError("overlay expects a [3,H,W] image");
  if (!map.values.defined()) throw ValidationError("overlay heatmap is undefined");
  if (!(opacity >= 0.0 && opacity <= 1.0))
    throw ValidationError("opacity must be in [0,1]");

  const int64_t h = image.shape()[1], w = image.shape()[2];
  if (opacity == 0.0) return image.clone();

  Tensor up = upsample_bilinear(map.values, h, w);
  auto heat = up.data<double>();
  Tensor out(image.shape(), image.dtype());
  double rgb[3];
  for (int64_t i = 0; i < h * w; ++i) {
    ramp_color(heat[i], rgb);
    for (int64_t c = 0; c < 3; ++c) {
      const double base = image.value_at(c * h * w + i);
      out.set_value(c * h * w + i, base * (1 - opacity) + rgb[c] * opacity);
    }
  }
  return out;
}

double box_mass_fraction(const Heatmap& map, const data::BBox& box, int64_t image_size) {
  if (!map.values.defined()) throw ValidationError("heatmap is undefined");
  if (!box.valid()) throw ValidationError("invalid box");
  Tensor up = upsample_bilinear(map.values, image_size, image_size);
  auto v = up.data<double>();
  double total = 0.0, inside = 0.0;
  for (int64_t y = 0; y < image_size; ++y)
    for (int64_t x = 0; x < image_size; ++x) {
      const double m = v[y * image_size + x];
      total += m;
      if (box.contains(x, y)) inside += m;
    }
  return total > 0.0 ? inside / total : 0.0;
}

}  // namespace uroscan::cam

#pragma once

#include <string>

#include "uroscan/dataset.hpp"
#include "uroscan/nn.hpp"

namespace uroscan::cam {

/// Class-evidence map over the spatial grid of one conv layer. Values are
/// max-normalized to [0,1]; a map whose weighted activations were all
/// non-positive stays at zero and is flagged degenerate.
struct Heatmap {
  Tensor values;        // [h, w], f64
  std::string layer;    // conv layer the map was taken from
  int64_t class_index;  // class whose pre-softmax score was attributed
  bool degenerate = false;
};

/// Name of the last conv layer in graph order, the default attribution site.
std::string default_target_layer(const nn::Network& net);

/// Gradient-weighted class activation map for one image ([C,H,W], values in
/// [0,1]). Channel weights are the spatial means of d(score)/d(activation);
/// the map is the ReLU of the weighted channel sum, max-normalized.
Heatmap gradcam(nn::Network& net, const Tensor& image, int64_t class_index,
                const std::string& target_layer = "");

/// Predicted class of one image (argmax of the output probabilities).
int64_t predict_class(nn::Network& net, const Tensor& image);

/// Bilinear resampling with half-pixel centers. grid is [h,w] f64.
Tensor upsample_bilinear(const Tensor& grid, int64_t out_h, int64_t out_w);

/// Piecewise-linear cold-to-hot color ramp, pinned so renders are stable.
/// Rows are {value, r, g, b}.
inline constexpr double kRamp[5][4] = {
    {0.00, 0.00, 0.00, 0.50},
    {0.25, 0.00, 0.60, 1.00},
    {0.50, 0.20, 1.00, 0.20},
    {0.75, 1.00, 0.80, 0.00},
    {1.00, 0.80, 0.00, 0.00},
};
void ramp_color(double v, double rgb[3]);

/// Alpha-blends the color-mapped heatmap over the image ([C,H,W], C==3).
/// opacity 0 returns the image bit-for-bit; 1 returns pure ramp colors.
Tensor overlay(const Tensor& image, const Heatmap& map, double opacity);

/// Fraction of heatmap mass falling inside the box after resampling the map
/// to image_size x image_size. A degenerate (all-zero) map scores 0.
double box_mass_fraction(const Heatmap& map, const data::BBox& box, int64_t image_size);

}  // namespace uroscan::cam

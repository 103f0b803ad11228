#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "coswin/model.hpp"

namespace coswin::saliency {

struct SaliencyResult {
  int predicted_class = -1;
  std::size_t grid_h = 0, grid_w = 0;  // token grid the CAM was computed on
  std::size_t out_h = 0, out_w = 0;    // input resolution
  std::vector<float> raw;              // CAM at input resolution, before min-max
  std::vector<unsigned char> bytes;    // min-max normalized to [0, 255]
};

// Grad-CAM at the final normalization layer: channel weights are the spatial
// mean of d(predicted-class logit)/d(activation), the map is
// relu(sum_d weight_d * activation_d), bilinearly upsampled to the input
// resolution and min-max normalized. A zero-range map normalizes to all
// zeros. The image must already carry the dataset normalization.
SaliencyResult grad_cam(CoSwinModel<float>& model, const Tensor<float>& image);

std::vector<float> bilinear_upsample(const std::vector<float>& src, std::size_t sh,
                                     std::size_t sw, std::size_t dh, std::size_t dw);

// Binary PGM, "P5", maxval 255.
void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<unsigned char>& bytes);

struct PnmImage {
  std::size_t h = 0, w = 0, c = 0;
  std::vector<float> pixels;  // [h, w, c] in [0, 1]
};

// P5 (grayscale) or P6 (RGB), maxval 255.
PnmImage read_pnm(const std::string& path);

}  // namespace coswin::saliency

#pragma once

// Planar float RGB images in [0,1], 8-bit PNG I/O (libpng) and an antialiased
// bilinear (tent-filter) resize. The resize widens the filter support by the
// scale factor when shrinking, matching the usual antialiased convention, so
// the resolution sweep is well defined.

#include <string>
#include <vector>

#include "tdam/tensor.hpp"

namespace tdam {

struct ImageF {
  int h = 0, w = 0;
  std::vector<float> data;  // 3 x h x w planar

  ImageF() = default;
  ImageF(int h_, int w_, float fill = 0.f)
      : h(h_), w(w_), data(static_cast<size_t>(3) * h_ * w_, fill) {}

  float& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * h + y) * w + x]; }
  float at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * h + y) * w + x];
  }
};

void write_png(const std::string& path, const ImageF& img);
ImageF read_png(const std::string& path);

ImageF resize_bilinear(const ImageF& src, int out_h, int out_w);

// single-channel map resize (same filter), used for CAM upsampling
std::vector<float> resize_plane(const std::vector<float>& src, int in_h, int in_w,
                                int out_h, int out_w);

// fixed 256-entry blue->cyan->yellow->red lookup table; documented constant so
// exported heatmaps are byte-reproducible
void colormap_jet(float t, float rgb[3]);

// batch tensor (B,3,H,W) <-> image conversions
ImageF tensor_to_image(const Tensor<float>& x, int batch_index);
Tensor<float> image_to_tensor(const ImageF& img);

}  // namespace tdam

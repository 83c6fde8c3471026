#include "tdam/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>

namespace tdam {

namespace {

uint8_t to_byte(float v) {
  const float c = v < 0.f ? 0.f : (v > 1.f ? 1.f : v);
  return static_cast<uint8_t>(std::lround(c * 255.f));
}

struct FileCloser {
  void operator()(FILE* f) const {
    if (f) std::fclose(f);
  }
};

}  // namespace

void write_png(const std::string& path, const ImageF& img) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw std::runtime_error(cat("cannot open ", path, " for writing"));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error(cat("libpng write error for ", path));
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.w, img.h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<uint8_t> row(static_cast<size_t>(img.w) * 3);
  for (int y = 0; y < img.h; ++y) {
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) row[x * 3 + c] = to_byte(img.at(c, y, x));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

ImageF read_png(const std::string& path) {
  std::unique_ptr<FILE, FileCloser> fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw std::runtime_error(cat("cannot open ", path));
  uint8_t sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw std::runtime_error(cat(path, " is not a PNG file"));
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw std::runtime_error("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw std::runtime_error(cat("libpng read error for ", path));
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  // normalize everything to 8-bit RGB
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8)
    png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  ImageF img(h, w);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(row[x * 3 + c]) / 255.f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace {

struct FilterWeights {
  std::vector<int> start;
  std::vector<int> count;
  std::vector<size_t> offset;
  std::vector<float> weights;  // normalized, flattened per output pixel
};

FilterWeights tent_weights(int in, int out) {
  FilterWeights fw;
  fw.start.resize(out);
  fw.count.resize(out);
  fw.offset.resize(out);
  const double scale = static_cast<double>(in) / out;
  const double fscale = std::max(1.0, scale);
  const double support = 1.0 * fscale;
  for (int i = 0; i < out; ++i) {
    const double center = (i + 0.5) * scale;
    int lo = static_cast<int>(std::floor(center - support + 0.5));
    int hi = static_cast<int>(std::floor(center + support + 0.5));
    lo = std::max(lo, 0);
    hi = std::min(hi, in);
    if (hi <= lo) {
      lo = std::min(std::max(0, static_cast<int>(center)), in - 1);
      hi = lo + 1;
    }
    fw.offset[i] = fw.weights.size();
    double total = 0;
    for (int j = lo; j < hi; ++j) {
      const double x = std::abs((j + 0.5 - center) / fscale);
      const double v = x < 1.0 ? 1.0 - x : 0.0;
      fw.weights.push_back(static_cast<float>(v));
      total += v;
    }
    if (total <= 0) {
      for (int j = lo; j < hi; ++j) fw.weights[fw.offset[i] + (j - lo)] = 1.f;
      total = hi - lo;
    }
    for (int j = lo; j < hi; ++j)
      fw.weights[fw.offset[i] + (j - lo)] =
          static_cast<float>(fw.weights[fw.offset[i] + (j - lo)] / total);
    fw.start[i] = lo;
    fw.count[i] = hi - lo;
  }
  return fw;
}

}  // namespace

std::vector<float> resize_plane(const std::vector<float>& src, int in_h, int in_w,
                                int out_h, int out_w) {
  if (in_h == out_h && in_w == out_w) return src;
  const FilterWeights wx = tent_weights(in_w, out_w);
  const FilterWeights wy = tent_weights(in_h, out_h);
  std::vector<float> tmp(static_cast<size_t>(in_h) * out_w, 0.f);
  for (int y = 0; y < in_h; ++y)
    for (int i = 0; i < out_w; ++i) {
      float acc = 0;
      const float* wp = wx.weights.data() + wx.offset[i];
      const float* sp = src.data() + static_cast<size_t>(y) * in_w + wx.start[i];
      for (int j = 0; j < wx.count[i]; ++j) acc += wp[j] * sp[j];
      tmp[static_cast<size_t>(y) * out_w + i] = acc;
    }
  std::vector<float> out(static_cast<size_t>(out_h) * out_w, 0.f);
  for (int i = 0; i < out_h; ++i) {
    const float* wp = wy.weights.data() + wy.offset[i];
    float* op = out.data() + static_cast<size_t>(i) * out_w;
    for (int j = 0; j < wy.count[i]; ++j) {
      const float wv = wp[j];
      const float* sp = tmp.data() + static_cast<size_t>(wy.start[i] + j) * out_w;
      for (int x = 0; x < out_w; ++x) op[x] += wv * sp[x];
    }
  }
  return out;
}

ImageF resize_bilinear(const ImageF& src, int out_h, int out_w) {
  ImageF dst(out_h, out_w);
  for (int c = 0; c < 3; ++c) {
    std::vector<float> plane(src.data.begin() + static_cast<size_t>(c) * src.h * src.w,
                             src.data.begin() + static_cast<size_t>(c + 1) * src.h * src.w);
    auto r = resize_plane(plane, src.h, src.w, out_h, out_w);
    std::copy(r.begin(), r.end(),
              dst.data.begin() + static_cast<size_t>(c) * out_h * out_w);
  }
  return dst;
}

void colormap_jet(float t, float rgb[3]) {
  const float v = t < 0.f ? 0.f : (t > 1.f ? 1.f : t);
  auto ramp = [](float x) { return x < 0.f ? 0.f : (x > 1.f ? 1.f : x); };
  rgb[0] = ramp(1.5f - std::fabs(4.f * v - 3.f));
  rgb[1] = ramp(1.5f - std::fabs(4.f * v - 2.f));
  rgb[2] = ramp(1.5f - std::fabs(4.f * v - 1.f));
}

ImageF tensor_to_image(const Tensor<float>& x, int batch_index) {
  if (x.shape.rank() != 4 || x.shape[1] != 3)
    throw std::invalid_argument(cat("tensor_to_image: want Bx3xHxW, got ", x.shape.str()));
  const int h = x.shape[2], w = x.shape[3];
  ImageF img(h, w);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) img.at(c, y, xx) = x.at(batch_index, c, y, xx);
  return img;
}

Tensor<float> image_to_tensor(const ImageF& img) {
  Tensor<float> t(Shape{1, 3, img.h, img.w});
  std::copy(img.data.begin(), img.data.end(), t.ptr());
  return t;
}

}  // namespace tdam

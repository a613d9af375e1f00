#include "btdm/image_io.hpp"

#include <png.h>

#include <cstdio>

namespace btdm {

void write_png_grid(const std::string& path, const std::vector<Tensor>& frames, int cols) {
  if (frames.empty()) throw TensorError("write_png_grid: no frames");
  int C = frames[0].dim(0), H = frames[0].dim(1), W = frames[0].dim(2);
  for (const auto& f : frames)
    if (!f.same_shape(frames[0])) throw TensorError("write_png_grid: mixed frame shapes");
  if (cols < 1) cols = (int)frames.size();
  int rows = ((int)frames.size() + cols - 1) / cols;
  const int pad = 2;
  int out_w = cols * (W + pad) + pad;
  int out_h = rows * (H + pad) + pad;

  std::vector<unsigned char> img((size_t)out_w * out_h * 3, 32);
  auto to_byte = [](float v) {
    float u = (v + 1.0f) * 0.5f;
    u = u < 0 ? 0 : (u > 1 ? 1 : u);
    return (unsigned char)(u * 255.0f + 0.5f);
  };
  for (size_t idx = 0; idx < frames.size(); ++idx) {
    int r = (int)idx / cols, c = (int)idx % cols;
    int oy = pad + r * (H + pad), ox = pad + c * (W + pad);
    const Tensor& f = frames[idx];
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j)
        for (int ch = 0; ch < 3; ++ch) {
          float v = C == 1 ? f[(std::int64_t)i * W + j]
                           : f[((std::int64_t)std::min(ch, C - 1) * H + i) * W + j];
          img[((size_t)(oy + i) * out_w + ox + j) * 3 + ch] = to_byte(v);
        }
  }

  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw TensorError("write_png_grid: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw TensorError("write_png_grid: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, out_w, out_h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < out_h; ++y) png_write_row(png, img.data() + (size_t)y * out_w * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

}  // namespace btdm

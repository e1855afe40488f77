#include "lprobe/png.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <png.h>

#include "lprobe/error.hpp"

namespace lprobe {

namespace {

Tensor chw(const Tensor& image) {
  if (image.rank() == 4 && image.dim(0) == 1)
    return image.reshaped(Shape{image.dim(1), image.dim(2), image.dim(3)});
  if (image.rank() == 3) return image;
  throw ShapeError("image must be [C, H, W] or [1, C, H, W], got " + shape_to_string(image.shape()));
}

void write_to_string(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), length);
}

void flush_noop(png_structp) {}

}  // namespace

std::string encode_png(const Tensor& image) {
  const Tensor img = chw(image);
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (c != 1 && c != 3) throw ShapeError("PNG export supports 1 or 3 channels, got " + std::to_string(c));

  std::vector<png_byte> pixels(h * w * c);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t ch = 0; ch < c; ++ch) {
        float v = img[(ch * h + y) * w + x];
        if (!std::isfinite(v)) v = 0.0f;
        v = std::clamp(v, 0.0f, 1.0f);
        pixels[(y * w + x) * c + ch] = static_cast<png_byte>(std::lround(v * 255.0f));
      }

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw Error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("png_create_info_struct failed");
  }
  std::string out;
  std::vector<png_bytep> rows(h);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG encoding failed");
  }
  png_set_write_fn(png, &out, write_to_string, flush_noop);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  for (std::size_t y = 0; y < h; ++y) rows[y] = pixels.data() + y * w * c;
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

void write_png(const std::filesystem::path& path, const Tensor& image) {
  const std::string bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Tensor difference_image(const Tensor& unperturbed, const Tensor& perturbed, float scale) {
  const Tensor a = chw(unperturbed);
  const Tensor b = chw(perturbed);
  if (a.shape() != b.shape()) throw ShapeError("difference of images with different shapes");
  Tensor d(a.shape());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = 0.5f + scale * (b[i] - a[i]);
  return d;
}

Tensor triple_grid(const std::vector<std::pair<Tensor, Tensor>>& pairs, float difference_scale, std::size_t gap) {
  if (pairs.empty()) throw ShapeError("no images to render");
  const Tensor first = chw(pairs.front().first);
  const std::size_t c = first.dim(0), h = first.dim(1), w = first.dim(2);
  const std::size_t rows = pairs.size();
  const std::size_t total_h = rows * h + (rows + 1) * gap;
  const std::size_t total_w = 3 * w + 4 * gap;
  Tensor grid(Shape{c, total_h, total_w}, 1.0f);
  auto blit = [&](const Tensor& img, std::size_t row, std::size_t col) {
    if (img.shape() != first.shape()) throw ShapeError("grid images must share one shape");
    const std::size_t oy = gap + row * (h + gap), ox = gap + col * (w + gap);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x)
          grid[(ch * total_h + oy + y) * total_w + ox + x] = img[(ch * h + y) * w + x];
  };
  for (std::size_t r = 0; r < rows; ++r) {
    const Tensor a = chw(pairs[r].first);
    const Tensor b = chw(pairs[r].second);
    blit(a, r, 0);
    blit(b, r, 1);
    blit(difference_image(a, b, difference_scale), r, 2);
  }
  return grid;
}

}  // namespace lprobe

#pragma once

#include <jpeglib.h>

#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "tal/common.hpp"
#include "tal/tensor.hpp"

namespace tal {

// 8-bit interleaved RGB.
struct Image {
  int h = 0, w = 0;
  std::vector<unsigned char> px;  // h*w*3

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), px(static_cast<std::size_t>(h_) * w_ * 3, 0) {}

  unsigned char* pixel(int y, int x) { return px.data() + (static_cast<std::size_t>(y) * w + x) * 3; }
  const unsigned char* pixel(int y, int x) const {
    return px.data() + (static_cast<std::size_t>(y) * w + x) * 3;
  }
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  check_data(os.good(), "cannot open for writing: " + path);
  os << "P6\n" << img.w << " " << img.h << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.px.data()),
           static_cast<std::streamsize>(img.px.size()));
  check_data(os.good(), "short write: " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check_data(is.good(), "cannot open: " + path);
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  check_data(magic == "P6" && maxval == 255 && w > 0 && h > 0, "bad ppm header: " + path);
  is.get();  // single whitespace after header
  Image img(h, w);
  is.read(reinterpret_cast<char*>(img.px.data()), static_cast<std::streamsize>(img.px.size()));
  check_data(is.gcount() == static_cast<std::streamsize>(img.px.size()), "short ppm: " + path);
  return img;
}

namespace detail {
struct JpegErrorMgr {
  jpeg_error_mgr pub;
  std::jmp_buf jump;
};
inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}
}  // namespace detail

inline void write_jpeg(const std::string& path, const Image& img, int quality = 95) {
  FILE* f = std::fopen(path.c_str(), "wb");
  check_data(f != nullptr, "cannot open for writing: " + path);
  jpeg_compress_struct cinfo;
  detail::JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = detail::jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_compress(&cinfo);
    std::fclose(f);
    throw DataError("jpeg encode failed: " + path);
  }
  jpeg_create_compress(&cinfo);
  jpeg_stdio_dest(&cinfo, f);
  cinfo.image_width = static_cast<JDIMENSION>(img.w);
  cinfo.image_height = static_cast<JDIMENSION>(img.h);
  cinfo.input_components = 3;
  cinfo.in_color_space = JCS_RGB;
  jpeg_set_defaults(&cinfo);
  jpeg_set_quality(&cinfo, quality, TRUE);
  jpeg_start_compress(&cinfo, TRUE);
  std::vector<unsigned char> row(static_cast<std::size_t>(img.w) * 3);
  while (cinfo.next_scanline < cinfo.image_height) {
    std::memcpy(row.data(), img.px.data() + static_cast<std::size_t>(cinfo.next_scanline) * img.w * 3,
                row.size());
    JSAMPROW rp = row.data();
    jpeg_write_scanlines(&cinfo, &rp, 1);
  }
  jpeg_finish_compress(&cinfo);
  jpeg_destroy_compress(&cinfo);
  std::fclose(f);
}

inline Image read_jpeg(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  check_data(f != nullptr, "cannot open: " + path);
  jpeg_decompress_struct cinfo;
  detail::JpegErrorMgr jerr;
  cinfo.err = jpeg_std_error(&jerr.pub);
  jerr.pub.error_exit = detail::jpeg_error_exit;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    std::fclose(f);
    throw DataError("jpeg decode failed: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  Image img(static_cast<int>(cinfo.output_height), static_cast<int>(cinfo.output_width));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW rp = img.px.data() + static_cast<std::size_t>(cinfo.output_scanline) * img.w * 3;
    jpeg_read_scanlines(&cinfo, &rp, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  std::fclose(f);
  return img;
}

inline bool ends_with(const std::string& s, const std::string& suf) {
  return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

inline Image read_image(const std::string& path) {
  if (ends_with(path, ".ppm")) return read_ppm(path);
  if (ends_with(path, ".jpg") || ends_with(path, ".jpeg")) return read_jpeg(path);
  throw DataError("unsupported image format: " + path);
}

inline void write_image(const std::string& path, const Image& img) {
  if (ends_with(path, ".ppm")) return write_ppm(path, img);
  if (ends_with(path, ".jpg") || ends_with(path, ".jpeg")) return write_jpeg(path, img);
  throw DataError("unsupported image format: " + path);
}

// Model input normalization constants live in the experiment config; images are
// stored as 8-bit RGB and mapped to zero-mean unit-variance floats here.
inline void image_to_tensor(const Image& img, Tensor4& out, int b, double mean, double stddev) {
  check_arg(img.h == out.h && img.w == out.w && out.c == 3, "image/tensor shape mismatch");
  const double inv = 1.0 / stddev;
  for (int ch = 0; ch < 3; ++ch) {
    double* dst = out.channel(b, ch);
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x)
        dst[y * img.w + x] = (img.pixel(y, x)[ch] / 255.0 - mean) * inv;
  }
}

inline Tensor4 images_to_tensor(const std::vector<Image>& imgs, double mean, double stddev) {
  check_arg(!imgs.empty(), "empty image batch");
  Tensor4 t(static_cast<int>(imgs.size()), 3, imgs[0].h, imgs[0].w);
  for (std::size_t i = 0; i < imgs.size(); ++i)
    image_to_tensor(imgs[i], t, static_cast<int>(i), mean, stddev);
  return t;
}

}  // namespace tal

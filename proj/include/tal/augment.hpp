#pragma once

#include <algorithm>
#include <cmath>

#include "tal/image.hpp"
#include "tal/rng.hpp"

namespace tal {

struct AugmentConfig {
  double flip_p = 0.5;
  int pad = 4;               // edge-replicate pad before the random crop
  double brightness = 0.2;   // scale in [1-b, 1+b]
  double saturation = 0.2;   // blend toward gray in [1-s, 1+s]
  double hue = 0.05;         // rotation in turns, [-hue, +hue]
};

inline Image flip_horizontal(const Image& img) {
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const unsigned char* s = img.pixel(y, img.w - 1 - x);
      unsigned char* d = out.pixel(y, x);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  return out;
}

// Edge-replicate pad by `pad`, then crop the original size at offset (dy, dx);
// offsets range over [0, 2*pad].
inline Image pad_crop(const Image& img, int pad, int dy, int dx) {
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const int sy = std::clamp(y + dy - pad, 0, img.h - 1);
      const int sx = std::clamp(x + dx - pad, 0, img.w - 1);
      const unsigned char* s = img.pixel(sy, sx);
      unsigned char* d = out.pixel(y, x);
      d[0] = s[0];
      d[1] = s[1];
      d[2] = s[2];
    }
  return out;
}

inline unsigned char clamp_u8(double v) {
  return static_cast<unsigned char>(std::clamp(v, 0.0, 255.0) + 0.5);
}

// Hue rotation around the gray axis (standard RGB rotation approximation),
// then saturation blend toward luma, then brightness scale.
inline Image color_jitter(const Image& img, double hue_turns, double sat_scale,
                          double bright_scale) {
  const double a = hue_turns * 2.0 * 3.14159265358979323846;
  const double c = std::cos(a), s = std::sin(a);
  double m[3][3] = {
      {0.299 + 0.701 * c + 0.168 * s, 0.587 - 0.587 * c + 0.330 * s,
       0.114 - 0.114 * c - 0.497 * s},
      {0.299 - 0.299 * c - 0.328 * s, 0.587 + 0.413 * c + 0.035 * s,
       0.114 - 0.114 * c + 0.292 * s},
      {0.299 - 0.300 * c + 1.250 * s, 0.587 - 0.588 * c - 1.050 * s,
       0.114 + 0.886 * c - 0.203 * s}};
  Image out(img.h, img.w);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const unsigned char* p = img.pixel(y, x);
      double rgb[3];
      for (int k = 0; k < 3; ++k)
        rgb[k] = m[k][0] * p[0] + m[k][1] * p[1] + m[k][2] * p[2];
      const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
      unsigned char* d = out.pixel(y, x);
      for (int k = 0; k < 3; ++k)
        d[k] = clamp_u8((luma + (rgb[k] - luma) * sat_scale) * bright_scale);
    }
  return out;
}

// Train-split augmentation: horizontal flip, pad+crop, bounded color jitter.
// Fully deterministic under the caller's rng.
inline Image augment(const Image& img, const AugmentConfig& cfg, Rng& rng) {
  Image out = img;
  if (cfg.flip_p > 0.0 && rng.bernoulli(cfg.flip_p)) out = flip_horizontal(out);
  if (cfg.pad > 0) {
    const int dy = static_cast<int>(rng.uniform_int(0, 2 * cfg.pad));
    const int dx = static_cast<int>(rng.uniform_int(0, 2 * cfg.pad));
    out = pad_crop(out, cfg.pad, dy, dx);
  }
  if (cfg.hue > 0.0 || cfg.saturation > 0.0 || cfg.brightness > 0.0) {
    const double h = cfg.hue > 0.0 ? rng.uniform(-cfg.hue, cfg.hue) : 0.0;
    const double s = cfg.saturation > 0.0
                         ? rng.uniform(1.0 - cfg.saturation, 1.0 + cfg.saturation)
                         : 1.0;
    const double b = cfg.brightness > 0.0
                         ? rng.uniform(1.0 - cfg.brightness, 1.0 + cfg.brightness)
                         : 1.0;
    out = color_jitter(out, h, s, b);
  }
  return out;
}

}  // namespace tal

#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <vector>

#include "tal/augment.hpp"
#include "tal/dataset.hpp"
#include "tal/rng.hpp"

namespace tal {

// Per-domain rendering style. Domains are told apart by background color and
// texture, global hue/contrast, and noise level.
struct DomainStyle {
  std::array<unsigned char, 3> bg{128, 128, 128};
  int texture = 0;        // 0 solid, 1 h-stripes, 2 checker, 3 v-gradient
  double hue_turns = 0.0; // global hue rotation
  double contrast = 1.0;  // around mid-gray
  double brightness = 0.0;
  double noise = 4.0;     // gaussian stddev, 8-bit units
};

inline std::vector<DomainStyle> default_styles(int num_domains) {
  // num_domains training styles plus one held-out style at the end
  std::vector<DomainStyle> all = {
      {{150, 70, 60}, 0, 0.00, 1.00, 0.0, 4.0},
      {{60, 140, 70}, 1, 0.06, 0.90, 10.0, 5.0},
      {{65, 80, 150}, 2, -0.06, 1.10, -10.0, 4.0},
      {{120, 120, 60}, 3, 0.12, 0.85, 15.0, 6.0},
      {{140, 60, 130}, 1, -0.12, 1.15, -15.0, 5.0},
      {{70, 130, 130}, 2, 0.18, 0.95, 5.0, 6.0},
  };
  std::vector<DomainStyle> out;
  for (int i = 0; i <= num_domains; ++i)
    out.push_back(all[static_cast<std::size_t>(i) % all.size()]);
  return out;
}

struct SyntheticConfig {
  int num_domains = 3;
  int ids_per_domain = 50;
  int imgs_per_id = 8;
  int heldout_ids = 30;
  int heldout_imgs_per_id = 6;
  int height = 96, width = 32;
  int cameras = 2;
  double min_channel_gap = 8.0;  // expected per-channel mean separation, 8-bit
  std::uint64_t seed = 1;
  std::vector<DomainStyle> styles;  // size num_domains+1; defaults if empty

  void validate() const {
    check_config(num_domains >= 1, "synthetic: need >= 1 domain");
    check_config(ids_per_domain >= 2, "synthetic: need >= 2 ids per domain");
    check_config(imgs_per_id >= 1, "synthetic: need >= 1 image per id");
    check_config(heldout_ids >= 2, "synthetic: need >= 2 held-out ids");
    check_config(heldout_imgs_per_id >= cameras + 1,
                 "synthetic: held-out ids need enough images for a query/gallery split");
    check_config(cameras >= 2, "synthetic: need >= 2 cameras");
    check_config(height >= 16 && width >= 8, "synthetic: image size too small");
  }
};

struct SyntheticOutput {
  std::vector<ReidDataset> train_domains;  // domain ids 1..K
  ReidDataset heldout_query, heldout_gallery;  // domain id K+1
};

namespace detail {

// A person identity is a color triplet (head, torso, legs) plus shape
// parameters, stable across that identity's images.
struct Figure {
  std::array<unsigned char, 3> head, torso, legs;
  double torso_w;   // fraction of width
  double head_r;    // fraction of width
  double leg_gap;   // fraction of torso width
  double height_f;  // fraction of image height
};

inline Figure random_figure(Rng& rng) {
  Figure f;
  auto bright = [&rng]() -> unsigned char {
    return static_cast<unsigned char>(rng.uniform_int(40, 255));
  };
  f.head = {bright(), bright(), bright()};
  f.torso = {bright(), bright(), bright()};
  f.legs = {bright(), bright(), bright()};
  f.torso_w = rng.uniform(0.40, 0.72);
  f.head_r = rng.uniform(0.14, 0.24);
  f.leg_gap = rng.uniform(0.15, 0.45);
  f.height_f = rng.uniform(0.80, 0.95);
  return f;
}

inline void draw_background(Image& img, const DomainStyle& st, Rng& rng) {
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      double f = 1.0;
      switch (st.texture) {
        case 1: f = (y / 4) % 2 == 0 ? 1.0 : 0.78; break;
        case 2: f = ((y / 4) + (x / 4)) % 2 == 0 ? 1.0 : 0.80; break;
        case 3: f = 0.7 + 0.5 * y / img.h; break;
        default: break;
      }
      unsigned char* p = img.pixel(y, x);
      for (int k = 0; k < 3; ++k) p[k] = clamp_u8(st.bg[static_cast<std::size_t>(k)] * f);
    }
  (void)rng;
}

inline void fill_rect(Image& img, int y0, int y1, int x0, int x1,
                      const std::array<unsigned char, 3>& col) {
  y0 = std::clamp(y0, 0, img.h);
  y1 = std::clamp(y1, 0, img.h);
  x0 = std::clamp(x0, 0, img.w);
  x1 = std::clamp(x1, 0, img.w);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) {
      unsigned char* p = img.pixel(y, x);
      p[0] = col[0];
      p[1] = col[1];
      p[2] = col[2];
    }
}

inline void fill_circle(Image& img, double cy, double cx, double r,
                        const std::array<unsigned char, 3>& col) {
  for (int y = std::max(0, static_cast<int>(cy - r)); y <= std::min(img.h - 1, static_cast<int>(cy + r)); ++y)
    for (int x = std::max(0, static_cast<int>(cx - r)); x <= std::min(img.w - 1, static_cast<int>(cx + r)); ++x)
      if ((y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) {
        unsigned char* p = img.pixel(y, x);
        p[0] = col[0];
        p[1] = col[1];
        p[2] = col[2];
      }
}

inline unsigned char style_pixel(double v, const DomainStyle& st) {
  return clamp_u8((v - 128.0) * st.contrast + 128.0 + st.brightness);
}

// Render one image of one identity under a camera viewpoint and the domain
// style. Camera changes scale/shift; per-image jitter keeps instances of one
// identity from being byte-identical.
inline Image render(const Figure& fig, const DomainStyle& st, int camera, int h, int w, Rng& rng) {
  Image img(h, w);
  draw_background(img, st, rng);
  const double cam_scale = 1.0 - 0.08 * (camera - 1);
  const double scale = cam_scale * rng.uniform(0.94, 1.06);
  const double cx = w * 0.5 + (camera - 1) * w * 0.04 + rng.uniform(-0.05, 0.05) * w;
  const double fh = fig.height_f * h * scale;
  const double top = (h - fh) * 0.5;
  const double head_r = fig.head_r * w * scale;
  const double head_cy = top + head_r;
  const double torso_top = top + 2.0 * head_r;
  const double torso_bot = top + fh * 0.55;
  const double torso_hw = 0.5 * fig.torso_w * w * scale;
  const double leg_bot = top + fh;
  const double gap_hw = fig.leg_gap * torso_hw * 0.5;
  fill_circle(img, head_cy, cx, head_r, fig.head);
  fill_rect(img, static_cast<int>(torso_top), static_cast<int>(torso_bot),
            static_cast<int>(cx - torso_hw), static_cast<int>(cx + torso_hw), fig.torso);
  fill_rect(img, static_cast<int>(torso_bot), static_cast<int>(leg_bot),
            static_cast<int>(cx - torso_hw), static_cast<int>(cx - gap_hw), fig.legs);
  fill_rect(img, static_cast<int>(torso_bot), static_cast<int>(leg_bot),
            static_cast<int>(cx + gap_hw), static_cast<int>(cx + torso_hw), fig.legs);
  // domain style: hue, contrast/brightness, noise
  if (st.hue_turns != 0.0) img = color_jitter(img, st.hue_turns, 1.0, 1.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      unsigned char* p = img.pixel(y, x);
      for (int k = 0; k < 3; ++k)
        p[k] = clamp_u8(style_pixel(static_cast<double>(p[k]), st) + rng.normal(0.0, st.noise));
    }
  return img;
}

}  // namespace detail

// Procedural multi-domain stand-in for real re-id benchmarks: K training
// domains with disjoint identities plus one held-out domain in an unseen
// style, split into query (one image per camera per id) and gallery.
inline SyntheticOutput generate_synthetic(const SyntheticConfig& cfg_in) {
  SyntheticConfig cfg = cfg_in;
  cfg.validate();
  if (cfg.styles.empty()) cfg.styles = default_styles(cfg.num_domains);
  check_config(static_cast<int>(cfg.styles.size()) >= cfg.num_domains + 1,
               "synthetic: need num_domains+1 styles");
  Rng master(cfg.seed);
  SyntheticOutput out;
  auto make_domain = [&](int domain_1based, const DomainStyle& st, int ids, int imgs,
                         Split split_mode) {
    // split_mode kTrain -> one train set; otherwise fills query+gallery
    ReidDataset train;
    train.split = Split::kTrain;
    Rng drng = master.child(static_cast<std::uint64_t>(domain_1based) * 1000003ull);
    for (int id = 0; id < ids; ++id) {
      Rng idrng = drng.child(static_cast<std::uint64_t>(id) * 7919ull + 17ull);
      const detail::Figure fig = detail::random_figure(idrng);
      for (int j = 0; j < imgs; ++j) {
        const int cam = j % cfg.cameras + 1;
        Rng irng = idrng.child(static_cast<std::uint64_t>(j) * 104729ull + 29ull);
        ReidRecord r;
        r.pixels = detail::render(fig, st, cam, cfg.height, cfg.width, irng);
        r.raw_id = id + 1;
        r.id = id;
        r.camera = cam;
        r.domain = domain_1based;
        if (split_mode == Split::kTrain) {
          train.records.push_back(std::move(r));
        } else if (j < cfg.cameras) {
          out.heldout_query.records.push_back(std::move(r));
        } else {
          out.heldout_gallery.records.push_back(std::move(r));
        }
      }
    }
    if (split_mode == Split::kTrain) {
      train.num_ids = ids;
      train.build_index();
      out.train_domains.push_back(std::move(train));
    }
  };
  for (int d = 1; d <= cfg.num_domains; ++d)
    make_domain(d, cfg.styles[static_cast<std::size_t>(d - 1)], cfg.ids_per_domain,
                cfg.imgs_per_id, Split::kTrain);
  out.heldout_query.split = Split::kQuery;
  out.heldout_gallery.split = Split::kGallery;
  make_domain(cfg.num_domains + 1, cfg.styles[static_cast<std::size_t>(cfg.num_domains)],
              cfg.heldout_ids, cfg.heldout_imgs_per_id, Split::kQuery);
  out.heldout_query.num_ids = cfg.heldout_ids;
  out.heldout_gallery.num_ids = cfg.heldout_ids;
  out.heldout_query.build_index();
  out.heldout_gallery.build_index();
  return out;
}

// Writes a generated corpus as a market-style directory tree:
//   root/domain01/bounding_box_train/0001_c1s1_000001_00.jpg
//   root/heldout/query/...  root/heldout/bounding_box_test/...
inline void write_market_tree(const std::string& root, const SyntheticOutput& data,
                              const std::string& ext = ".jpg") {
  namespace fs = std::filesystem;
  auto write_split = [&](const fs::path& dir, const std::vector<ReidRecord>& records) {
    fs::create_directories(dir);
    int frame = 0;
    for (const auto& r : records) {
      const std::string name = market_name(r.raw_id, r.camera, ++frame, 0, ext);
      write_image((dir / name).string(), r.pixels);
    }
  };
  for (std::size_t d = 0; d < data.train_domains.size(); ++d) {
    char sub[32];
    std::snprintf(sub, sizeof(sub), "domain%02zu", d + 1);
    write_split(fs::path(root) / sub / "bounding_box_train", data.train_domains[d].records);
  }
  write_split(fs::path(root) / "heldout" / "query", data.heldout_query.records);
  write_split(fs::path(root) / "heldout" / "bounding_box_test", data.heldout_gallery.records);
}

}  // namespace tal

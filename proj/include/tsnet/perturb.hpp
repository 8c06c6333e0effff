#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tsnet/streams.hpp"
#include "tsnet/tensor.hpp"
#include "tsnet/util.hpp"

namespace tsnet {

enum class PerturbKind {
  identity,
  brightness,
  rotate_cw45,
  rotate_ccw45,
  scale_center_crop,
  filter_yellow,
  filter_red,
};

inline const char* perturb_name(PerturbKind k) {
  switch (k) {
    case PerturbKind::identity: return "identity";
    case PerturbKind::brightness: return "brightness";
    case PerturbKind::rotate_cw45: return "rotate_cw45";
    case PerturbKind::rotate_ccw45: return "rotate_ccw45";
    case PerturbKind::scale_center_crop: return "scale_center_crop";
    case PerturbKind::filter_yellow: return "filter_yellow";
    default: return "filter_red";
  }
}

inline PerturbKind perturb_from_name(const std::string& s) {
  for (PerturbKind k :
       {PerturbKind::identity, PerturbKind::brightness, PerturbKind::rotate_cw45,
        PerturbKind::rotate_ccw45, PerturbKind::scale_center_crop, PerturbKind::filter_yellow,
        PerturbKind::filter_red}) {
    if (s == perturb_name(k)) return k;
  }
  throw ConfigError("unknown perturbation kind '" + s + "'");
}

/// Categorical distribution over perturbation kinds; probabilities must sum
/// to 1 and each kind may appear at most once.
struct PerturbationTable {
  std::vector<std::pair<PerturbKind, double>> rows;

  void validate() const {
    if (rows.empty()) throw ConfigError("perturbation table is empty");
    double total = 0.0;
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto& [kind, prob] = rows[i];
      if (prob < 0.0 || prob > 1.0) {
        throw ConfigError(std::string("probability out of range for ") + perturb_name(kind));
      }
      for (size_t j = i + 1; j < rows.size(); ++j) {
        if (rows[j].first == kind) {
          throw ConfigError(std::string("duplicate table row for ") + perturb_name(kind));
        }
      }
      total += prob;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw ConfigError("perturbation probabilities sum to " + std::to_string(total));
    }
  }
};

/// brightness 15%, rotate cw 45 15%, scale+crop 15%, unchanged 55%.
inline PerturbationTable image_modification_table() {
  return {{{PerturbKind::brightness, 0.15},
           {PerturbKind::rotate_cw45, 0.15},
           {PerturbKind::scale_center_crop, 0.15},
           {PerturbKind::identity, 0.55}}};
}

/// yellow 10%, red 10%, brightness 10%, rotate ccw 45 10%, unchanged 60%.
inline PerturbationTable video_modification_table() {
  return {{{PerturbKind::filter_yellow, 0.10},
           {PerturbKind::filter_red, 0.10},
           {PerturbKind::brightness, 0.10},
           {PerturbKind::rotate_ccw45, 0.10},
           {PerturbKind::identity, 0.60}}};
}

inline PerturbationTable table_by_name(const std::string& name) {
  if (name == "image") return image_modification_table();
  if (name == "video") return video_modification_table();
  if (name == "identity") return {{{PerturbKind::identity, 1.0}}};
  throw ConfigError("unknown perturbation table '" + name + "'");
}

/// Inverse-CDF draw from a per-item stream keyed by (seed, item_id);
/// independent of the order items are visited in.
inline PerturbKind draw_kind(const PerturbationTable& table, const std::string& item_id,
                             uint64_t seed) {
  table.validate();
  Rng rng(stream_seed(seed, item_id));
  const double u = rng.uniform();
  double acc = 0.0;
  for (const auto& [kind, prob] : table.rows) {
    acc += prob;
    if (u < acc) return kind;
  }
  return table.rows.back().first;
}

// ---------------------------------------------------------------------------
// Pixel operations (CHW images, values in [0,1])
// ---------------------------------------------------------------------------

/// Adjustable magnitudes for the perturbation kinds.
struct PerturbOptions {
  double brightness_factor = 0.5;
  double scale = 1.5;
  double filter_alpha = 0.3;
};

inline Tensor brightness(const Tensor& image, double factor = 0.5) {
  if (factor <= 0.0 || factor > 1.0) {
    throw ConfigError("brightness factor must lie in (0,1], got " + std::to_string(factor));
  }
  Tensor out(image.dims);
  for (size_t i = 0; i < image.numel(); ++i) out.data[i] = image.data[i] * factor;
  return out;
}

namespace detail {

/// Bilinear sample with zero (black) outside the source.
inline double sample_bilinear(const Tensor& img, size_t c, double y, double x) {
  const long h = static_cast<long>(img.dims[1]), w = static_cast<long>(img.dims[2]);
  const long y0 = static_cast<long>(std::floor(y)), x0 = static_cast<long>(std::floor(x));
  const double fy = y - static_cast<double>(y0), fx = x - static_cast<double>(x0);
  double acc = 0.0;
  for (int dy = 0; dy <= 1; ++dy) {
    for (int dx = 0; dx <= 1; ++dx) {
      const long yy = y0 + dy, xx = x0 + dx;
      if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
      const double wgt = (dy ? fy : 1.0 - fy) * (dx ? fx : 1.0 - fx);
      acc += wgt * img.at(c, static_cast<size_t>(yy), static_cast<size_t>(xx));
    }
  }
  return std::min(1.0, std::max(0.0, acc));
}

}  // namespace detail

/// 45-degree rotation about the image center, bilinear resampling, black
/// fill outside the source; output dims match input dims.
inline Tensor rotate45(const Tensor& image, bool clockwise) {
  if (image.rank() != 3) throw DimensionError("rotate45 expects CHW, got " + shape_str(image.dims));
  const size_t c = image.dims[0], h = image.dims[1], w = image.dims[2];
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cs = std::sqrt(0.5);  // cos 45 = sin 45
  Tensor out(image.dims);
  for (size_t ci = 0; ci < c; ++ci)
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x) {
        const double dy = static_cast<double>(y) - cy;
        const double dx = static_cast<double>(x) - cx;
        // y grows downward, so +45 in these coordinates reads as clockwise
        double sx, sy;
        if (clockwise) {
          sx = cs * dx + cs * dy;
          sy = -cs * dx + cs * dy;
        } else {
          sx = cs * dx - cs * dy;
          sy = cs * dx + cs * dy;
        }
        out.at(ci, y, x) = detail::sample_bilinear(image, ci, cy + sy, cx + sx);
      }
  return out;
}

struct ScaleCropGeometry {
  size_t scaled_h, scaled_w;
  size_t offset_y, offset_x;
};

inline ScaleCropGeometry scale_crop_geometry(size_t h, size_t w, double scale) {
  if (scale <= 1.0) throw ConfigError("scale must exceed 1, got " + std::to_string(scale));
  const size_t sh = static_cast<size_t>(std::llround(static_cast<double>(h) * scale));
  const size_t sw = static_cast<size_t>(std::llround(static_cast<double>(w) * scale));
  return {sh, sw, (sh - h) / 2, (sw - w) / 2};
}

/// Bilinear upscale by `scale`, then central crop back to the input dims.
inline Tensor scale_center_crop(const Tensor& image, double scale = 1.5) {
  if (image.rank() != 3) {
    throw DimensionError("scale_center_crop expects CHW, got " + shape_str(image.dims));
  }
  const size_t c = image.dims[0], h = image.dims[1], w = image.dims[2];
  const ScaleCropGeometry g = scale_crop_geometry(h, w, scale);
  const double sy = static_cast<double>(h) / static_cast<double>(g.scaled_h);
  const double sx = static_cast<double>(w) / static_cast<double>(g.scaled_w);
  Tensor out(image.dims);
  for (size_t ci = 0; ci < c; ++ci)
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x) {
        const double src_y = (static_cast<double>(y + g.offset_y) + 0.5) * sy - 0.5;
        const double src_x = (static_cast<double>(x + g.offset_x) + 0.5) * sx - 0.5;
        out.at(ci, y, x) = detail::sample_bilinear(image, ci, src_y, src_x);
      }
  return out;
}

/// Alpha-blend toward a pure tint: yellow (1,1,0) or red (1,0,0).
inline Tensor color_filter(const Tensor& image, PerturbKind color, double alpha = 0.3) {
  if (image.rank() != 3 || image.dims[0] != 3) {
    throw DimensionError("color_filter expects a 3-channel image, got " + shape_str(image.dims));
  }
  if (alpha < 0.0 || alpha > 1.0) {
    throw ConfigError("filter alpha must lie in [0,1], got " + std::to_string(alpha));
  }
  double tint[3];
  if (color == PerturbKind::filter_yellow) {
    tint[0] = 1.0, tint[1] = 1.0, tint[2] = 0.0;
  } else if (color == PerturbKind::filter_red) {
    tint[0] = 1.0, tint[1] = 0.0, tint[2] = 0.0;
  } else {
    throw ConfigError(std::string("not a color filter kind: ") + perturb_name(color));
  }
  const size_t plane = image.dims[1] * image.dims[2];
  Tensor out(image.dims);
  for (size_t ch = 0; ch < 3; ++ch)
    for (size_t i = 0; i < plane; ++i) {
      out.data[ch * plane + i] = (1.0 - alpha) * image.data[ch * plane + i] + alpha * tint[ch];
    }
  return out;
}

inline Tensor apply_perturbation(const Tensor& image, PerturbKind kind,
                                 const PerturbOptions& opt = {}) {
  switch (kind) {
    case PerturbKind::identity: return image;
    case PerturbKind::brightness: return brightness(image, opt.brightness_factor);
    case PerturbKind::rotate_cw45: return rotate45(image, true);
    case PerturbKind::rotate_ccw45: return rotate45(image, false);
    case PerturbKind::scale_center_crop: return scale_center_crop(image, opt.scale);
    case PerturbKind::filter_yellow: return color_filter(image, kind, opt.filter_alpha);
    default: return color_filter(image, kind, opt.filter_alpha);
  }
}

/// One kind applied uniformly to every frame of the clip.
inline VideoClip perturb_clip(const VideoClip& clip, PerturbKind kind,
                              const PerturbOptions& opt = {}) {
  VideoClip out = clip;
  for (Tensor& f : out.frames) f = apply_perturbation(f, kind, opt);
  return out;
}

/// Replayable record of one item's draw.
struct PerturbRecord {
  std::string item_id;
  PerturbKind kind;
  uint64_t seed;

  std::string to_csv_row() const {
    return item_id + "," + perturb_name(kind) + "," + std::to_string(seed);
  }
};

struct PerturbedDataset {
  std::vector<VideoClip> items;
  std::vector<PerturbRecord> records;
};

/// Seeded modification of a whole dataset: one independent draw per item,
/// the chosen kind applied to every frame of that item.
inline PerturbedDataset perturb_dataset(const std::vector<VideoClip>& items,
                                        const PerturbationTable& table, uint64_t seed,
                                        const PerturbOptions& opt = {}) {
  table.validate();
  PerturbedDataset out;
  out.items.resize(items.size());
  out.records.resize(items.size());
  parallel_items(items.size(), [&](size_t i) {
    const PerturbKind kind = draw_kind(table, items[i].clip_id, seed);
    out.items[i] = perturb_clip(items[i], kind, opt);
    out.records[i] = {items[i].clip_id, kind, seed};
  });
  return out;
}

}  // namespace tsnet

// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>

namespace mkc {

namespace {

constexpr std::uint64_t kSaltSample = 0x53414d50;  // per-sample image streams
constexpr std::uint64_t kSaltLq = 0x4c515151;      // LQ assignment
constexpr std::uint64_t kSaltSplit = 0x53504c54;   // split shuffles
constexpr std::uint64_t kSaltRatio = 0x52415431;   // LQ-ratio subsampling

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

/// Largest-remainder allocation of `total` into quotas proportional to
/// `weights` (ties broken by lower index).
std::vector<Dim> largest_remainder(const std::vector<double>& weights, Dim total) {
  const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<Dim> counts(weights.size(), 0);
  std::vector<std::pair<double, size_t>> fracs;
  Dim assigned = 0;
  for (size_t i = 0; i < weights.size(); ++i) {
    const double q = wsum > 0 ? weights[i] / wsum * static_cast<double>(total) : 0.0;
    counts[i] = static_cast<Dim>(std::floor(q + 1e-9));
    assigned += counts[i];
    fracs.emplace_back(q - std::floor(q + 1e-9), i);
  }
  std::sort(fracs.begin(), fracs.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  for (size_t j = 0; assigned < total; ++j, ++assigned) counts[fracs[j % fracs.size()].second] += 1;
  return counts;
}

struct Disc {
  double x, y, r;
};

double soft_disc(double d, double r) { return clamp01((r - d) / 0.7); }

void stamp_dark_disc(Array& a, Dim hw, const Disc& disc, double depth) {
  const Dim lo_x = std::max<Dim>(0, static_cast<Dim>(disc.x - disc.r - 1));
  const Dim hi_x = std::min(hw - 1, static_cast<Dim>(disc.x + disc.r + 1));
  const Dim lo_y = std::max<Dim>(0, static_cast<Dim>(disc.y - disc.r - 1));
  const Dim hi_y = std::min(hw - 1, static_cast<Dim>(disc.y + disc.r + 1));
  for (Dim y = lo_y; y <= hi_y; ++y) {
    for (Dim x = lo_x; x <= hi_x; ++x) {
      const double d = std::hypot(x - disc.x, y - disc.y);
      a(y * hw + x) *= 1.0 - depth * soft_disc(d, disc.r);
    }
  }
}

void stamp_bright_disc(Array& a, Dim hw, const Disc& disc, double depth) {
  const Dim lo_x = std::max<Dim>(0, static_cast<Dim>(disc.x - disc.r - 1));
  const Dim hi_x = std::min(hw - 1, static_cast<Dim>(disc.x + disc.r + 1));
  const Dim lo_y = std::max<Dim>(0, static_cast<Dim>(disc.y - disc.r - 1));
  const Dim hi_y = std::min(hw - 1, static_cast<Dim>(disc.y + disc.r + 1));
  for (Dim y = lo_y; y <= hi_y; ++y) {
    for (Dim x = lo_x; x <= hi_x; ++x) {
      const double d = std::hypot(x - disc.x, y - disc.y);
      a(y * hw + x) += depth * soft_disc(d, disc.r);
    }
  }
}

/// Wiggly bright ridge between two border points; returns the sampled
/// center-line points for lesion placement.
void draw_vessel(Array& a, Dim hw, Rng& rng, std::vector<std::pair<double, double>>& points) {
  const int side = static_cast<int>(rng.below(4));
  const double p0 = rng.uniform(2.0, hw - 3.0);
  const double p1 = rng.uniform(2.0, hw - 3.0);
  double x0, y0, x1, y1;
  if (side == 0) {
    x0 = 0; y0 = p0; x1 = hw - 1; y1 = p1;
  } else if (side == 1) {
    x0 = p0; y0 = 0; x1 = p1; y1 = hw - 1;
  } else if (side == 2) {
    x0 = 0; y0 = p0; x1 = hw - 1; y1 = hw - 1 - p1;
  } else {
    x0 = p0; y0 = 0; x1 = hw - 1 - p1; y1 = hw - 1;
  }
  const double amp = rng.uniform(0.8, 2.2);
  const double freq = rng.uniform(0.8, 1.8);
  const double phase = rng.uniform(0.0, 6.283185307179586);
  const double intensity = rng.uniform(0.45, 0.6);
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int steps = static_cast<int>(len * 2.0) + 1;
  const double nx = -(y1 - y0) / len, ny = (x1 - x0) / len;
  const double sigma2 = 2.0 * 0.7 * 0.7;
  for (int s = 0; s <= steps; ++s) {
    const double t = static_cast<double>(s) / steps;
    const double off = amp * std::sin(6.283185307179586 * freq * t + phase);
    const double cx = x0 + t * (x1 - x0) + off * nx;
    const double cy = y0 + t * (y1 - y0) + off * ny;
    points.emplace_back(cx, cy);
    const Dim lo_x = std::max<Dim>(0, static_cast<Dim>(cx - 2));
    const Dim hi_x = std::min(hw - 1, static_cast<Dim>(cx + 2));
    const Dim lo_y = std::max<Dim>(0, static_cast<Dim>(cy - 2));
    const Dim hi_y = std::min(hw - 1, static_cast<Dim>(cy + 2));
    for (Dim y = lo_y; y <= hi_y; ++y) {
      for (Dim x = lo_x; x <= hi_x; ++x) {
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        const double v = intensity * std::exp(-d2 / sigma2);
        double& px = a(y * hw + x);
        px = std::max(px, 0.15 + v);  // ridge profile, not accumulation
      }
    }
  }
}

struct ShadowBand {
  double angle, center, width, factor;
  double weight(double x, double y) const {
    const double p = std::cos(angle) * x + std::sin(angle) * y;
    const double inside = std::min(p - (center - width / 2), (center + width / 2) - p);
    return clamp01(inside);
  }
};

}  // namespace

const char* degradation_name(Degradation d) {
  switch (d) {
    case Degradation::kBlur: return "blur";
    case Degradation::kShadow: return "shadow";
    case Degradation::kSpots: return "spots";
    case Degradation::kContrast: return "contrast";
  }
  return "?";
}

Degradation degradation_from_name(const std::string& name) {
  if (name == "blur") return Degradation::kBlur;
  if (name == "shadow") return Degradation::kShadow;
  if (name == "spots") return Degradation::kSpots;
  if (name == "contrast") return Degradation::kContrast;
  throw std::invalid_argument("unknown degradation kind '" + name + "'");
}

void SynthConfig::validate() const {
  if (n_samples < 3) throw std::invalid_argument("synth: need at least one sample per diagnosis class");
  double psum = 0;
  for (double p : class_priors) {
    if (p < 0) throw std::invalid_argument("synth: class_priors must be non-negative");
    psum += p;
  }
  if (std::abs(psum - 1.0) > 1e-9) throw std::invalid_argument("synth: class_priors must sum to 1");
  if (lq_fraction < 0.0 || lq_fraction > 1.0) throw std::invalid_argument("synth: lq_fraction outside [0,1]");
  for (double wgt : degradation_mix) {
    if (wgt < 0) throw std::invalid_argument("synth: degradation_mix must be non-negative");
  }
  if (image_hw < 16) throw std::invalid_argument("synth: image size too small");
}

json SynthConfig::to_json() const {
  json j;
  j["n_samples"] = n_samples;
  j["class_priors"] = class_priors;
  j["lq_fraction"] = lq_fraction;
  j["degradation_mix"] = degradation_mix;
  j["image_hw"] = image_hw;
  j["seed"] = seed;
  return j;
}

SynthConfig SynthConfig::from_json(const json& j) {
  SynthConfig c;
  c.n_samples = j.value("n_samples", c.n_samples);
  if (j.contains("class_priors")) c.class_priors = j.at("class_priors").get<std::array<double, 3>>();
  c.lq_fraction = j.value("lq_fraction", c.lq_fraction);
  if (j.contains("degradation_mix")) c.degradation_mix = j.at("degradation_mix").get<std::array<double, 4>>();
  c.image_hw = j.value("image_hw", c.image_hw);
  c.seed = j.value("seed", c.seed);
  return c;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
  const Dim h = image.extent(1), w = image.extent(2);
  const Dim radius = static_cast<Dim>(std::ceil(3.0 * sigma));
  if (radius == 0) return image;
  Array kernel(2 * radius + 1);
  for (Dim i = -radius; i <= radius; ++i) {
    kernel(i + radius) = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
  }
  kernel /= kernel.sum();
  auto reflect = [](Dim i, Dim n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  const Array& src = image.array();
  Array tmp(h * w), out(h * w);
  for (Dim y = 0; y < h; ++y) {
    for (Dim x = 0; x < w; ++x) {
      double acc = 0;
      for (Dim k = -radius; k <= radius; ++k) acc += kernel(k + radius) * src(y * w + reflect(x + k, w));
      tmp(y * w + x) = acc;
    }
  }
  for (Dim y = 0; y < h; ++y) {
    for (Dim x = 0; x < w; ++x) {
      double acc = 0;
      for (Dim k = -radius; k <= radius; ++k) acc += kernel(k + radius) * tmp(reflect(y + k, h) * w + x);
      out(y * w + x) = acc;
    }
  }
  return Tensor(image.shape(), std::move(out));
}

Tensor degrade(const Tensor& image, Degradation kind, Rng& rng, json* trace) {
  if (image.rank() != 3 || image.extent(0) != 1) {
    throw std::invalid_argument("degrade: expected a [1,H,W] image, got " + shape_str(image.shape()));
  }
  const Dim hw = image.extent(1);
  Array a = image.array();
  json t;
  t["kind"] = degradation_name(kind);
  switch (kind) {
    case Degradation::kBlur: {
      const double sigma = rng.uniform(0.8, 1.6);
      t["sigma"] = sigma;
      a = gaussian_blur(image, sigma).array();
      break;
    }
    case Degradation::kShadow: {
      ShadowBand band;
      band.angle = rng.uniform(0.0, 3.141592653589793);
      band.width = rng.uniform(6.0, 12.0) * static_cast<double>(hw) / 32.0;
      const double c = std::cos(band.angle), s = std::sin(band.angle);
      double pmin = 0, pmax = 0;
      for (double px : {0.0, static_cast<double>(hw - 1)}) {
        for (double py : {0.0, static_cast<double>(hw - 1)}) {
          const double p = c * px + s * py;
          pmin = std::min(pmin, p);
          pmax = std::max(pmax, p);
        }
      }
      band.center = rng.uniform(pmin + band.width / 2, pmax - band.width / 2);
      band.factor = rng.uniform(0.3, 0.6);
      t["angle"] = band.angle;
      t["center"] = band.center;
      t["width"] = band.width;
      t["factor"] = band.factor;
      for (Dim y = 0; y < hw; ++y) {
        for (Dim x = 0; x < hw; ++x) {
          a(y * hw + x) *= 1.0 - (1.0 - band.factor) * band.weight(x, y);
        }
      }
      break;
    }
    case Degradation::kSpots: {
      const int k = 1 + static_cast<int>(rng.below(3));
      json discs = json::array();
      for (int i = 0; i < k; ++i) {
        Disc d;
        d.x = rng.uniform(1.5, hw - 2.5);
        d.y = rng.uniform(1.5, hw - 2.5);
        d.r = rng.uniform(1.5, 3.2);
        const double depth = rng.uniform(0.35, 0.55);
        stamp_bright_disc(a, hw, d, depth);
        discs.push_back({d.x, d.y, d.r, depth});
      }
      t["discs"] = std::move(discs);
      break;
    }
    case Degradation::kContrast: {
      const double mean = a.mean();
      a = mean + 0.5 * (a - mean);
      t["factor"] = 0.5;
      break;
    }
  }
  for (Dim i = 0; i < a.size(); ++i) a(i) = clamp01(a(i));
  if (trace) *trace = std::move(t);
  return Tensor(image.shape(), std::move(a));
}

namespace {

struct GeneratedSample {
  Array image;
  std::vector<LesionInfo> lesions;
  json degradations = json::array();
  int spot_count = 0;
  bool shadow_covers_lesion = false;
};

GeneratedSample gen_sample(const SynthConfig& cfg, int id, int y_d, int y_q) {
  Rng rng = Rng::stream(cfg.seed, {kSaltSample, static_cast<std::uint64_t>(id)});
  const Dim hw = cfg.image_hw;
  GeneratedSample out;
  Array a(hw * hw);
  for (Dim i = 0; i < a.size(); ++i) a(i) = 0.15 + rng.normal(0.0, 0.02);

  std::vector<std::pair<double, double>> vessel_pts;
  const int n_vessels = 2 + static_cast<int>(rng.below(2));
  for (int v = 0; v < n_vessels; ++v) draw_vessel(a, hw, rng, vessel_pts);

  int n_lesions = 0;
  if (y_d == 1) n_lesions = 1 + static_cast<int>(rng.below(2));
  if (y_d == 2) n_lesions = 3 + static_cast<int>(rng.below(3));
  for (int l = 0; l < n_lesions; ++l) {
    const auto& anchor = vessel_pts[static_cast<size_t>(rng.below(static_cast<Dim>(vessel_pts.size())))];
    Disc d;
    d.x = std::min(hw - 3.0, std::max(2.0, anchor.first + rng.normal(0.0, 1.2)));
    d.y = std::min(hw - 3.0, std::max(2.0, anchor.second + rng.normal(0.0, 1.2)));
    d.r = rng.uniform(1.5, 2.8);
    stamp_dark_disc(a, hw, d, rng.uniform(0.55, 0.75));
    out.lesions.push_back(LesionInfo{d.x, d.y, d.r});
  }
  for (Dim i = 0; i < a.size(); ++i) a(i) = clamp01(a(i));

  if (y_q == 1) {
    std::array<double, 4> weights = cfg.degradation_mix;
    const int n_deg = 1 + static_cast<int>(rng.below(3));
    Tensor img(Shape{1, hw, hw}, std::move(a));
    for (int k = 0; k < n_deg; ++k) {
      double total = weights[0] + weights[1] + weights[2] + weights[3];
      if (total <= 0) break;
      double u = rng.uniform(0.0, total);
      int pick = 0;
      for (; pick < 3; ++pick) {
        if (u < weights[static_cast<size_t>(pick)]) break;
        u -= weights[static_cast<size_t>(pick)];
      }
      weights[static_cast<size_t>(pick)] = 0.0;
      json trace;
      img = degrade(img, static_cast<Degradation>(pick), rng, &trace);
      if (static_cast<Degradation>(pick) == Degradation::kSpots) {
        out.spot_count += static_cast<int>(trace.at("discs").size());
      }
      if (static_cast<Degradation>(pick) == Degradation::kShadow) {
        ShadowBand band{trace.at("angle"), trace.at("center"), trace.at("width"), trace.at("factor")};
        for (const LesionInfo& les : out.lesions) {
          if (band.weight(les.x, les.y) > 0.5) out.shadow_covers_lesion = true;
        }
      }
      out.degradations.push_back(std::move(trace));
    }
    out.image = img.array();
  } else {
    out.image = std::move(a);
  }
  return out;
}

}  // namespace

Dataset gen_dataset(const SynthConfig& cfg) {
  cfg.validate();
  const Dim n = cfg.n_samples;
  const std::vector<Dim> class_counts =
      largest_remainder({cfg.class_priors[0], cfg.class_priors[1], cfg.class_priors[2]}, n);

  std::vector<int> y_d(static_cast<size_t>(n));
  size_t at = 0;
  for (int c = 0; c < 3; ++c) {
    for (Dim i = 0; i < class_counts[static_cast<size_t>(c)]; ++i) y_d[at++] = c;
  }

  // LQ share allocated across classes by largest remainder, then assigned to
  // a per-class random subset.
  const Dim total_lq = static_cast<Dim>(std::llround(cfg.lq_fraction * static_cast<double>(n)));
  std::vector<double> class_weights(class_counts.begin(), class_counts.end());
  const std::vector<Dim> lq_counts = largest_remainder(class_weights, total_lq);
  std::vector<int> y_q(static_cast<size_t>(n), 0);
  for (int c = 0; c < 3; ++c) {
    std::vector<int> members;
    for (Dim i = 0; i < n; ++i) {
      if (y_d[static_cast<size_t>(i)] == c) members.push_back(static_cast<int>(i));
    }
    Rng rng = Rng::stream(cfg.seed, {kSaltLq, static_cast<std::uint64_t>(c)});
    rng.shuffle(members);
    for (Dim i = 0; i < std::min<Dim>(lq_counts[static_cast<size_t>(c)], static_cast<Dim>(members.size())); ++i) {
      y_q[static_cast<size_t>(members[static_cast<size_t>(i)])] = 1;
    }
  }

  Dataset ds;
  ds.manifest.config_echo = cfg.to_json();
  ds.manifest.normalized = false;
  ds.images.resize(static_cast<size_t>(n));
  ds.manifest.samples.resize(static_cast<size_t>(n));
  for (Dim i = 0; i < n; ++i) {
    GeneratedSample g = gen_sample(cfg, static_cast<int>(i), y_d[static_cast<size_t>(i)], y_q[static_cast<size_t>(i)]);
    ds.images[static_cast<size_t>(i)] = Tensor({1, cfg.image_hw, cfg.image_hw}, std::move(g.image));
    SampleRecord& rec = ds.manifest.samples[static_cast<size_t>(i)];
    rec.id = static_cast<int>(i);
    rec.y_d = y_d[static_cast<size_t>(i)];
    rec.y_q = y_q[static_cast<size_t>(i)];
    rec.lesions = std::move(g.lesions);
    rec.degradations = std::move(g.degradations);
    rec.spot_count = g.spot_count;
    rec.shadow_covers_lesion = g.shadow_covers_lesion;
  }
  return ds;
}

void split_dataset(DatasetManifest& manifest, std::array<double, 3> ratios, std::uint64_t seed) {
  const double rsum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(rsum - 1.0) > 1e-9) throw std::invalid_argument("split: ratios must sum to 1");
  int nonzero = 0;
  for (double r : ratios) nonzero += r > 0 ? 1 : 0;

  std::map<std::pair<int, int>, std::vector<int>> cells;
  for (const SampleRecord& rec : manifest.samples) cells[{rec.y_d, rec.y_q}].push_back(rec.id);

  for (auto& [key, members] : cells) {
    if (static_cast<int>(members.size()) < nonzero) {
      std::fprintf(stderr, "[split] warning: cell (y_d=%d,y_q=%d) has %zu samples for %d splits\n", key.first,
                   key.second, members.size(), nonzero);
    }
    Rng rng = Rng::stream(seed, {kSaltSplit, static_cast<std::uint64_t>(key.first * 1000 + key.second)});
    rng.shuffle(members);
    const std::vector<Dim> counts =
        largest_remainder({ratios[0], ratios[1], ratios[2]}, static_cast<Dim>(members.size()));
    size_t at = 0;
    for (int split = 0; split < 3; ++split) {
      for (Dim i = 0; i < counts[static_cast<size_t>(split)]; ++i, ++at) {
        manifest.samples[static_cast<size_t>(members[at])].split = split;
      }
    }
  }
}

std::vector<int> Dataset::split_indices(int split) const {
  std::vector<int> out;
  for (const SampleRecord& rec : manifest.samples) {
    if (rec.split == split) out.push_back(rec.id);
  }
  return out;
}

Tensor resize_bilinear(const Tensor& image, Dim out_h, Dim out_w) {
  if (image.rank() != 3 || image.extent(0) != 1) {
    throw std::invalid_argument("resize: expected [1,H,W], got " + shape_str(image.shape()));
  }
  const Dim h = image.extent(1), w = image.extent(2);
  const Array& src = image.array();
  Array out(out_h * out_w);
  for (Dim y = 0; y < out_h; ++y) {
    const double sy = std::min(static_cast<double>(h - 1),
                               std::max(0.0, (y + 0.5) * static_cast<double>(h) / static_cast<double>(out_h) - 0.5));
    const Dim y0 = static_cast<Dim>(sy);
    const Dim y1 = std::min(h - 1, y0 + 1);
    const double fy = sy - static_cast<double>(y0);
    for (Dim x = 0; x < out_w; ++x) {
      const double sx = std::min(
          static_cast<double>(w - 1),
          std::max(0.0, (x + 0.5) * static_cast<double>(w) / static_cast<double>(out_w) - 0.5));
      const Dim x0 = static_cast<Dim>(sx);
      const Dim x1 = std::min(w - 1, x0 + 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = src(y0 * w + x0) * (1 - fx) + src(y0 * w + x1) * fx;
      const double bot = src(y1 * w + x0) * (1 - fx) + src(y1 * w + x1) * fx;
      out(y * out_w + x) = top * (1 - fy) + bot * fy;
    }
  }
  return Tensor({1, out_h, out_w}, std::move(out));
}

Tensor normalize_image(const Tensor& image) {
  const Array& a = image.array();
  const double mean = a.mean();
  const double var = (a - mean).square().mean();
  const double denom = std::sqrt(std::max(var, 1e-6));
  Array out = (a - mean) / denom;
  return Tensor(image.shape(), std::move(out));
}

Dataset load_folder(const std::filesystem::path& dir, const std::filesystem::path& labels_csv, Dim image_hw,
                    Dim d_classes, Dim q_classes) {
  const std::vector<LabelRow> rows = read_labels_csv(labels_csv);
  Dataset ds;
  ds.manifest.normalized = true;
  ds.manifest.config_echo = json{{"source", dir.string()}, {"labels", labels_csv.string()}, {"image_hw", image_hw}};
  int sample_id = 0;
  for (const LabelRow& row : rows) {
    if (row.y_d < 0 || row.y_d >= d_classes || row.y_q < 0 || row.y_q >= q_classes) {
      throw std::runtime_error(labels_csv.string() + ": row " + std::to_string(row.line) + ": label out of range (" +
                               std::to_string(row.y_d) + "," + std::to_string(row.y_q) + ")");
    }
    const std::filesystem::path img_path = dir / row.filename;
    if (!std::filesystem::exists(img_path)) {
      throw std::runtime_error(labels_csv.string() + ": row " + std::to_string(row.line) + ": missing file " +
                               img_path.string());
    }
    Tensor img = read_image_grayscale(img_path);
    if (img.extent(1) != image_hw || img.extent(2) != image_hw) img = resize_bilinear(img, image_hw, image_hw);
    ds.images.push_back(normalize_image(img));
    SampleRecord rec;
    rec.id = sample_id++;
    rec.y_d = row.y_d;
    rec.y_q = row.y_q;
    ds.manifest.samples.push_back(std::move(rec));
  }
  return ds;
}

json DatasetManifest::to_json() const {
  json j;
  j["format"] = "mkc-dataset-v1";
  j["config"] = config_echo;
  j["normalized"] = normalized;
  json samples_json = json::array();
  for (const SampleRecord& rec : samples) {
    json e;
    e["id"] = rec.id;
    e["offset"] = rec.offset;
    e["y_d"] = rec.y_d;
    e["y_q"] = rec.y_q;
    e["split"] = rec.split;
    json lesions = json::array();
    for (const LesionInfo& l : rec.lesions) lesions.push_back({l.x, l.y, l.r});
    e["lesions"] = std::move(lesions);
    e["degradations"] = rec.degradations;
    e["spot_count"] = rec.spot_count;
    e["shadow_covers_lesion"] = rec.shadow_covers_lesion;
    samples_json.push_back(std::move(e));
  }
  j["samples"] = std::move(samples_json);
  return j;
}

DatasetManifest DatasetManifest::from_json(const json& j) {
  if (j.value("format", "") != "mkc-dataset-v1") throw std::runtime_error("manifest: not an mkc dataset");
  DatasetManifest m;
  m.config_echo = j.value("config", json::object());
  m.normalized = j.value("normalized", false);
  for (const json& e : j.at("samples")) {
    SampleRecord rec;
    rec.id = e.at("id").get<int>();
    rec.offset = e.value("offset", -1);
    rec.y_d = e.at("y_d").get<int>();
    rec.y_q = e.at("y_q").get<int>();
    rec.split = e.value("split", 0);
    for (const json& l : e.value("lesions", json::array())) {
      rec.lesions.push_back(LesionInfo{l[0].get<double>(), l[1].get<double>(), l[2].get<double>()});
    }
    rec.degradations = e.value("degradations", json::array());
    rec.spot_count = e.value("spot_count", 0);
    rec.shadow_covers_lesion = e.value("shadow_covers_lesion", false);
    m.samples.push_back(std::move(rec));
  }
  return m;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest manifest = ds.manifest;
  {
    std::ofstream bin(dir / "data.bin", std::ios::binary);
    if (!bin) throw std::runtime_error((dir / "data.bin").string() + ": cannot open for writing");
    char name[32];
    for (size_t i = 0; i < ds.images.size(); ++i) {
      std::snprintf(name, sizeof(name), "sample_%06zu", i);
      manifest.samples[i].offset = static_cast<std::int64_t>(bin.tellp());
      write_tensor_blob(bin, name, ds.images[i]);
    }
  }
  save_json_file(dir / "manifest.json", manifest.to_json());
  {
    std::ofstream csv(dir / "labels.csv");
    csv << "filename,y_d,y_q\n";
    char name[32];
    for (size_t i = 0; i < manifest.samples.size(); ++i) {
      std::snprintf(name, sizeof(name), "sample_%06zu", i);
      csv << name << "," << manifest.samples[i].y_d << "," << manifest.samples[i].y_q << "\n";
    }
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = DatasetManifest::from_json(load_json_file(dir / "manifest.json"));
  std::ifstream bin(dir / "data.bin", std::ios::binary);
  if (!bin) throw std::runtime_error((dir / "data.bin").string() + ": cannot open");
  for (const SampleRecord& rec : ds.manifest.samples) {
    bin.seekg(rec.offset);
    ds.images.push_back(read_tensor_blob(bin).value);
  }
  return ds;
}

std::vector<int> subsample_lq_train(const Dataset& ds, double lq_ratio, std::uint64_t seed) {
  if (lq_ratio < 0.0 || lq_ratio > 1.0) throw std::invalid_argument("lq_ratio outside [0,1]");
  std::vector<int> keep;
  std::map<int, std::vector<int>> lq_by_class;
  for (const SampleRecord& rec : ds.manifest.samples) {
    if (rec.split != 0) continue;
    if (rec.y_q == 0) {
      keep.push_back(rec.id);
    } else {
      lq_by_class[rec.y_d].push_back(rec.id);
    }
  }
  for (auto& [cls, members] : lq_by_class) {
    Rng rng = Rng::stream(seed, {kSaltRatio, static_cast<std::uint64_t>(cls)});
    rng.shuffle(members);
    const Dim n_keep = static_cast<Dim>(std::llround(lq_ratio * static_cast<double>(members.size())));
    for (Dim i = 0; i < n_keep; ++i) keep.push_back(members[static_cast<size_t>(i)]);
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

}  // namespace mkc

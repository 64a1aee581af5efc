// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic quality-degraded imaging benchmark plus a loader for
// user-supplied image folders. Base images carry a bright vessel-like line
// network and dark circular lesions whose count drives the diagnosis
// label; low-quality samples additionally receive degradations (blur,
// shadow bands, bright spot artifacts, contrast compression) that can hide
// lesions or imitate them, which is what makes the quality label carry
// diagnosis-relevant evidence.
#pragma once

#include "mkc/io.hpp"
#include "mkc/rng.hpp"
#include "mkc/tensor.hpp"

#include <array>
#include <filesystem>
#include <string>
#include <vector>

namespace mkc {

enum class Degradation { kBlur, kShadow, kSpots, kContrast };
const char* degradation_name(Degradation d);
Degradation degradation_from_name(const std::string& name);

struct SynthConfig {
  Dim n_samples = 2000;
  std::array<double, 3> class_priors{0.40, 0.35, 0.25};  // none / mild / severe
  double lq_fraction = 0.4;
  // blur, shadow, spots, contrast
  std::array<double, 4> degradation_mix{1.0, 1.0, 1.0, 1.0};
  Dim image_hw = 32;
  std::uint64_t seed = 1;

  void validate() const;
  json to_json() const;
  static SynthConfig from_json(const json& j);
};

struct LesionInfo {
  double x, y, r;
};

struct SampleRecord {
  int id = 0;
  std::int64_t offset = -1;  // byte offset of the blob in data.bin
  int y_d = 0;
  int y_q = 0;
  int split = 0;  // 0 train, 1 val, 2 test
  std::vector<LesionInfo> lesions;
  json degradations = json::array();  // one entry per applied kind, with parameters
  int spot_count = 0;
  bool shadow_covers_lesion = false;
};

struct DatasetManifest {
  json config_echo;
  bool normalized = false;  // whether stored images are already zero-mean/unit-var
  std::vector<SampleRecord> samples;

  json to_json() const;
  static DatasetManifest from_json(const json& j);
};

struct Dataset {
  std::vector<Tensor> images;  // [1,H,W]
  DatasetManifest manifest;

  Dim size() const { return static_cast<Dim>(images.size()); }
  std::vector<int> split_indices(int split) const;
};

/// Deterministic generation: per-sample RNG streams are derived from the
/// master seed by counter splitting, so the result is independent of
/// generation order.
Dataset gen_dataset(const SynthConfig& cfg);

/// Pure function of (image, kind, stream state); output clamped to [0,1].
/// When `trace` is given, the sampled degradation parameters are recorded.
Tensor degrade(const Tensor& image, Degradation kind, Rng& rng, json* trace = nullptr);

/// Stratified train/val/test assignment per (y_d, y_q) cell.
void split_dataset(DatasetManifest& manifest, std::array<double, 3> ratios, std::uint64_t seed);

/// Bilinear resize with half-pixel centers and edge clamping.
Tensor resize_bilinear(const Tensor& image, Dim out_h, Dim out_w);

/// Separable Gaussian blur with reflected borders; sigma == 0 is identity.
Tensor gaussian_blur(const Tensor& image, double sigma);

/// Per-image zero-mean, unit-variance normalization (variance floor 1e-6).
Tensor normalize_image(const Tensor& image);

/// Images from a folder with a "filename,y_d,y_q" CSV; resized to
/// image_hw and normalized. Errors name the offending CSV row.
Dataset load_folder(const std::filesystem::path& dir, const std::filesystem::path& labels_csv, Dim image_hw,
                    Dim d_classes, Dim q_classes);

/// dir/data.bin (tensor blobs), dir/manifest.json, dir/labels.csv.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// Drops a deterministic fraction of LQ training samples (stratified by
/// diagnosis class), leaving val/test untouched. ratio 1.0 keeps all.
std::vector<int> subsample_lq_train(const Dataset& ds, double lq_ratio, std::uint64_t seed);

}  // namespace mkc

// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// On-disk formats: tensor blobs (shared by datasets and checkpoints),
// checkpoint directories, PGM/PNG grayscale images, and the labels CSV.
#pragma once

#include "mkc/grad.hpp"
#include "mkc/tensor.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace mkc {

using nlohmann::json;

/// Blob layout: 8-byte magic "MKCTENS1", little-endian u32 JSON header
/// length, UTF-8 JSON header {"name","shape","dtype":"f64"}, then raw
/// little-endian f64 payload.
inline constexpr char kTensorMagic[8] = {'M', 'K', 'C', 'T', 'E', 'N', 'S', '1'};

struct NamedTensor {
  std::string name;
  Tensor value;
};

void write_tensor_blob(std::ostream& out, const std::string& name, const Tensor& t);
NamedTensor read_tensor_blob(std::istream& in);

/// Serialized parameter sets plus a config echo. Layout:
///   dir/manifest.json  - names, shapes, offsets, config echo
///   dir/params.bin     - concatenated tensor blobs
void save_checkpoint(const std::filesystem::path& dir, const ParamSet& task_params, const ParamSet& meta_params,
                     const json& config_echo);

struct Checkpoint {
  ParamSet task_params;
  ParamSet meta_params;  // empty for variants without a meta learner
  json config;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

/// Image in [0,1] as a [1,H,W] tensor (grayscale; RGB inputs are averaged).
Tensor read_image_grayscale(const std::filesystem::path& path);
/// Binary PGM (P5, maxval 255); values clamped to [0,1] then quantized.
void write_pgm(const std::filesystem::path& path, const Tensor& image);
/// 8-bit grayscale PNG, same value conventions as write_pgm.
void write_png_grayscale(const std::filesystem::path& path, const Tensor& image);

/// Rows of "filename,y_d,y_q" with a header row tolerated. Raises errors
/// naming the offending 1-based row number.
struct LabelRow {
  std::string filename;
  int y_d;
  int y_q;
  int line = 0;  // 1-based source line, for error messages
};
std::vector<LabelRow> read_labels_csv(const std::filesystem::path& path);

json load_json_file(const std::filesystem::path& path);
/// Deterministic serialization (2-space indent, sorted keys, trailing \n).
void save_json_file(const std::filesystem::path& path, const json& j);

}  // namespace mkc

// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics (macro one-vs-rest AUC, accuracy, macro F1), the
// per-branch gradient cosine analysis on the shared backbone, and feature /
// activation-map export for offline inspection.
#pragma once

#include "mkc/dataset.hpp"
#include "mkc/model.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace mkc {

struct PerClassMetrics {
  int cls = 0;
  Dim support = 0;
  double f1 = 0.0;
  std::optional<double> auc;  // absent when the class has no pos/neg pair
};

struct MetricsBundle {
  std::string subset;  // ALL / HQ / LQ
  double auc_macro_ovr = 0.0;
  double accuracy = 0.0;
  double f1_macro = 0.0;
  std::vector<PerClassMetrics> per_class;
  std::vector<int> skipped_auc_classes;
  Dim n_samples = 0;

  json to_json() const;
};

/// One-vs-rest AUC per class by Mann-Whitney ranking (ties count 1/2),
/// macro-averaged over evaluable classes. Classes without both a positive
/// and a negative are skipped and reported; if none is evaluable the call
/// is an error.
double auc_macro_ovr(const Tensor& scores, const std::vector<int>& labels, std::vector<int>* skipped = nullptr);

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels);

/// Macro F1 over all classes present in labels or predictions; a class with
/// P + R == 0 contributes 0.
double f1_macro(const std::vector<int>& predictions, const std::vector<int>& labels);

std::vector<int> argmax_rows(const Tensor& scores);

MetricsBundle compute_metrics(const Tensor& scores, const std::vector<int>& labels, const std::string& subset);

/// Pairwise cosine similarity of the three loss gradients (diagnosis,
/// quality, auxiliary-embedding) restricted to the shared backbone
/// parameters. Order: D-Grad, IQ-Grad, AuxGrad. Undefined entries
/// (zero-norm gradients) are NaN and serialize as null.
struct CosineMatrix {
  std::array<std::array<double, 3>, 3> values;
  json to_json() const;
};

CosineMatrix grad_cosine_matrix(const ParamSet& theta, const ParamSet& phi, const Batch& batch,
                                const ModelConfig& cfg, double gamma_focal);

/// CSV rows: id, y_d, y_q, joint code, the Meta Learner output vector, and
/// the final diagnosis feature.
void export_features(const ParamSet& theta, const ParamSet& phi, const Dataset& ds,
                     const std::vector<int>& indices, const ModelConfig& cfg,
                     const std::filesystem::path& out_file);

/// Head-weight-weighted activation maps per branch, min-max normalized,
/// nearest-upsampled to the input size; PGM files plus a JSON index.
void export_activation_maps(const ParamSet& theta, const ParamSet& phi, const Dataset& ds,
                            const std::vector<int>& indices, const ModelConfig& cfg,
                            const std::filesystem::path& out_dir);

/// Min-max normalization with the constant-map guard (all 0.5).
Tensor normalize_cam(const Tensor& map);

}  // namespace mkc

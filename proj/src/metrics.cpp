// Copyright (c) 2026 The mkcnet authors
// SPDX-License-Identifier: Apache-2.0
#include "mkc/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

namespace mkc {

namespace {

/// Ranks with ties averaged (1-based).
std::vector<double> tied_ranks(const std::vector<double>& values) {
  const size_t n = values.size();
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double auc_macro_ovr(const Tensor& scores, const std::vector<int>& labels, std::vector<int>* skipped) {
  if (scores.rank() != 2 || static_cast<Dim>(labels.size()) != scores.extent(0)) {
    throw std::invalid_argument("auc: scores must be [N,C] aligned with labels");
  }
  const Dim n = scores.extent(0), c = scores.extent(1);
  double total = 0.0;
  int evaluated = 0;
  for (Dim cls = 0; cls < c; ++cls) {
    Dim n_pos = 0;
    for (int l : labels) n_pos += (l == cls) ? 1 : 0;
    const Dim n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) {
      if (skipped) skipped->push_back(static_cast<int>(cls));
      continue;
    }
    std::vector<double> s(static_cast<size_t>(n));
    for (Dim i = 0; i < n; ++i) s[static_cast<size_t>(i)] = scores[i * c + cls];
    const std::vector<double> ranks = tied_ranks(s);
    double rank_sum = 0.0;
    for (Dim i = 0; i < n; ++i) {
      if (labels[static_cast<size_t>(i)] == cls) rank_sum += ranks[static_cast<size_t>(i)];
    }
    const double u = rank_sum - 0.5 * static_cast<double>(n_pos) * static_cast<double>(n_pos + 1);
    total += u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
    ++evaluated;
  }
  if (evaluated == 0) throw std::invalid_argument("auc: labels contain a single class; AUC undefined");
  return total / evaluated;
}

double accuracy(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw std::invalid_argument("accuracy: empty or mismatched inputs");
  }
  Dim hits = 0;
  for (size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double f1_macro(const std::vector<int>& predictions, const std::vector<int>& labels) {
  if (predictions.size() != labels.size() || labels.empty()) {
    throw std::invalid_argument("f1: empty or mismatched inputs");
  }
  std::set<int> classes(labels.begin(), labels.end());
  classes.insert(predictions.begin(), predictions.end());
  double total = 0.0;
  for (int cls : classes) {
    Dim tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool p = predictions[i] == cls, l = labels[i] == cls;
      tp += (p && l) ? 1 : 0;
      fp += (p && !l) ? 1 : 0;
      fn += (!p && l) ? 1 : 0;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    total += denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
  }
  return total / static_cast<double>(classes.size());
}

std::vector<int> argmax_rows(const Tensor& scores) {
  const Dim n = scores.extent(0), c = scores.extent(1);
  std::vector<int> out(static_cast<size_t>(n));
  for (Dim i = 0; i < n; ++i) {
    Dim best = 0;
    for (Dim j = 1; j < c; ++j) {
      if (scores[i * c + j] > scores[i * c + best]) best = j;
    }
    out[static_cast<size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

MetricsBundle compute_metrics(const Tensor& scores, const std::vector<int>& labels, const std::string& subset) {
  MetricsBundle m;
  m.subset = subset;
  m.n_samples = static_cast<Dim>(labels.size());
  const std::vector<int> preds = argmax_rows(scores);
  m.accuracy = accuracy(preds, labels);
  m.f1_macro = f1_macro(preds, labels);
  m.auc_macro_ovr = auc_macro_ovr(scores, labels, &m.skipped_auc_classes);

  const Dim c = scores.extent(1);
  for (Dim cls = 0; cls < c; ++cls) {
    PerClassMetrics pc;
    pc.cls = static_cast<int>(cls);
    Dim tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      const bool p = preds[i] == cls, l = labels[i] == cls;
      pc.support += l ? 1 : 0;
      tp += (p && l) ? 1 : 0;
      fp += (p && !l) ? 1 : 0;
      fn += (!p && l) ? 1 : 0;
    }
    const double denom = static_cast<double>(2 * tp + fp + fn);
    pc.f1 = denom > 0 ? 2.0 * static_cast<double>(tp) / denom : 0.0;
    const bool skipped = std::find(m.skipped_auc_classes.begin(), m.skipped_auc_classes.end(),
                                   static_cast<int>(cls)) != m.skipped_auc_classes.end();
    if (!skipped) {
      std::vector<int> binary(labels.size());
      for (size_t i = 0; i < labels.size(); ++i) binary[i] = labels[i] == cls ? 1 : 0;
      Array col(m.n_samples * 2);
      for (Dim i = 0; i < m.n_samples; ++i) {
        col(i * 2) = 0.0;
        col(i * 2 + 1) = scores[i * c + cls];
      }
      pc.auc = auc_macro_ovr(Tensor({m.n_samples, 2}, std::move(col)), binary);
    }
    m.per_class.push_back(std::move(pc));
  }
  return m;
}

json MetricsBundle::to_json() const {
  json j;
  j["subset"] = subset;
  j["n_samples"] = n_samples;
  j["auc_macro_ovr"] = auc_macro_ovr;
  j["accuracy"] = accuracy;
  j["f1_macro"] = f1_macro;
  json per = json::array();
  for (const PerClassMetrics& pc : per_class) {
    json e;
    e["class"] = pc.cls;
    e["support"] = pc.support;
    e["f1"] = pc.f1;
    e["auc"] = pc.auc ? json(*pc.auc) : json(nullptr);
    per.push_back(std::move(e));
  }
  j["per_class"] = std::move(per);
  j["skipped_auc_classes"] = skipped_auc_classes;
  return j;
}

json CosineMatrix::to_json() const {
  json rows = json::array();
  for (const auto& row : values) {
    json r = json::array();
    for (double v : row) r.push_back(std::isnan(v) ? json(nullptr) : json(v));
    rows.push_back(std::move(r));
  }
  json j;
  j["order"] = {"d_grad", "iq_grad", "aux_grad"};
  j["values"] = std::move(rows);
  return j;
}

CosineMatrix grad_cosine_matrix(const ParamSet& theta, const ParamSet& phi, const Batch& batch,
                                const ModelConfig& cfg, double gamma_focal) {
  if (!cfg.has_omega_branch()) {
    throw std::invalid_argument("grad_cosine_matrix: model variant has no auxiliary branch");
  }
  // phi stays frozen: the auxiliary target is a constant here.
  Tensor y_omega = select_y_omega(meta_learner_forward(batch.x, phi, cfg).logits, batch.mask,
                                  cfg.renormalize_block);
  const ParamSet backbone = theta.with_prefix("task.backbone.");

  Tape tape;
  watch_all(tape, theta);
  TapeScope scope(&tape);
  TaskNetOut out = task_net_forward(batch.x, theta, cfg);
  LossBreakdown lb = task_loss(out, batch.y_d, batch.y_q, y_omega, batch.mask, cfg, gamma_focal);

  std::array<Tensor, 3> flat = {
      flatten(backward(tape, lb.l_d, backbone)),
      flatten(backward(tape, lb.l_q, backbone)),
      flatten(backward(tape, lb.l_omega, backbone)),
  };
  CosineMatrix m;
  std::array<double, 3> norms;
  for (int i = 0; i < 3; ++i) norms[static_cast<size_t>(i)] = std::sqrt(flat[static_cast<size_t>(i)].array().square().sum());
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const double denom = norms[static_cast<size_t>(i)] * norms[static_cast<size_t>(j)];
      if (denom == 0.0) {
        if (i <= j) std::fprintf(stderr, "[grad-cosine] warning: zero-norm gradient, entry (%d,%d) undefined\n", i, j);
        m.values[static_cast<size_t>(i)][static_cast<size_t>(j)] = std::nan("");
      } else {
        m.values[static_cast<size_t>(i)][static_cast<size_t>(j)] =
            (flat[static_cast<size_t>(i)].array() * flat[static_cast<size_t>(j)].array()).sum() / denom;
      }
    }
  }
  return m;
}

namespace {

Tensor gather_batch_images(const Dataset& ds, const std::vector<int>& ids, Dim lo, Dim hi) {
  const Dim hw = ds.images.front().extent(1);
  Array x((hi - lo) * hw * hw);
  for (Dim i = lo; i < hi; ++i) {
    Tensor img = ds.images[static_cast<size_t>(ids[static_cast<size_t>(i)])];
    if (!ds.manifest.normalized) img = normalize_image(img);
    x.segment((i - lo) * hw * hw, hw * hw) = img.array();
  }
  return Tensor({hi - lo, 1, hw, hw}, std::move(x));
}

}  // namespace

void export_features(const ParamSet& theta, const ParamSet& phi, const Dataset& ds,
                     const std::vector<int>& indices, const ModelConfig& cfg,
                     const std::filesystem::path& out_file) {
  std::ofstream out(out_file);
  if (!out) throw std::runtime_error(out_file.string() + ": cannot open for writing");
  const Dim k = cfg.omega_dim();
  const bool has_meta = cfg.has_meta();
  out << "id,y_d,y_q,joint_code";
  for (Dim i = 0; i < (has_meta ? k : 0); ++i) out << ",m" << i;
  Dim feat_width = -1;

  const Dim batch = 64;
  std::string body;
  char buf[64];
  for (Dim lo = 0; lo < static_cast<Dim>(indices.size()); lo += batch) {
    const Dim hi = std::min<Dim>(lo + batch, static_cast<Dim>(indices.size()));
    Tensor x = gather_batch_images(ds, indices, lo, hi);
    TaskNetOut tout = task_net_forward(x, theta, cfg);
    Tensor meta_full;
    if (has_meta) meta_full = meta_learner_forward(x, phi, cfg).full;
    const Tensor& feats = tout.final_feature;
    if (feat_width < 0) {
      feat_width = feats.extent(1);
      for (Dim i = 0; i < feat_width; ++i) out << ",f" << i;
      out << "\n";
    }
    for (Dim r = 0; r < hi - lo; ++r) {
      const SampleRecord& rec = ds.manifest.samples[static_cast<size_t>(indices[static_cast<size_t>(lo + r)])];
      body.clear();
      body += std::to_string(rec.id);
      body += ',';
      body += std::to_string(rec.y_d);
      body += ',';
      body += std::to_string(rec.y_q);
      body += ',';
      body += std::to_string(joint_code(rec.y_d, rec.y_q, cfg.q_classes));
      if (has_meta) {
        for (Dim i = 0; i < k; ++i) {
          std::snprintf(buf, sizeof(buf), ",%.17g", meta_full[r * k + i]);
          body += buf;
        }
      }
      for (Dim i = 0; i < feat_width; ++i) {
        std::snprintf(buf, sizeof(buf), ",%.17g", feats[r * feat_width + i]);
        body += buf;
      }
      body += '\n';
      out << body;
    }
  }
  if (feat_width < 0) out << "\n";  // empty export keeps a parseable header
  if (!out) throw std::runtime_error(out_file.string() + ": write failed");
}

Tensor normalize_cam(const Tensor& map) {
  const double lo = map.array().minCoeff();
  const double hi = map.array().maxCoeff();
  if (hi - lo < 1e-12) return Tensor::full(map.shape(), 0.5);
  Array out = (map.array() - lo) / (hi - lo);
  return Tensor(map.shape(), std::move(out));
}

namespace {

/// Channel map [C,h,w] weighted by one head column -> [h,w].
Tensor weighted_channel_sum(const Tensor& maps, Dim sample, const Tensor& head_w, Dim column, Dim row_offset,
                            Dim rows, const Tensor* channel_scale = nullptr, Dim scale_row = 0) {
  const Dim c = maps.extent(1), h = maps.extent(2), w = maps.extent(3);
  Array out = Array::Zero(h * w);
  const Dim d = head_w.extent(1);
  for (Dim ch = 0; ch < rows; ++ch) {
    double wgt = head_w[(row_offset + ch) * d + column];
    if (channel_scale) wgt *= (*channel_scale)[scale_row * c + ch];
    out += wgt * maps.array().segment(((sample * c) + ch) * h * w, h * w);
  }
  return Tensor({h, w}, std::move(out));
}

}  // namespace

void export_activation_maps(const ParamSet& theta, const ParamSet& phi, const Dataset& ds,
                            const std::vector<int>& indices, const ModelConfig& cfg,
                            const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  if (!std::filesystem::is_directory(out_dir)) {
    throw std::runtime_error(out_dir.string() + ": cannot create output directory");
  }
  json index = json::array();
  const int up = static_cast<int>(cfg.input_hw / cfg.feature_hw());
  for (int id : indices) {
    const SampleRecord& rec = ds.manifest.samples[static_cast<size_t>(id)];
    Tensor img = ds.images[static_cast<size_t>(id)];
    Tensor x = reshape(ds.manifest.normalized ? img : normalize_image(img), {1, 1, cfg.input_hw, cfg.input_hw});
    TaskNetOut out = task_net_forward(x, theta, cfg);

    json entry;
    entry["id"] = rec.id;
    entry["y_d"] = rec.y_d;
    entry["y_q"] = rec.y_q;
    json files = json::object();

    auto emit = [&](const std::string& tag, const Tensor& cam2d, int predicted) {
      Tensor cam = normalize_cam(cam2d);
      Tensor big = upsample_nearest(reshape(cam, {1, 1, cam.extent(0), cam.extent(1)}), up);
      char fname[64];
      std::snprintf(fname, sizeof(fname), "sample_%06d_%s.pgm", rec.id, tag.c_str());
      write_pgm(out_dir / fname, reshape(big, {big.extent(2), big.extent(3)}));
      files[tag] = fname;
      entry["pred_" + tag] = predicted;
    };

    if (cfg.variant == ModelVariant::kVanilla) {
      const int pred = argmax_rows(out.logits_d)[0];
      emit("final", weighted_channel_sum(out.backbone, 0, theta.at("task.head_final.w"), pred, 0,
                                         cfg.branch_width()),
           pred);
    } else {
      const int pred_d = argmax_rows(out.logits_d)[0];
      const int pred_q = argmax_rows(out.logits_q)[0];
      emit("branch_q", weighted_channel_sum(out.gab_q, 0, theta.at("task.head_q.w"), pred_q, 0,
                                            cfg.branch_width()),
           pred_q);
      if (cfg.has_omega_branch()) {
        const int pred_o = argmax_rows(out.logits_omega)[0];
        emit("branch_omega", weighted_channel_sum(out.gab_omega, 0, theta.at("task.head_omega.w"), pred_o, 0,
                                                  cfg.branch_width()),
             pred_o);
      }
      if (cfg.no_mab) {
        emit("branch_d", weighted_channel_sum(out.gab_d, 0, theta.at("task.head_d.w"), pred_d, 0,
                                              cfg.branch_width()),
             pred_d);
        emit("final", weighted_channel_sum(out.gab_d, 0, theta.at("task.head_d.w"), pred_d, 0, cfg.branch_width()),
             pred_d);
      } else {
        const Tensor& head = theta.at("task.mab.head_w");
        Tensor d_half = weighted_channel_sum(out.gab_d, 0, head, pred_d, 0, cfg.branch_width());
        emit("branch_d", d_half, pred_d);
        const Tensor& assist = cfg.has_omega_branch() ? out.gab_omega : out.gab_q;
        Tensor o_half = weighted_channel_sum(assist, 0, head, pred_d, cfg.branch_width(), cfg.branch_width(),
                                             &out.mab_gate, 0);
        emit("final", Tensor(d_half.shape(), d_half.array() + o_half.array()), pred_d);
      }
    }
    index.push_back(std::move(entry));
  }
  json root;
  root["samples"] = std::move(index);
  root["upsample"] = up;
  save_json_file(out_dir / "index.json", root);
}

}  // namespace mkc

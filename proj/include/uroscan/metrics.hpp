#pragma once

#include <span>
#include <string>
#include <vector>

#include "uroscan/dataset.hpp"
#include "uroscan/nn.hpp"

namespace uroscan::metrics {

struct ScoredSample {
  double score = 0.0;  // lesion-class probability in [0,1]
  data::Label label = data::Label::no_lesion;
  data::Procedure domain = data::Procedure::cys;
  int fold = -1;
  std::string path;  // sample identity for diagnostics
};

struct Confusion {
  int64_t tp = 0, fp = 0, tn = 0, fn = 0;
  int64_t total() const { return tp + fp + tn + fn; }
};

struct RocPoint {
  double fpr = 0.0, tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // from (0,0) to (1,1), threshold descending
  double auc = 0.0;
};

// Predicted lesion iff score >= t.
Confusion confusion_at_threshold(std::span<const ScoredSample> samples, double t);

// Threshold sweep over distinct scores; trapezoidal area gives ties half credit.
// Throws UndefinedRocError when either class is absent.
RocCurve roc_curve(std::span<const ScoredSample> samples);

// Runs the network over the manifest in eval mode and scores every sample with
// the lesion-class probability. The fold tag is attached verbatim.
std::vector<ScoredSample> evaluate(nn::Network& net, const data::DatasetManifest& manifest,
                                   int batch_size = 16, int fold = -1);

void write_scores_csv(const std::string& path, std::span<const ScoredSample> samples);
std::vector<ScoredSample> read_scores_csv(const std::string& path);

// One plotted curve: label plus its pooled scores.
struct NamedCurve {
  std::string label;
  RocCurve curve;
};

void write_roc_csv(const std::string& path, std::span<const NamedCurve> curves);
void write_roc_svg(const std::string& path, const std::string& title,
                   std::span<const NamedCurve> curves);

// Renders report.csv, cross_domain_step1.csv, step_delta.csv, reference.csv and
// per-panel ROC files from a training bundle directory into out_dir.
void write_report(const std::string& bundle_dir, const std::string& out_dir);

}  // namespace uroscan::metrics

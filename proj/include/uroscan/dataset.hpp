#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "uroscan/tensor.hpp"

namespace uroscan::data {

enum class Procedure { cys = 0, urs = 1 };
enum class Modality { wli = 0, nbi = 1 };
enum class Label { no_lesion = 0, lesion = 1 };

const char* to_string(Procedure p);
const char* to_string(Modality m);
const char* to_string(Label l);
Procedure procedure_from(const std::string& s);
Modality modality_from(const std::string& s);
Label label_from(const std::string& s);

// Inclusive pixel bounds of a synthetic lesion blob; valid only on lesion rows.
struct BBox {
  int64_t x0 = 0, y0 = 0, x1 = -1, y1 = -1;
  bool valid() const { return x1 >= x0 && y1 >= y0; }
  bool contains(int64_t x, int64_t y) const {
    return x >= x0 && x <= x1 && y >= y0 && y <= y1;
  }
};

struct Sample {
  std::string path;  // image file, absolute or relative to the manifest root
  Procedure procedure = Procedure::cys;
  Modality modality = Modality::wli;
  Label label = Label::no_lesion;
  std::string patient_id;
  std::string case_id;
  BBox bbox;  // generator ground truth; invalid when unknown
};

// Sample counts per (procedure x modality x label) cell.
struct Composition {
  std::array<int64_t, 8> counts{};  // index: proc*4 + mod*2 + label

  static int index(Procedure p, Modality m, Label l) {
    return static_cast<int>(p) * 4 + static_cast<int>(m) * 2 + static_cast<int>(l);
  }
  int64_t& at(Procedure p, Modality m, Label l) { return counts[index(p, m, l)]; }
  int64_t at(Procedure p, Modality m, Label l) const { return counts[index(p, m, l)]; }
  int64_t total() const;
  int64_t label_total(Label l) const;
  static Composition uniform(int64_t per_cell);
  bool operator==(const Composition&) const = default;
};

// Name of a composition cell, e.g. "cys_wli_lesion"; used in configs and reports.
std::string cell_name(Procedure p, Modality m, Label l);

struct DatasetManifest {
  std::vector<Sample> samples;
  Composition summary;

  size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

// Builds a manifest from rows and tallies the composition summary.
DatasetManifest make_manifest(std::vector<Sample> samples);

// Partition of a manifest into k folds.
struct FoldSplit {
  int k = 0;
  std::string mode;             // "by_label" or "by_patient_then_label"
  std::vector<int> assignment;  // sample index -> fold index in [0, k)

  std::vector<size_t> fold_indices(int fold) const;
  std::vector<size_t> complement_indices(int fold) const;
};

// Reads a manifest CSV with header path,procedure,modality,label,patient_id,case_id.
// Relative image paths are resolved against image_root. With verify_images set,
// every image is opened and decoded; all failures carry the offending row number.
DatasetManifest ingest_manifest(const std::string& csv_path,
                                const std::string& image_root,
                                bool verify_images = true);

void write_manifest_csv(const DatasetManifest& manifest, const std::string& csv_path);

struct SyntheticConfig {
  Composition counts;
  int64_t resolution = 64;  // square images
  uint64_t seed = 0;
  std::string out_dir;
};

// Writes deterministic synthetic images (plus manifest.csv and truth.csv) under
// out_dir and returns the manifest with absolute paths and blob ground truth.
DatasetManifest generate_synthetic(const SyntheticConfig& cfg);

// Blob bounding boxes emitted by the generator, keyed by relative image path.
std::map<std::string, BBox> read_ground_truth(const std::string& csv_path);

FoldSplit split_folds(const DatasetManifest& manifest, int k, const std::string& mode,
                      uint64_t seed);

DatasetManifest domain_filter(const DatasetManifest& manifest,
                              const std::vector<Procedure>& keep);

// Portable pixmap (P6, maxval 255) image I/O; tensors are [3,H,W] floats in [0,1].
Tensor load_image(const std::string& path);
void save_image(const std::string& path, const Tensor& img);

// Label detector for synthetic images. Pixels further than kOracleRange from
// the per-channel image median (in any channel) segment the blob; the blob's
// mean blue-vs-green contrast against the median then thresholds the label.
// By construction the score is 0 exactly on no-lesion images and positive on
// lesion images.
inline constexpr double kOracleRange = 0.15;
double synthetic_oracle_score(const Tensor& img);

}  // namespace uroscan::data

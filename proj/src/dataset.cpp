#include "uroscan/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <tuple>

#include "uroscan/common.hpp"
#include "uroscan/ops.hpp"

namespace uroscan::data {

namespace fs = std::filesystem;

const char* to_string(Procedure p) { return p == Procedure::cys ? "cys" : "urs"; }
const char* to_string(Modality m) { return m == Modality::wli ? "wli" : "nbi"; }
const char* to_string(Label l) { return l == Label::lesion ? "lesion" : "no_lesion"; }

Procedure procedure_from(const std::string& s) {
  if (s == "cys") return Procedure::cys;
  if (s == "urs") return Procedure::urs;
  throw ValidationError("unknown procedure '" + s + "' (want cys|urs)");
}

Modality modality_from(const std::string& s) {
  if (s == "wli") return Modality::wli;
  if (s == "nbi") return Modality::nbi;
  throw ValidationError("unknown modality '" + s + "' (want wli|nbi)");
}

Label label_from(const std::string& s) {
  if (s == "lesion") return Label::lesion;
  if (s == "no_lesion") return Label::no_lesion;
  throw ValidationError("unknown label '" + s + "' (want lesion|no_lesion)");
}

int64_t Composition::total() const {
  int64_t n = 0;
  for (int64_t c : counts) n += c;
  return n;
}

int64_t Composition::label_total(Label l) const {
  int64_t n = 0;
  for (int i = static_cast<int>(l); i < 8; i += 2) n += counts[i];
  return n;
}

Composition Composition::uniform(int64_t per_cell) {
  Composition c;
  c.counts.fill(per_cell);
  return c;
}

std::string cell_name(Procedure p, Modality m, Label l) {
  return std::string(to_string(p)) + "_" + to_string(m) + "_" + to_string(l);
}

DatasetManifest make_manifest(std::vector<Sample> samples) {
  DatasetManifest m;
  m.samples = std::move(samples);
  for (const auto& s : m.samples) m.summary.at(s.procedure, s.modality, s.label) += 1;
  return m;
}

std::vector<size_t> FoldSplit::fold_indices(int fold) const {
  if (fold < 0 || fold >= k) throw ValidationError("fold index out of range");
  std::vector<size_t> out;
  for (size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] == fold) out.push_back(i);
  return out;
}

std::vector<size_t> FoldSplit::complement_indices(int fold) const {
  if (fold < 0 || fold >= k) throw ValidationError("fold index out of range");
  std::vector<size_t> out;
  for (size_t i = 0; i < assignment.size(); ++i)
    if (assignment[i] != fold) out.push_back(i);
  return out;
}

namespace {

constexpr const char* kManifestHeader = "path,procedure,modality,label,patient_id,case_id";

std::vector<std::string> split_csv_row(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  fields.push_back(cur);
  return fields;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

std::string resolve_path(const std::string& path, const std::string& root) {
  if (root.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

}  // namespace

DatasetManifest ingest_manifest(const std::string& csv_path, const std::string& image_root,
                                bool verify_images) {
  std::ifstream is(csv_path);
  if (!is) throw IoError("cannot open manifest csv: " + csv_path);

  std::string line;
  if (!std::getline(is, line)) throw ValidationError(csv_path + ": empty file, header required");
  if (strip_cr(line) != kManifestHeader)
    throw ValidationError(csv_path + ": bad header, want '" + kManifestHeader + "'");

  std::vector<Sample> samples;
  int64_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto fields = split_csv_row(line);
    const std::string where = csv_path + " row " + std::to_string(row) + ": ";
    if (fields.size() != 6)
      throw ValidationError(where + "expected 6 fields, got " + std::to_string(fields.size()));
    if (fields[0].empty()) throw ValidationError(where + "empty image path");
    Sample s;
    try {
      s.procedure = procedure_from(fields[1]);
      s.modality = modality_from(fields[2]);
      s.label = label_from(fields[3]);
    } catch (const ValidationError& e) {
      throw ValidationError(where + e.what());
    }
    s.path = resolve_path(fields[0], image_root);
    s.patient_id = fields[4];
    s.case_id = fields[5];
    if (verify_images) {
      try {
        (void)load_image(s.path);
      } catch (const IoError& e) {
        throw IoError(where + e.what());
      }
    }
    samples.push_back(std::move(s));
  }
  return make_manifest(std::move(samples));
}

void write_manifest_csv(const DatasetManifest& manifest, const std::string& csv_path) {
  std::ofstream os(csv_path);
  if (!os) throw IoError("cannot write manifest csv: " + csv_path);
  os << kManifestHeader << "\n";
  for (const auto& s : manifest.samples)
    os << s.path << ',' << to_string(s.procedure) << ',' << to_string(s.modality) << ','
       << to_string(s.label) << ',' << s.patient_id << ',' << s.case_id << "\n";
  if (!os) throw IoError("short write: " + csv_path);
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace {

struct Palette {
  double bg[3];
  double lesion[3];
  double benign[3];
};

// Every image shows exactly one blob on the cell's background tint; the label
// decides whether it takes the lesion color or the benign color. With blob
// presence, size, position, and texture statistics shared by both classes,
// whole-image cues (brightness, texture energy, "is something there") carry
// no label signal — only the blob's color does. Cystoscopy lesions are dark
// red in both modalities; ureteroscopy lesions brighten the field, so lesion
// appearance does not carry over between procedures. Benign blobs sit in a
// yellow/green family kept far from every lesion color: their blue-vs-green
// contrast against the background is strongly negative while every lesion's
// is near zero, which is the statistic the label oracle thresholds.
Palette palette_for(Procedure p, Modality m) {
  const bool cys = p == Procedure::cys;
  Palette pal{};
  if (cys && m == Modality::wli)
    pal = {{0.78, 0.44, 0.40}, {0.45, 0.12, 0.10}, {0.88, 0.85, 0.50}};
  if (cys && m == Modality::nbi)
    pal = {{0.30, 0.55, 0.52}, {0.45, 0.12, 0.10}, {0.55, 0.80, 0.38}};
  if (!cys && m == Modality::wli)
    pal = {{0.82, 0.58, 0.38}, {0.90, 0.78, 0.62}, {0.66, 0.64, 0.14}};
  if (!cys && m == Modality::nbi)
    pal = {{0.25, 0.45, 0.60}, {0.55, 0.70, 0.84}, {0.28, 0.60, 0.30}};
  return pal;
}

// Texture model. Blobs of either class carry the same chromatic speckle,
// whose color balance follows the procedure (red-heavy in cystoscopy,
// blue-heavy in ureteroscopy). Every image also gets an achromatic grain
// field with a per-image amplitude and a per-channel exposure offset, both
// label-independent. Off-blob pixels stay within kOracleRange of the image
// median in every channel (grain + background noise + vignette slope +
// quantization < 0.15), so the oracle's blob segmentation is exact.
constexpr double kSpeckleCys[3] = {0.10, 0.06, 0.05};
constexpr double kSpeckleUrs[3] = {0.05, 0.06, 0.10};
constexpr double kBgNoise = 0.006;
constexpr double kGrainLo = 0.015;
constexpr double kGrainHi = 0.048;
constexpr double kVignette = 0.05;
constexpr double kLiftLo = -0.10;
constexpr double kLiftHi = 0.02;

struct BlobShape {
  double cx, cy, rx, ry;
};

BlobShape sample_blob(Rng& rng, int64_t res) {
  BlobShape b{};
  b.rx = rng.uniform(0.20, 0.28) * static_cast<double>(res);
  b.ry = rng.uniform(0.20, 0.28) * static_cast<double>(res);
  b.cx = rng.uniform(b.rx + 2.0, static_cast<double>(res) - 1.0 - b.rx - 2.0);
  b.cy = rng.uniform(b.ry + 2.0, static_cast<double>(res) - 1.0 - b.ry - 2.0);
  return b;
}

Tensor render(Rng& rng, int64_t res, const Palette& pal, const double (&speckle)[3],
              bool lesion, BBox& bbox) {
  Tensor img(Shape{3, res, res}, Dtype::f32);
  auto px = img.data<float>();
  const auto at = [&](int c, int64_t y, int64_t x) -> float& {
    return px[(c * res + y) * res + x];
  };

  const BlobShape blob = sample_blob(rng, res);
  const double* fill = lesion ? pal.lesion : pal.benign;
  double lift[3];
  for (double& l : lift) l = rng.uniform(kLiftLo, kLiftHi);
  const double grain = rng.uniform(kGrainLo, kGrainHi);

  const double mid = (static_cast<double>(res) - 1.0) / 2.0;
  const double maxd = std::sqrt(2.0) * mid;
  bbox = BBox{};
  int64_t x0 = res, y0 = res, x1 = -1, y1 = -1;
  for (int64_t y = 0; y < res; ++y)
    for (int64_t x = 0; x < res; ++x) {
      const double d = std::hypot(static_cast<double>(x) - mid,
                                  static_cast<double>(y) - mid) / maxd;
      const double shade = 1.0 - kVignette * d;
      const double gray = rng.uniform(-grain, grain);
      double v[3];
      for (int c = 0; c < 3; ++c)
        v[c] = pal.bg[c] * shade + rng.uniform(-kBgNoise, kBgNoise);
      const double u = (static_cast<double>(x) - blob.cx) / blob.rx;
      const double w = (static_cast<double>(y) - blob.cy) / blob.ry;
      if (u * u + w * w <= 1.0) {
        for (int c = 0; c < 3; ++c)
          v[c] = fill[c] + rng.uniform(-speckle[c], speckle[c]);
        x0 = std::min(x0, x);
        x1 = std::max(x1, x);
        y0 = std::min(y0, y);
        y1 = std::max(y1, y);
      }
      for (int c = 0; c < 3; ++c)
        at(c, y, x) = static_cast<float>(std::clamp(v[c] + gray + lift[c], 0.0, 1.0));
    }
  if (lesion) bbox = BBox{x0, y0, x1, y1};
  return img;
}

}  // namespace

DatasetManifest generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.resolution < 16)
    throw ValidationError("synthetic resolution must be at least 16, got " +
                          std::to_string(cfg.resolution));
  for (int64_t c : cfg.counts.counts)
    if (c < 0) throw ValidationError("negative sample count in composition");
  if (cfg.out_dir.empty()) throw ValidationError("synthetic out_dir must be set");

  const fs::path root(cfg.out_dir);
  std::error_code ec;
  fs::create_directories(root / "images", ec);
  if (ec) throw IoError("cannot create " + (root / "images").string() + ": " + ec.message());

  std::vector<Sample> rel;  // manifest rows with paths relative to out_dir
  for (Procedure p : {Procedure::cys, Procedure::urs})
    for (Modality m : {Modality::wli, Modality::nbi})
      for (Label l : {Label::no_lesion, Label::lesion}) {
        const std::string cell = cell_name(p, m, l);
        const int64_t n = cfg.counts.at(p, m, l);
        for (int64_t i = 0; i < n; ++i) {
          Rng rng(mix_seed(cfg.seed, fnv1a64(cell), static_cast<uint64_t>(i)));
          BBox bbox;
          const auto& speckle = p == Procedure::cys ? kSpeckleCys : kSpeckleUrs;
          const Tensor img = render(rng, cfg.resolution, palette_for(p, m), speckle,
                                    l == Label::lesion, bbox);

          char idx[24];
          std::snprintf(idx, sizeof idx, "%04lld", static_cast<long long>(i));
          Sample s;
          s.case_id = cell + "_" + idx;
          s.path = "images/" + s.case_id + ".ppm";
          s.procedure = p;
          s.modality = m;
          s.label = l;
          s.patient_id =
              std::string(to_string(p)) + "P" + std::to_string(1 + i % 3);
          s.bbox = bbox;
          save_image((root / s.path).string(), img);
          rel.push_back(std::move(s));
        }
      }

  {
    DatasetManifest relm = make_manifest(rel);
    write_manifest_csv(relm, (root / "manifest.csv").string());
    std::ofstream truth(root / "truth.csv");
    if (!truth) throw IoError("cannot write " + (root / "truth.csv").string());
    truth << "path,x0,y0,x1,y1\n";
    for (const auto& s : relm.samples)
      if (s.bbox.valid())
        truth << s.path << ',' << s.bbox.x0 << ',' << s.bbox.y0 << ',' << s.bbox.x1 << ','
              << s.bbox.y1 << "\n";
  }

  for (auto& s : rel) s.path = (root / s.path).string();
  return make_manifest(std::move(rel));
}

std::map<std::string, BBox> read_ground_truth(const std::string& csv_path) {
  std::ifstream is(csv_path);
  if (!is) throw IoError("cannot open ground truth csv: " + csv_path);
  std::string line;
  if (!std::getline(is, line) || strip_cr(line) != "path,x0,y0,x1,y1")
    throw ValidationError(csv_path + ": bad ground truth header");
  std::map<std::string, BBox> out;
  int64_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    line = strip_cr(line);
    if (line.empty()) continue;
    const auto f = split_csv_row(line);
    if (f.size() != 5)
      throw ValidationError(csv_path + " row " + std::to_string(row) + ": expected 5 fields");
    try {
      out[f[0]] = BBox{std::stoll(f[1]), std::stoll(f[2]), std::stoll(f[3]), std::stoll(f[4])};
    } catch (const std::exception&) {
      throw ValidationError(csv_path + " row " + std::to_string(row) + ": bad bounds");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fold splitting

FoldSplit split_folds(const DatasetManifest& manifest, int k, const std::string& mode,
                      uint64_t seed) {
  if (mode != "by_label" && mode != "by_patient_then_label")
    throw ValidationError("unknown fold mode '" + mode +
                          "' (want by_label|by_patient_then_label)");
  if (k < 1) throw ValidationError("fold count must be positive");

  FoldSplit split;
  split.k = k;
  split.mode = mode;
  split.assignment.assign(manifest.size(), -1);

  if (mode == "by_label") {
    if (static_cast<size_t>(k) > manifest.size())
      throw ValidationError("k=" + std::to_string(k) + " exceeds sample count " +
                            std::to_string(manifest.size()));
    for (Label l : {Label::no_lesion, Label::lesion}) {
      std::vector<size_t> idx;
      for (size_t i = 0; i < manifest.size(); ++i)
        if (manifest.samples[i].label == l) idx.push_back(i);
      Rng rng(mix_seed(seed, static_cast<uint64_t>(l) + 1));
      deterministic_shuffle(idx, rng);
      for (size_t j = 0; j < idx.size(); ++j)
        split.assignment[idx[j]] = static_cast<int>(j % static_cast<size_t>(k));
    }
    return split;
  }

  // by_patient_then_label: whole patients go to one fold; lesion counts balanced.
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < manifest.size(); ++i)
    groups[manifest.samples[i].patient_id].push_back(i);
  if (static_cast<size_t>(k) > groups.size())
    throw ValidationError("k=" + std::to_string(k) + " exceeds patient count " +
                          std::to_string(groups.size()));

  std::vector<const std::vector<size_t>*> order;
  for (const auto& [pid, idx] : groups) order.push_back(&idx);
  Rng rng(mix_seed(seed, 0x70617469656e7473ULL));
  deterministic_shuffle(order, rng);

  std::vector<int64_t> fold_lesions(k, 0), fold_total(k, 0);
  for (const auto* idx : order) {
    int64_t lesions = 0;
    for (size_t i : *idx)
      lesions += manifest.samples[i].label == Label::lesion ? 1 : 0;
    int best = 0;
    for (int f = 1; f < k; ++f)
      if (std::tuple(fold_lesions[f], fold_total[f], f) <
          std::tuple(fold_lesions[best], fold_total[best], best))
        best = f;
    for (size_t i : *idx) split.assignment[i] = best;
    fold_lesions[best] += lesions;
    fold_total[best] += static_cast<int64_t>(idx->size());
  }
  return split;
}

DatasetManifest domain_filter(const DatasetManifest& manifest,
                              const std::vector<Procedure>& keep) {
  if (keep.empty()) throw ValidationError("domain filter needs at least one procedure");
  std::set<Procedure> want(keep.begin(), keep.end());
  std::vector<Sample> out;
  for (const auto& s : manifest.samples)
    if (want.count(s.procedure)) out.push_back(s);
  return make_manifest(std::move(out));
}

// ---------------------------------------------------------------------------
// Portable pixmap I/O

namespace {

// Reads the next header token, skipping whitespace and '#' comments.
std::string ppm_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  return tok;
}

}  // namespace

Tensor load_image(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image: " + path);
  if (ppm_token(is) != "P6") throw IoError("not a binary PPM (P6) image: " + path);

  int64_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoll(ppm_token(is));
    h = std::stoll(ppm_token(is));
    maxval = std::stoll(ppm_token(is));
  } catch (const std::exception&) {
    throw IoError("malformed PPM header: " + path);
  }
  if (w < 1 || h < 1) throw IoError("bad PPM dimensions: " + path);
  if (maxval != 255) throw IoError("unsupported PPM maxval (want 255): " + path);

  std::vector<unsigned char> raw(static_cast<size_t>(w) * static_cast<size_t>(h) * 3);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<size_t>(is.gcount()) != raw.size())
    throw IoError("truncated PPM pixel data: " + path);

  Tensor img(Shape{3, h, w}, Dtype::f32);
  auto px = img.data<float>();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c)
        px[(c * h + y) * w + x] =
            static_cast<float>(raw[(static_cast<size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

void save_image(const std::string& path, const Tensor& img) {
  if (img.shape().size() != 3 || img.shape()[0] != 3)
    throw ShapeError("save_image wants [3,H,W], got " + shape_str(img.shape()));
  ops::ensure_finite(img, "save_image");
  const int64_t h = img.shape()[1], w = img.shape()[2];

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write image: " + path);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> raw(static_cast<size_t>(w) * static_cast<size_t>(h) * 3);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.value_at((c * h + y) * w + x), 0.0, 1.0);
        raw[(static_cast<size_t>(y) * w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw IoError("short write: " + path);
}

double synthetic_oracle_score(const Tensor& img) {
  if (img.shape().size() != 3 || img.shape()[0] != 3)
    throw ShapeError("oracle wants [3,H,W], got " + shape_str(img.shape()));
  const int64_t h = img.shape()[1], w = img.shape()[2];
  const int64_t hw = h * w;
  const auto value = [&](int64_t c, int64_t i) { return img.value_at(c * hw + i); };

  // Background reference: the per-channel median. The blob covers well under
  // half the frame, and the exposure offset and grain shift blob and
  // background alike, so the median tracks the shifted background tint.
  double med[3];
  for (int64_t c = 0; c < 3; ++c) {
    std::vector<double> vals(static_cast<size_t>(hw));
    for (int64_t i = 0; i < hw; ++i) vals[static_cast<size_t>(i)] = value(c, i);
    auto mid = vals.begin() + static_cast<ptrdiff_t>(hw / 2);
    std::nth_element(vals.begin(), mid, vals.end());
    med[c] = *mid;
  }

  // Blob pixels stand out from the median by more than kOracleRange in some
  // channel; off-blob pixels never do. Lesion colors keep the blue-green
  // balance of their background while benign colors push it far negative, so
  // the mean balance shift over the blob separates the classes exactly.
  double shift = 0.0;
  int64_t blob = 0;
  for (int64_t i = 0; i < hw; ++i) {
    double dev = 0.0;
    for (int64_t c = 0; c < 3; ++c)
      dev = std::max(dev, std::fabs(value(c, i) - med[c]));
    if (dev > kOracleRange) {
      shift += (value(2, i) - med[2]) - (value(1, i) - med[1]);
      ++blob;
    }
  }
  if (blob == 0) return 0.0;
  return std::max(0.0, 0.10 + shift / static_cast<double>(blob));
}

}  // namespace uroscan::data

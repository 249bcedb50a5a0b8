#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "uroscan/dataset.hpp"

using namespace uroscan;
using namespace uroscan::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& stem) {
  fs::path p = fs::temp_directory_path() / ("uroscan_ds_" + stem);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p);
  os << text;
}

// Synthesizes a manifest CSV with `n` rows per given cell (no image files).
std::string rows_for(Procedure p, Modality m, Label l, int64_t n) {
  std::string out;
  for (int64_t i = 0; i < n; ++i)
    out += "img_" + cell_name(p, m, l) + "_" + std::to_string(i) + ".ppm," +
           to_string(p) + "," + to_string(m) + "," + to_string(l) + ",pat" +
           std::to_string(i % 7) + ",case" + std::to_string(i) + "\n";
  return out;
}

const char* kHeader = "path,procedure,modality,label,patient_id,case_id\n";

// Clinical composition used as the ingestion stress fixture.
DatasetManifest clinical_fixture(const fs::path& dir) {
  std::string csv = kHeader;
  csv += rows_for(Procedure::cys, Modality::nbi, Label::lesion, 337);
  csv += rows_for(Procedure::cys, Modality::wli, Label::lesion, 906);
  csv += rows_for(Procedure::cys, Modality::nbi, Label::no_lesion, 298);
  csv += rows_for(Procedure::cys, Modality::wli, Label::no_lesion, 1346);
  csv += rows_for(Procedure::urs, Modality::nbi, Label::lesion, 28);
  csv += rows_for(Procedure::urs, Modality::wli, Label::lesion, 1801);
  csv += rows_for(Procedure::urs, Modality::nbi, Label::no_lesion, 227);
  csv += rows_for(Procedure::urs, Modality::wli, Label::no_lesion, 1158);
  write_text(dir / "clinical.csv", csv);
  return ingest_manifest((dir / "clinical.csv").string(), dir.string(), false);
}

Tensor random_image(Rng& rng, int64_t h, int64_t w) {
  Tensor img(Shape{3, h, w}, Dtype::f32);
  for (int64_t i = 0; i < img.numel(); ++i) img.set_value(i, rng.uniform());
  return img;
}

}  // namespace

TEST_CASE("enum names round-trip and reject strangers") {
  CHECK(procedure_from("cys") == Procedure::cys);
  CHECK(procedure_from("urs") == Procedure::urs);
  CHECK(modality_from("wli") == Modality::wli);
  CHECK(modality_from("nbi") == Modality::nbi);
  CHECK(label_from("lesion") == Label::lesion);
  CHECK(label_from("no_lesion") == Label::no_lesion);
  CHECK_THROWS_AS(procedure_from("colonoscopy"), ValidationError);
  CHECK_THROWS_AS(modality_from("uv"), ValidationError);
  CHECK_THROWS_AS(label_from("maybe"), ValidationError);
  CHECK(cell_name(Procedure::urs, Modality::nbi, Label::lesion) == "urs_nbi_lesion");
}

TEST_CASE("composition tallies samples exactly") {
  std::vector<Sample> rows(5);
  rows[0] = {"a", Procedure::cys, Modality::wli, Label::lesion, "p1", "c1", {}};
  rows[1] = {"b", Procedure::cys, Modality::wli, Label::lesion, "p1", "c2", {}};
  rows[2] = {"c", Procedure::cys, Modality::nbi, Label::no_lesion, "p2", "c3", {}};
  rows[3] = {"d", Procedure::urs, Modality::wli, Label::no_lesion, "p3", "c4", {}};
  rows[4] = {"e", Procedure::urs, Modality::nbi, Label::lesion, "p3", "c5", {}};
  DatasetManifest m = make_manifest(rows);
  CHECK(m.summary.at(Procedure::cys, Modality::wli, Label::lesion) == 2);
  CHECK(m.summary.at(Procedure::cys, Modality::nbi, Label::no_lesion) == 1);
  CHECK(m.summary.at(Procedure::urs, Modality::wli, Label::no_lesion) == 1);
  CHECK(m.summary.at(Procedure::urs, Modality::nbi, Label::lesion) == 1);
  CHECK(m.summary.at(Procedure::urs, Modality::nbi, Label::no_lesion) == 0);
  CHECK(m.summary.total() == 5);
  CHECK(m.summary.label_total(Label::lesion) == 3);
  CHECK(m.summary.label_total(Label::no_lesion) == 2);
  CHECK(Composition::uniform(10).total() == 80);
}

TEST_CASE("header-only csv yields an empty manifest") {
  const fs::path dir = temp_dir("empty");
  write_text(dir / "m.csv", kHeader);
  DatasetManifest m = ingest_manifest((dir / "m.csv").string(), "", false);
  CHECK(m.empty());
  CHECK(m.summary.total() == 0);
  fs::remove_all(dir);
}

TEST_CASE("a four-row csv covering each procedure-label cell counts ones") {
  const fs::path dir = temp_dir("four");
  std::string csv = kHeader;
  csv += rows_for(Procedure::cys, Modality::wli, Label::lesion, 1);
  csv += rows_for(Procedure::cys, Modality::wli, Label::no_lesion, 1);
  csv += rows_for(Procedure::urs, Modality::nbi, Label::lesion, 1);
  csv += rows_for(Procedure::urs, Modality::nbi, Label::no_lesion, 1);
  write_text(dir / "m.csv", csv);
  DatasetManifest m = ingest_manifest((dir / "m.csv").string(), dir.string(), false);
  REQUIRE(m.size() == 4);
  CHECK(m.summary.at(Procedure::cys, Modality::wli, Label::lesion) == 1);
  CHECK(m.summary.at(Procedure::cys, Modality::wli, Label::no_lesion) == 1);
  CHECK(m.summary.at(Procedure::urs, Modality::nbi, Label::lesion) == 1);
  CHECK(m.summary.at(Procedure::urs, Modality::nbi, Label::no_lesion) == 1);
  // Relative paths are resolved against the image root.
  CHECK(m.samples[0].path.rfind(dir.string(), 0) == 0);
  fs::remove_all(dir);
}

TEST_CASE("ingestion reproduces the clinical composition totals") {
  const fs::path dir = temp_dir("clinical");
  DatasetManifest m = clinical_fixture(dir);
  CHECK(m.summary.total() == 6101);
  CHECK(m.summary.at(Procedure::cys, Modality::nbi, Label::lesion) == 337);
  CHECK(m.summary.at(Procedure::urs, Modality::wli, Label::no_lesion) == 1158);

  DatasetManifest cys = domain_filter(m, {Procedure::cys});
  DatasetManifest urs = domain_filter(m, {Procedure::urs});
  DatasetManifest both = domain_filter(m, {Procedure::cys, Procedure::urs});
  CHECK(cys.summary.total() == 2887);
  CHECK(urs.summary.total() == 3214);
  CHECK(both.summary.total() == 6101);
  CHECK(both.size() == m.size());
  for (const auto& s : cys.samples) CHECK(s.procedure == Procedure::cys);
  CHECK_THROWS_AS(domain_filter(m, {}), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("csv errors carry the offending row number") {
  const fs::path dir = temp_dir("badrows");

  SUBCASE("bad header") {
    write_text(dir / "m.csv", "path,label\n");
    CHECK_THROWS_AS(ingest_manifest((dir / "m.csv").string(), "", false), ValidationError);
  }
  SUBCASE("unknown enum") {
    write_text(dir / "m.csv", std::string(kHeader) + "a.ppm,cys,wli,lesion,p,c\n" +
                                  "b.ppm,cys,xray,lesion,p,c\n");
    try {
      ingest_manifest((dir / "m.csv").string(), "", false);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("row 3") != std::string::npos);
      CHECK(std::string(e.what()).find("xray") != std::string::npos);
    }
  }
  SUBCASE("wrong field count") {
    write_text(dir / "m.csv", std::string(kHeader) + "a.ppm,cys,wli,lesion,p\n");
    try {
      ingest_manifest((dir / "m.csv").string(), "", false);
      FAIL("expected a validation error");
    } catch (const ValidationError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
  }
  SUBCASE("missing image file") {
    write_text(dir / "m.csv", std::string(kHeader) + "ghost.ppm,cys,wli,lesion,p,c\n");
    try {
      ingest_manifest((dir / "m.csv").string(), dir.string(), true);
      FAIL("expected an io error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
    }
  }
  SUBCASE("undecodable image file") {
    write_text(dir / "junk.ppm", "this is not a pixmap");
    write_text(dir / "m.csv", std::string(kHeader) + "junk.ppm,cys,wli,lesion,p,c\n");
    try {
      ingest_manifest((dir / "m.csv").string(), dir.string(), true);
      FAIL("expected an io error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("row 2") != std::string::npos);
      CHECK(std::string(e.what()).find("P6") != std::string::npos);
    }
  }
  SUBCASE("missing csv") {
    CHECK_THROWS_AS(ingest_manifest((dir / "nope.csv").string(), "", false), IoError);
  }
  fs::remove_all(dir);
}

TEST_CASE("ppm io round-trips to quantization precision") {
  const fs::path dir = temp_dir("ppm");
  Rng rng(9);
  Tensor img = random_image(rng, 13, 17);
  const fs::path p = dir / "x.ppm";
  save_image(p.string(), img);
  Tensor back = load_image(p.string());
  REQUIRE(back.shape() == Shape{3, 13, 17});
  double max_err = 0;
  for (int64_t i = 0; i < img.numel(); ++i)
    max_err = std::max(max_err, std::abs(img.value_at(i) - back.value_at(i)));
  CHECK(max_err <= 0.5 / 255.0 + 1e-9);

  // A second decode of re-encoded bytes is exact: quantization is idempotent.
  save_image((dir / "y.ppm").string(), back);
  Tensor again = load_image((dir / "y.ppm").string());
  CHECK(again.bitwise_equal(back));

  SUBCASE("shape and header validation") {
    CHECK_THROWS_AS(save_image((dir / "z.ppm").string(), Tensor(Shape{1, 4, 4}, Dtype::f32)),
                    ShapeError);
    write_text(dir / "trunc.ppm", "P6\n4 4\n255\nab");
    CHECK_THROWS_AS(load_image((dir / "trunc.ppm").string()), IoError);
    write_text(dir / "max.ppm", "P6\n1 1\n65535\naaaaaa");
    CHECK_THROWS_AS(load_image((dir / "max.ppm").string()), IoError);
  }
  SUBCASE("comments in headers are tolerated") {
    write_text(dir / "c.ppm", "P6\n# a comment\n1 1\n255\nabc");
    Tensor t = load_image((dir / "c.ppm").string());
    CHECK(t.shape() == Shape{3, 1, 1});
    CHECK(t.value_at(0) == doctest::Approx(97.0 / 255.0));
  }
  fs::remove_all(dir);
}

TEST_CASE("the generator honors the requested composition exactly") {
  const fs::path dir = temp_dir("gen");
  SyntheticConfig cfg{Composition::uniform(10), 32, 77, (dir / "out").string()};
  DatasetManifest m = generate_synthetic(cfg);

  CHECK(m.size() == 80);  // 2 procedures x 2 modalities x 2 labels x 10
  CHECK(m.summary == cfg.counts);
  CHECK(fs::exists(dir / "out" / "manifest.csv"));
  CHECK(fs::exists(dir / "out" / "truth.csv"));

  // Manifest csv re-ingests to the same composition, with decodable images.
  DatasetManifest back =
      ingest_manifest((dir / "out" / "manifest.csv").string(), (dir / "out").string(), true);
  CHECK(back.summary == m.summary);

  // Ground truth has one row per lesion sample and matches the in-memory boxes.
  auto truth = read_ground_truth((dir / "out" / "truth.csv").string());
  CHECK(truth.size() == 40);
  int checked = 0;
  for (const auto& s : m.samples) {
    CHECK(s.bbox.valid() == (s.label == Label::lesion));
    if (!s.bbox.valid()) continue;
    const auto rel = "images/" + s.case_id + ".ppm";
    REQUIRE(truth.count(rel) == 1);
    const BBox& t = truth.at(rel);
    CHECK(t.x0 == s.bbox.x0);
    CHECK(t.y0 == s.bbox.y0);
    CHECK(t.x1 == s.bbox.x1);
    CHECK(t.y1 == s.bbox.y1);
    CHECK(t.x0 >= 0);
    CHECK(t.x1 < 32);
    ++checked;
  }
  CHECK(checked == 40);
  fs::remove_all(dir);
}

TEST_CASE("generation is bitwise deterministic in the seed") {
  const fs::path dir = temp_dir("gendet");
  SyntheticConfig a{Composition::uniform(2), 24, 5, (dir / "a").string()};
  SyntheticConfig b{Composition::uniform(2), 24, 5, (dir / "b").string()};
  SyntheticConfig c{Composition::uniform(2), 24, 6, (dir / "c").string()};
  DatasetManifest ma = generate_synthetic(a);
  DatasetManifest mb = generate_synthetic(b);
  DatasetManifest mc = generate_synthetic(c);

  bool any_differs = false;
  for (size_t i = 0; i < ma.size(); ++i) {
    Tensor ia = load_image(ma.samples[i].path);
    Tensor ib = load_image(mb.samples[i].path);
    Tensor ic = load_image(mc.samples[i].path);
    CHECK(ia.bitwise_equal(ib));
    any_differs = any_differs || !ia.bitwise_equal(ic);
  }
  CHECK(any_differs);
  fs::remove_all(dir);
}

TEST_CASE("generator rejects bad requests") {
  const fs::path dir = temp_dir("genbad");
  SyntheticConfig cfg{Composition::uniform(1), 0, 1, (dir / "o").string()};
  CHECK_THROWS_AS(generate_synthetic(cfg), ValidationError);
  cfg.resolution = 32;
  cfg.counts.at(Procedure::cys, Modality::wli, Label::lesion) = -1;
  CHECK_THROWS_AS(generate_synthetic(cfg), ValidationError);
  cfg.counts = Composition::uniform(1);
  cfg.out_dir.clear();
  CHECK_THROWS_AS(generate_synthetic(cfg), ValidationError);
  fs::remove_all(dir);
}

TEST_CASE("a blob-color oracle recovers every synthetic label") {
  const fs::path dir = temp_dir("oracle");
  SyntheticConfig cfg{Composition::uniform(6), 40, 123, (dir / "o").string()};
  DatasetManifest m = generate_synthetic(cfg);

  for (const auto& s : m.samples) {
    Tensor img = load_image(s.path);
    const double score = synthetic_oracle_score(img);
    if (s.label == Label::lesion) {
      CHECK(score > 0.0);
    } else {
      CHECK(score == 0.0);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("lesion pixels sit inside the recorded bounding box") {
  const fs::path dir = temp_dir("bbox");
  SyntheticConfig cfg{Composition::uniform(4), 48, 321, (dir / "o").string()};
  DatasetManifest m = generate_synthetic(cfg);

  for (const auto& s : m.samples) {
    if (s.label != Label::lesion) continue;
    Tensor img = load_image(s.path);
    const int64_t h = img.shape()[1], w = img.shape()[2];
    double med[3];
    for (int64_t c = 0; c < 3; ++c) {
      std::vector<double> vals;
      for (int64_t i = 0; i < h * w; ++i) vals.push_back(img.value_at(c * h * w + i));
      auto mid = vals.begin() + static_cast<ptrdiff_t>(vals.size() / 2);
      std::nth_element(vals.begin(), mid, vals.end());
      med[c] = *mid;
    }
    // Every pixel that stands out from the background lies inside the box.
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        double dev = 0.0;
        for (int64_t c = 0; c < 3; ++c)
          dev = std::max(dev, std::fabs(img.value_at((c * h + y) * w + x) - med[c]));
        if (dev > kOracleRange) {
          CHECK(x >= s.bbox.x0);
          CHECK(x <= s.bbox.x1);
          CHECK(y >= s.bbox.y0);
          CHECK(y <= s.bbox.y1);
        }
      }
  }
  fs::remove_all(dir);
}

TEST_CASE("label-stratified folds balance both classes") {
  // Nine samples, three lesion: every fold gets one lesion and two others.
  std::vector<Sample> rows;
  for (int i = 0; i < 9; ++i) {
    Sample s{"img" + std::to_string(i), Procedure::cys, Modality::wli,
             i < 3 ? Label::lesion : Label::no_lesion, "p" + std::to_string(i),
             "c" + std::to_string(i), {}};
    rows.push_back(s);
  }
  DatasetManifest m = make_manifest(rows);
  FoldSplit split = split_folds(m, 3, "by_label", 42);

  REQUIRE(split.assignment.size() == 9);
  for (int f = 0; f < 3; ++f) {
    auto idx = split.fold_indices(f);
    CHECK(idx.size() == 3);
    int lesions = 0;
    for (size_t i : idx) lesions += m.samples[i].label == Label::lesion ? 1 : 0;
    CHECK(lesions == 1);
  }
}

TEST_CASE("folds partition the manifest exactly") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 10 + static_cast<int>(rng.uniform_index(111));
    const int lesions = 3 + static_cast<int>(rng.uniform_index(static_cast<size_t>(n - 5)));
    std::vector<Sample> rows;
    for (int i = 0; i < n; ++i)
      rows.push_back({"i" + std::to_string(i), Procedure::cys, Modality::wli,
                      i < lesions ? Label::lesion : Label::no_lesion, "p", "c", {}});
    DatasetManifest m = make_manifest(rows);
    FoldSplit split = split_folds(m, 3, "by_label", 1000 + trial);

    // Disjoint and exhaustive.
    std::set<size_t> seen;
    for (int f = 0; f < 3; ++f)
      for (size_t i : split.fold_indices(f)) CHECK(seen.insert(i).second);
    CHECK(seen.size() == m.size());

    // Class counts within one sample of the global proportion.
    for (Label l : {Label::lesion, Label::no_lesion}) {
      const int64_t total = m.summary.label_total(l);
      for (int f = 0; f < 3; ++f) {
        int64_t got = 0;
        for (size_t i : split.fold_indices(f))
          got += m.samples[i].label == l ? 1 : 0;
        CHECK(std::abs(got * 3 - total) <= 3);  // |got - total/3| <= 1
      }
    }

    // Complement is the union of the other folds.
    auto train = split.complement_indices(0);
    CHECK(train.size() + split.fold_indices(0).size() == m.size());
  }
}

TEST_CASE("fold splitting is deterministic and seed-sensitive") {
  std::vector<Sample> rows;
  for (int i = 0; i < 60; ++i)
    rows.push_back({"i" + std::to_string(i), Procedure::urs, Modality::nbi,
                    i % 2 ? Label::lesion : Label::no_lesion, "p" + std::to_string(i), "c", {}});
  DatasetManifest m = make_manifest(rows);
  CHECK(split_folds(m, 3, "by_label", 5).assignment ==
        split_folds(m, 3, "by_label", 5).assignment);
  CHECK(split_folds(m, 3, "by_label", 5).assignment !=
        split_folds(m, 3, "by_label", 6).assignment);
}

TEST_CASE("single fold and oversized k edge cases") {
  std::vector<Sample> rows;
  for (int i = 0; i < 5; ++i)
    rows.push_back({"i" + std::to_string(i), Procedure::cys, Modality::wli,
                    i < 2 ? Label::lesion : Label::no_lesion, "p" + std::to_string(i % 2),
                    "c", {}});
  DatasetManifest m = make_manifest(rows);

  FoldSplit one = split_folds(m, 1, "by_label", 3);
  CHECK(one.fold_indices(0).size() == m.size());

  CHECK_THROWS_AS(split_folds(m, 6, "by_label", 3), ValidationError);
  CHECK_THROWS_AS(split_folds(m, 3, "by_patient_then_label", 3), ValidationError);  // 2 patients
  CHECK_THROWS_AS(split_folds(m, 0, "by_label", 3), ValidationError);
  CHECK_THROWS_AS(split_folds(m, 2, "random", 3), ValidationError);
}

TEST_CASE("patient folds never split a patient") {
  const fs::path dir = temp_dir("patients");
  SyntheticConfig cfg{Composition::uniform(5), 24, 9, (dir / "o").string()};
  DatasetManifest m = generate_synthetic(cfg);  // six distinct patients

  std::set<std::string> patients;
  for (const auto& s : m.samples) patients.insert(s.patient_id);
  CHECK(patients.size() == 6);

  FoldSplit split = split_folds(m, 3, "by_patient_then_label", 11);
  std::map<std::string, std::set<int>> folds_of;
  for (size_t i = 0; i < m.size(); ++i)
    folds_of[m.samples[i].patient_id].insert(split.assignment[i]);
  for (const auto& [pid, folds] : folds_of) CHECK(folds.size() == 1);

  // All three folds are populated.
  for (int f = 0; f < 3; ++f) CHECK(!split.fold_indices(f).empty());
  fs::remove_all(dir);
}

#include "uroscan/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"
#include "uroscan/common.hpp"
#include "uroscan/ops.hpp"

namespace uroscan::metrics {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_scores(std::span<const ScoredSample> samples) {
  if (samples.empty()) throw ValidationError("no scored samples");
  for (const auto& s : samples)
    if (!std::isfinite(s.score) || s.score < 0.0 || s.score > 1.0)
      throw ValidationError("score out of [0,1] for sample '" + s.path + "'");
}

std::string fmt(double v, const char* spec = "%.12g") {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

Confusion confusion_at_threshold(std::span<const ScoredSample> samples, double t) {
  check_scores(samples);
  Confusion c;
  for (const auto& s : samples) {
    const bool pred = s.score >= t;
    const bool pos = s.label == data::Label::lesion;
    c.tp += pred && pos;
    c.fp += pred && !pos;
    c.tn += !pred && !pos;
    c.fn += !pred && pos;
  }
  return c;
}

RocCurve roc_curve(std::span<const ScoredSample> samples) {
  check_scores(samples);
  int64_t pos = 0, neg = 0;
  for (const auto& s : samples) (s.label == data::Label::lesion ? pos : neg) += 1;
  if (pos == 0 || neg == 0)
    throw UndefinedRocError("ROC undefined: need both classes, got " + std::to_string(pos) +
                            " lesion / " + std::to_string(neg) + " no-lesion samples");

  std::vector<std::pair<double, int>> v;
  v.reserve(samples.size());
  for (const auto& s : samples) v.emplace_back(s.score, s.label == data::Label::lesion ? 1 : 0);
  std::sort(v.begin(), v.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });

  RocCurve out;
  out.points.push_back({0.0, 0.0});
  int64_t tp = 0, fp = 0;
  double prev_fpr = 0.0, prev_tpr = 0.0;
  size_t i = 0;
  while (i < v.size()) {
    const double score = v[i].first;
    for (; i < v.size() && v[i].first == score; ++i) (v[i].second ? tp : fp) += 1;
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
    out.auc += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    out.points.push_back({fpr, tpr});
    prev_fpr = fpr;
    prev_tpr = tpr;
  }
  return out;
}

std::vector<ScoredSample> evaluate(nn::Network& net, const data::DatasetManifest& manifest,
                                   int batch_size, int fold) {
  if (net.spec.classes != 2)
    throw ValidationError("evaluate needs a two-class network, got " +
                          std::to_string(net.spec.classes) + " classes");
  if (batch_size < 1) throw ValidationError("batch size must be positive");

  const int64_t side = net.spec.image_size;
  std::vector<ScoredSample> out;
  out.reserve(manifest.size());

  for (size_t begin = 0; begin < manifest.size(); begin += static_cast<size_t>(batch_size)) {
    const size_t end = std::min(manifest.size(), begin + static_cast<size_t>(batch_size));
    const int64_t b = static_cast<int64_t>(end - begin);
    Tensor x(Shape{b, 3, side, side}, net.spec.dtype);
    for (size_t i = begin; i < end; ++i) {
      const auto& s = manifest.samples[i];
      Tensor img = data::load_image(s.path);  // io failures carry the path
      if (img.shape() != Shape{3, side, side})
        throw ValidationError("image '" + s.path + "' is " + shape_str(img.shape()) +
                              ", network wants " + shape_str({3, side, side}));
      const int64_t off = static_cast<int64_t>(i - begin) * img.numel();
      for (int64_t j = 0; j < img.numel(); ++j) x.set_value(off + j, img.value_at(j));
    }
    Tensor probs = net.forward(x, false);
    ops::ensure_finite(probs, "evaluate");
    for (size_t i = begin; i < end; ++i) {
      const auto& s = manifest.samples[i];
      ScoredSample r;
      r.score = probs.value_at(static_cast<int64_t>(i - begin) * 2 + 1);
      r.label = s.label;
      r.domain = s.procedure;
      r.fold = fold;
      r.path = s.path;
      out.push_back(std::move(r));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score and curve files

namespace {
constexpr const char* kScoresHeader = "path,procedure,label,fold,score";
}

void write_scores_csv(const std::string& path, std::span<const ScoredSample> samples) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write scores csv: " + path);
  os << kScoresHeader << "\n";
  for (const auto& s : samples)
    os << s.path << ',' << data::to_string(s.domain) << ',' << data::to_string(s.label) << ','
       << s.fold << ',' << fmt(s.score) << "\n";
  if (!os) throw IoError("short write: " + path);
}

std::vector<ScoredSample> read_scores_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open scores csv: " + path);
  std::string line;
  if (!std::getline(is, line) || line != kScoresHeader)
    throw ValidationError(path + ": bad scores header");
  std::vector<ScoredSample> out;
  int64_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cur;
    for (char ch : line)
      if (ch == ',') {
        f.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    f.push_back(cur);
    if (f.size() != 5)
      throw ValidationError(path + " row " + std::to_string(row) + ": expected 5 fields");
    ScoredSample s;
    s.path = f[0];
    try {
      s.domain = data::procedure_from(f[1]);
      s.label = data::label_from(f[2]);
      s.fold = std::stoi(f[3]);
      s.score = std::stod(f[4]);
    } catch (const std::exception& e) {
      throw ValidationError(path + " row " + std::to_string(row) + ": " + e.what());
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_roc_csv(const std::string& path, std::span<const NamedCurve> curves) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write roc csv: " + path);
  os << "curve,fpr,tpr\n";
  for (const auto& c : curves)
    for (const auto& p : c.curve.points)
      os << c.label << ',' << fmt(p.fpr) << ',' << fmt(p.tpr) << "\n";
  if (!os) throw IoError("short write: " + path);
}

void write_roc_svg(const std::string& path, const std::string& title,
                   std::span<const NamedCurve> curves) {
  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#17becf", "#7f7f7f", "#bcbd22"};
  constexpr double kW = 560, kH = 560, kL = 70, kT = 50, kR = 20, kB = 70;
  const double pw = kW - kL - kR, ph = kH - kT - kB;
  const auto px = [&](double fpr) { return kL + fpr * pw; };
  const auto py = [&](double tpr) { return kT + (1.0 - tpr) * ph; };

  std::ofstream os(path);
  if (!os) throw IoError("cannot write roc svg: " + path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
     << "\" viewBox=\"0 0 " << kW << " " << kH << "\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"28\" text-anchor=\"middle\" font-size=\"16\" "
        "font-family=\"sans-serif\">" << title << "</text>\n";

  for (int i = 0; i <= 4; ++i) {
    const double f = i / 4.0;
    os << "<line x1=\"" << fmt(px(f), "%.2f") << "\" y1=\"" << fmt(py(0), "%.2f") << "\" x2=\""
       << fmt(px(f), "%.2f") << "\" y2=\"" << fmt(py(1), "%.2f")
       << "\" stroke=\"#dddddd\"/>\n"
       << "<line x1=\"" << fmt(px(0), "%.2f") << "\" y1=\"" << fmt(py(f), "%.2f") << "\" x2=\""
       << fmt(px(1), "%.2f") << "\" y2=\"" << fmt(py(f), "%.2f")
       << "\" stroke=\"#dddddd\"/>\n"
       << "<text x=\"" << fmt(px(f), "%.2f") << "\" y=\"" << fmt(py(0) + 20, "%.2f")
       << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(f, "%.2f")
       << "</text>\n"
       << "<text x=\"" << fmt(px(0) - 8, "%.2f") << "\" y=\"" << fmt(py(f) + 4, "%.2f")
       << "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" << fmt(f, "%.2f")
       << "</text>\n";
  }
  os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\""
     << py(1) << "\" stroke=\"#999999\" stroke-dasharray=\"5,5\"/>\n"
     << "<rect x=\"" << kL << "\" y=\"" << kT << "\" width=\"" << pw << "\" height=\"" << ph
     << "\" fill=\"none\" stroke=\"black\"/>\n"
     << "<text x=\"" << kW / 2 << "\" y=\"" << kH - 22
     << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\">"
        "False positive rate</text>\n"
     << "<text x=\"20\" y=\"" << kH / 2
     << "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" "
        "transform=\"rotate(-90 20 " << kH / 2 << ")\">True positive rate</text>\n";

  for (size_t c = 0; c < curves.size(); ++c) {
    const char* color = kColors[c % (sizeof kColors / sizeof *kColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
    for (const auto& p : curves[c].curve.points)
      os << fmt(px(p.fpr), "%.2f") << ',' << fmt(py(p.tpr), "%.2f") << ' ';
    os << "\"/>\n";
    const double ly = kT + 18 + 16 * static_cast<double>(c);
    os << "<rect x=\"" << kL + 12 << "\" y=\"" << ly - 9 << "\" width=\"14\" height=\"4\" fill=\""
       << color << "\"/>\n"
       << "<text x=\"" << kL + 32 << "\" y=\"" << ly
       << "\" font-size=\"11\" font-family=\"sans-serif\">" << curves[c].label
       << " (AUC " << fmt(curves[c].curve.auc, "%.3f") << ")</text>\n";
  }
  os << "</svg>\n";
  if (!os) throw IoError("short write: " + path);
}

// ---------------------------------------------------------------------------
// Bundle report

namespace {

struct RecordRef {
  std::string arch;
  int scenario = 0;
  int fold = 0;
  int step = 0;
  fs::path dir;
  json record;
};

const std::vector<std::string> kArchOrder = {"vgg16", "inception_v3", "resnet50"};
const std::vector<std::string> kDomainOrder = {"cys", "urs", "combined"};

double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

void write_report(const std::string& bundle_dir, const std::string& out_dir) {
  const fs::path root(bundle_dir);
  std::ifstream bj(root / "bundle.json");
  if (!bj) throw IoError("cannot open " + (root / "bundle.json").string());
  json bundle;
  try {
    bundle = json::parse(bj);
  } catch (const json::exception& e) {
    throw ValidationError("bad bundle.json: " + std::string(e.what()));
  }

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir + ": " + ec.message());

  // Collect record references and detect missing cells up front.
  std::vector<RecordRef> records;
  std::vector<std::string> missing;
  for (const auto& run : bundle.at("runs")) {
    const std::string arch = run.at("arch");
    const int scenario = run.at("scenario");
    const int fold = run.at("fold");
    for (int step : run.at("steps").get<std::vector<int>>()) {
      RecordRef r{arch, scenario, fold, step,
                  root / "runs" / arch / ("scenario" + std::to_string(scenario)) /
                      ("fold" + std::to_string(fold)) / ("step" + std::to_string(step)),
                  {}};
      const std::string cell = arch + "/scenario" + std::to_string(scenario) + "/fold" +
                               std::to_string(fold) + "/step" + std::to_string(step);
      std::ifstream rj(r.dir / "record.json");
      if (!rj) {
        missing.push_back(cell);
        continue;
      }
      r.record = json::parse(rj);
      for (const std::string dom : r.record.at("eval_domains"))
        if (!fs::exists(r.dir / ("scores_" + dom + ".csv"))) missing.push_back(cell + ":" + dom);
      records.push_back(std::move(r));
    }
  }
  if (!missing.empty()) {
    std::string msg = "incomplete bundle, missing cells:";
    for (const auto& m : missing) msg += " " + m;
    throw IncompleteBundleError(msg);
  }

  // Scores per (arch, scenario, step, domain): fold -> samples.
  struct CellScores {
    std::map<int, std::vector<ScoredSample>> by_fold;
    std::string train_domain;
  };
  std::map<std::string, CellScores> cells;  // key: arch|scenario|step|domain
  std::map<std::string, std::pair<int, int>> final_step;  // arch|scenario -> (max step, scenario)
  const auto cell_key = [](const std::string& arch, int scenario, int step,
                           const std::string& dom) {
    return arch + "|" + std::to_string(scenario) + "|" + std::to_string(step) + "|" + dom;
  };
  for (const auto& r : records) {
    for (const std::string dom : r.record.at("eval_domains")) {
      auto& cell = cells[cell_key(r.arch, r.scenario, r.step, dom)];
      cell.by_fold[r.fold] = read_scores_csv((r.dir / ("scores_" + dom + ".csv")).string());
      cell.train_domain = r.record.at("train_domain");
    }
    auto& fs_ = final_step[r.arch + "|" + std::to_string(r.scenario)];
    fs_.first = std::max(fs_.first, r.step);
    fs_.second = r.scenario;
  }

  std::ofstream report(fs::path(out_dir) / "report.csv");
  if (!report) throw IoError("cannot write report.csv under " + out_dir);
  report << "arch,scenario,step,train_domain,eval_domain,fold,auc\n";

  std::ofstream summary(fs::path(out_dir) / "summary.txt");
  if (records.empty()) summary << "no runs\n";

  std::ofstream cross(fs::path(out_dir) / "cross_domain_step1.csv");
  cross << "arch,scenario,train_domain,eval_domain,pooled_auc\n";
  std::ofstream delta(fs::path(out_dir) / "step_delta.csv");
  delta << "arch,scenario,eval_domain,step1_auc,step2_auc,delta\n";

  std::map<std::string, double> pooled_auc;  // same key space as cells
  for (const auto& arch : kArchOrder)
    for (int scenario = 1; scenario <= 3; ++scenario)
      for (int step = 1; step <= 2; ++step)
        for (const auto& dom : kDomainOrder) {
          const auto it = cells.find(cell_key(arch, scenario, step, dom));
          if (it == cells.end()) continue;
          const auto& cell = it->second;
          const std::string prefix = arch + "," + std::to_string(scenario) + "," +
                                     std::to_string(step) + "," + cell.train_domain + "," + dom;
          std::vector<double> fold_aucs;
          std::vector<ScoredSample> pooled;
          for (const auto& [fold, scores] : cell.by_fold) {
            const double auc = roc_curve(scores).auc;
            fold_aucs.push_back(auc);
            report << prefix << ',' << fold << ',' << fmt(auc, "%.9f") << "\n";
            pooled.insert(pooled.end(), scores.begin(), scores.end());
          }
          const double pool = roc_curve(pooled).auc;
          pooled_auc[it->first] = pool;
          report << prefix << ",mean," << fmt(mean(fold_aucs), "%.9f") << "\n";
          report << prefix << ",pooled," << fmt(pool, "%.9f") << "\n";
          summary << arch << " scenario " << scenario << " step " << step << " train "
                  << cell.train_domain << " eval " << dom << ": mean "
                  << fmt(mean(fold_aucs), "%.4f") << ", pooled " << fmt(pool, "%.4f") << "\n";
          if (step == 1 && (scenario == 1 || scenario == 2) && dom != "combined")
            cross << arch << ',' << scenario << ',' << cell.train_domain << ',' << dom << ','
                  << fmt(pool, "%.9f") << "\n";
        }

  for (const auto& arch : kArchOrder)
    for (int scenario = 1; scenario <= 2; ++scenario)
      for (const auto& dom : kDomainOrder) {
        const auto s1 = pooled_auc.find(cell_key(arch, scenario, 1, dom));
        const auto s2 = pooled_auc.find(cell_key(arch, scenario, 2, dom));
        if (s1 == pooled_auc.end() || s2 == pooled_auc.end()) continue;
        delta << arch << ',' << scenario << ',' << dom << ',' << fmt(s1->second, "%.9f") << ','
              << fmt(s2->second, "%.9f") << ',' << fmt(s2->second - s1->second, "%.9f") << "\n";
      }

  // Reference AUC annotations for headline comparison cells.
  {
    std::ofstream ref(fs::path(out_dir) / "reference.csv");
    ref << "arch,scenario,step,eval_domain,reference_auc\n"
        << "vgg16,1,1,cys,0.846\n"
        << "resnet50,2,1,urs,0.987\n"
        << "resnet50,3,1,combined,0.938\n"
        << "resnet50,3,1,combined,0.940\n";
  }

  // One panel per evaluation domain; curves are the final-step pooled ROCs.
  for (const auto& dom : kDomainOrder) {
    std::vector<NamedCurve> curves;
    for (const auto& arch : kArchOrder)
      for (int scenario = 1; scenario <= 3; ++scenario) {
        const auto fit = final_step.find(arch + "|" + std::to_string(scenario));
        if (fit == final_step.end()) continue;
        const auto cit = cells.find(cell_key(arch, scenario, fit->second.first, dom));
        if (cit == cells.end()) continue;
        std::vector<ScoredSample> pooled;
        for (const auto& [fold, scores] : cit->second.by_fold)
          pooled.insert(pooled.end(), scores.begin(), scores.end());
        curves.push_back({arch + " s" + std::to_string(scenario), roc_curve(pooled)});
      }
    if (curves.empty()) continue;
    write_roc_csv((fs::path(out_dir) / ("roc_" + dom + ".csv")).string(), curves);
    write_roc_svg((fs::path(out_dir) / ("roc_" + dom + ".svg")).string(),
                  "ROC - " + dom + " evaluation", curves);
  }
}

}  // namespace uroscan::metrics

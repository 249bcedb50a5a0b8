#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "uroscan/architectures.hpp"
#include "uroscan/dataset.hpp"
#include "uroscan/gradcam.hpp"
#include "uroscan/metrics.hpp"
#include "uroscan/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace uroscan;

namespace {

// Exit codes, one per failure family, so scripts can branch on them.
constexpr int kOk = 0;
constexpr int kInternal = 1;
constexpr int kConfig = 2;
constexpr int kIo = 3;
constexpr int kCheckpoint = 4;
constexpr int kValidation = 5;
constexpr int kBundle = 6;

// Every tunable of every subcommand lives here so a config file can set any
// of it and the resolved state can be echoed back out.
struct Config {
  int64_t seed = 0;
  std::string output_dir = "uroscan_out";
  int jobs = 1;
  // synthetic data generation
  int64_t resolution = 64;
  int64_t per_cell = 10;
  std::map<std::string, int64_t> counts;  // explicit per-cell sizes (all 8 keys)
  // dataset input
  std::string manifest;
  std::string image_root;
  // model geometry
  std::vector<std::string> archs{"resnet50"};
  std::vector<int> scenarios{1, 2, 3};
  double width_scale = 0.25;
  int64_t image_size = 64;
  std::string dtype = "f32";
  // training protocol
  int warm_epochs = 5;
  double warm_lr = 1e-4;
  int finetune_epochs = 30;
  double finetune_lr = 1e-3;
  int freeze_k = 4;
  int batch_size = 16;
  int folds = 3;
  std::string init_checkpoint;
  // eval / gradcam inputs
  std::string checkpoint;
  std::string image;
  int class_index = -1;  // -1: use the predicted class
  std::string target_layer;
  double opacity = 0.5;
  bool dump_heatmap = false;
  // report input
  std::string bundle;
};

const std::vector<std::string>& cell_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (int p = 0; p < 2; ++p)
      for (int m = 0; m < 2; ++m)
        for (int l = 0; l < 2; ++l)
          k.push_back(data::cell_name(static_cast<data::Procedure>(p),
                                      static_cast<data::Modality>(m),
                                      static_cast<data::Label>(l)));
    return k;
  }();
  return keys;
}

json to_json(const Config& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["jobs"] = c.jobs;
  j["resolution"] = c.resolution;
  j["per_cell"] = c.per_cell;
  if (!c.counts.empty()) {
    json counts = json::object();
    for (const auto& key : cell_keys()) {
      auto it = c.counts.find(key);
      counts[key] = it == c.counts.end() ? 0 : it->second;
    }
    j["counts"] = counts;
  }
  j["manifest"] = c.manifest;
  j["image_root"] = c.image_root;
  j["archs"] = c.archs;
  j["scenarios"] = c.scenarios;
  j["width_scale"] = c.width_scale;
  j["image_size"] = c.image_size;
  j["dtype"] = c.dtype;
  j["warm_epochs"] = c.warm_epochs;
  j["warm_lr"] = c.warm_lr;
  j["finetune_epochs"] = c.finetune_epochs;
  j["finetune_lr"] = c.finetune_lr;
  j["freeze_k"] = c.freeze_k;
  j["batch_size"] = c.batch_size;
  j["folds"] = c.folds;
  j["init_checkpoint"] = c.init_checkpoint;
  j["checkpoint"] = c.checkpoint;
  j["image"] = c.image;
  j["class_index"] = c.class_index;
  j["target_layer"] = c.target_layer;
  j["opacity"] = c.opacity;
  j["dump_heatmap"] = c.dump_heatmap;
  j["bundle"] = c.bundle;
  return j;
}

void apply_json(Config& c, const json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  for (const auto& [key, val] : j.items()) {
    try {
      if (key == "seed") c.seed = val.get<int64_t>();
      else if (key == "output_dir") c.output_dir = val.get<std::string>();
      else if (key == "jobs") c.jobs = val.get<int>();
      else if (key == "resolution") c.resolution = val.get<int64_t>();
      else if (key == "per_cell") c.per_cell = val.get<int64_t>();
      else if (key == "counts") {
        if (!val.is_object()) throw ConfigError("counts must be an object");
        const auto& keys = cell_keys();
        for (const auto& [cell, n] : val.items()) {
          if (std::find(keys.begin(), keys.end(), cell) == keys.end())
            throw ConfigError("unknown cell '" + cell + "' in counts");
          c.counts[cell] = n.get<int64_t>();
        }
      } else if (key == "manifest") c.manifest = val.get<std::string>();
      else if (key == "image_root") c.image_root = val.get<std::string>();
      else if (key == "archs") c.archs = val.get<std::vector<std::string>>();
      else if (key == "scenarios") c.scenarios = val.get<std::vector<int>>();
      else if (key == "width_scale") c.width_scale = val.get<double>();
      else if (key == "image_size") c.image_size = val.get<int64_t>();
      else if (key == "dtype") c.dtype = val.get<std::string>();
      else if (key == "warm_epochs") c.warm_epochs = val.get<int>();
      else if (key == "warm_lr") c.warm_lr = val.get<double>();
      else if (key == "finetune_epochs") c.finetune_epochs = val.get<int>();
      else if (key == "finetune_lr") c.finetune_lr = val.get<double>();
      else if (key == "freeze_k") c.freeze_k = val.get<int>();
      else if (key == "batch_size") c.batch_size = val.get<int>();
      else if (key == "folds") c.folds = val.get<int>();
      else if (key == "init_checkpoint") c.init_checkpoint = val.get<std::string>();
      else if (key == "checkpoint") c.checkpoint = val.get<std::string>();
      else if (key == "image") c.image = val.get<std::string>();
      else if (key == "class_index") c.class_index = val.get<int>();
      else if (key == "target_layer") c.target_layer = val.get<std::string>();
      else if (key == "opacity") c.opacity = val.get<double>();
      else if (key == "dump_heatmap") c.dump_heatmap = val.get<bool>();
      else if (key == "bundle") c.bundle = val.get<std::string>();
      else throw ConfigError("unknown config key '" + key + "'");
    } catch (const json::exception& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

void load_config_file(Config& c, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(is);  // parse errors carry line and column
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config file ") + path + ": " + e.what());
  }
  apply_json(c, j);
}

// Relative output directories land under UROSCAN_OUTPUT_ROOT when it is set;
// absolute ones and all input paths are taken as given.
fs::path resolve_output(const std::string& dir) {
  fs::path p(dir);
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("UROSCAN_OUTPUT_ROOT"); root && *root)
    return fs::path(root) / p;
  return p;
}

fs::path prepare_output(const Config& cfg) {
  fs::path out = resolve_output(cfg.output_dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
  std::ofstream echo(out / "config.json", std::ios::binary);
  if (!echo) throw IoError("cannot write " + (out / "config.json").string());
  echo << to_json(cfg).dump(2) << '\n';
  return out;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

Dtype parse_dtype(const std::string& name) {
  if (name == "f32") return Dtype::f32;
  if (name == "f64") return Dtype::f64;
  throw ConfigError("dtype must be f32 or f64, got '" + name + "'");
}

data::Composition composition_of(const Config& cfg) {
  if (cfg.counts.empty()) {
    require(cfg.per_cell >= 0, "per_cell must be nonnegative");
    return data::Composition::uniform(cfg.per_cell);
  }
  data::Composition comp;
  const auto& keys = cell_keys();
  for (size_t i = 0; i < keys.size(); ++i) {
    auto it = cfg.counts.find(keys[i]);
    comp.counts[i] = it == cfg.counts.end() ? 0 : it->second;
  }
  return comp;
}

std::string default_image_root(const std::string& manifest_path) {
  fs::path parent = fs::path(manifest_path).parent_path();
  return parent.empty() ? "." : parent.string();
}

data::DatasetManifest load_manifest(const Config& cfg) {
  require(!cfg.manifest.empty(), "a manifest path is required (--manifest or config)");
  const std::string root =
      cfg.image_root.empty() ? default_image_root(cfg.manifest) : cfg.image_root;
  return data::ingest_manifest(cfg.manifest, root, /*verify_images=*/true);
}

int cmd_generate(const Config& cfg) {
  fs::path out = prepare_output(cfg);
  data::SyntheticConfig gen{composition_of(cfg), cfg.resolution,
                            static_cast<uint64_t>(cfg.seed), out.string()};
  data::DatasetManifest m = data::generate_synthetic(gen);
  std::cerr << "[generate] wrote " << m.size() << " images under " << out.string() << "\n";
  std::cout << fs::absolute(out / "manifest.csv").string() << "\n";
  return kOk;
}

int cmd_train(const Config& cfg) {
  for (const auto& a : cfg.archs)
    require(a == "vgg16" || a == "inception_v3" || a == "resnet50",
            "unknown architecture '" + a + "'");
  require(!cfg.archs.empty(), "at least one architecture is required");
  require(!cfg.scenarios.empty(), "at least one scenario is required");
  for (int s : cfg.scenarios)
    require(s >= 1 && s <= 3, "scenario must be 1, 2 or 3, got " + std::to_string(s));

  fs::path out = prepare_output(cfg);
  data::DatasetManifest all = load_manifest(cfg);
  data::DatasetManifest cys = data::domain_filter(all, {data::Procedure::cys});
  data::DatasetManifest urs = data::domain_filter(all, {data::Procedure::urs});

  nn::NetworkSpec base{cfg.archs.front(), cfg.width_scale, cfg.image_size, 3, 2,
                       parse_dtype(cfg.dtype)};
  trainer::TrainConfig tc;
  tc.warm_epochs = cfg.warm_epochs;
  tc.warm_lr = cfg.warm_lr;
  tc.finetune_epochs = cfg.finetune_epochs;
  tc.finetune_lr = cfg.finetune_lr;
  tc.freeze_k = cfg.freeze_k;
  tc.batch_size = cfg.batch_size;
  tc.folds = cfg.folds;
  tc.seed = static_cast<uint64_t>(cfg.seed);
  tc.validate();

  const fs::path bundle = cfg.bundle.empty() ? out / "bundle" : fs::path(cfg.bundle);
  auto records = trainer::run_matrix(cfg.archs, cfg.scenarios, base, cys, urs, tc,
                                     bundle.string(), cfg.init_checkpoint);
  std::cerr << "[train] completed " << records.size() << " runs\n";
  std::cout << fs::absolute(bundle).string() << "\n";
  return kOk;
}

int cmd_eval(const Config& cfg) {
  require(!cfg.checkpoint.empty(), "a checkpoint path is required (--checkpoint or config)");
  fs::path out = prepare_output(cfg);
  nn::Network net = arch::load_checkpoint(cfg.checkpoint);
  data::DatasetManifest m = load_manifest(cfg);

  auto scores = metrics::evaluate(net, m, cfg.batch_size);
  metrics::write_scores_csv((out / "scores.csv").string(), scores);
  metrics::RocCurve roc = metrics::roc_curve(scores);
  std::vector<metrics::NamedCurve> curves{{net.spec.arch, roc}};
  metrics::write_roc_csv((out / "roc_eval.csv").string(), curves);
  metrics::write_roc_svg((out / "roc_eval.svg").string(), "evaluation", curves);

  std::cerr << "[eval] " << scores.size() << " samples, auc " << roc.auc << "\n";
  std::cout << fs::absolute(out / "scores.csv").string() << "\n";
  return kOk;
}

int cmd_gradcam(const Config& cfg) {
  require(!cfg.checkpoint.empty(), "a checkpoint path is required (--checkpoint or config)");
  require(!cfg.image.empty(), "an image path is required (--image or config)");
  fs::path out = prepare_output(cfg);
  nn::Network net = arch::load_checkpoint(cfg.checkpoint);
  Tensor img = data::load_image(cfg.image);

  const int64_t cls =
      cfg.class_index < 0 ? cam::predict_class(net, img) : cfg.class_index;
  cam::Heatmap map = cam::gradcam(net, img, cls, cfg.target_layer);
  Tensor blended = cam::overlay(img, map, cfg.opacity);

  const std::string stem = fs::path(cfg.image).stem().string();
  const fs::path overlay_path = out / (stem + "_cam.ppm");
  data::save_image(overlay_path.string(), blended);
  if (cfg.dump_heatmap) {
    std::ofstream hm(out / (stem + "_cam.csv"), std::ios::binary);
    if (!hm) throw IoError("cannot write heatmap csv");
    const auto& v = map.values;
    for (int64_t y = 0; y < v.shape()[0]; ++y) {
      for (int64_t x = 0; x < v.shape()[1]; ++x) {
        if (x) hm << ',';
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.9g", v.value_at(y * v.shape()[1] + x));
        hm << buf;
      }
      hm << '\n';
    }
  }
  std::cerr << "[gradcam] layer " << map.layer << ", class " << cls
            << (map.degenerate ? ", degenerate map" : "") << "\n";
  std::cout << fs::absolute(overlay_path).string() << "\n";
  return kOk;
}

int cmd_report(const Config& cfg) {
  fs::path out = prepare_output(cfg);
  const fs::path bundle = cfg.bundle.empty() ? out / "bundle" : fs::path(cfg.bundle);
  const fs::path report_dir = out / "report";
  metrics::write_report(bundle.string(), report_dir.string());
  std::cerr << "[report] wrote report files under " << report_dir.string() << "\n";
  std::cout << fs::absolute(report_dir).string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  Config cfg;

  // The config file seeds the defaults, so it must load before CLI11 binds
  // flag values over it: scan for --config ahead of the real parse.
  std::string config_path;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) config_path = argv[i + 1];
    else if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
  }
  try {
    if (!config_path.empty()) load_config_file(cfg, config_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return kIo;
  }

  CLI::App app{"uroscan: two-step transfer learning for endoscopic lesion classification"};
  app.require_subcommand(1);
  app.footer(
      "Precedence: flags > config file > built-in defaults.\n"
      "Relative output directories are placed under $UROSCAN_OUTPUT_ROOT when set.\n"
      "Exit codes: 0 ok, 2 config, 3 io, 4 checkpoint, 5 validation, 6 incomplete bundle.");

  std::string config_flag;  // consumed above; declared so it shows in help
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_flag, "JSON config file with defaults for any option");
    cmd->add_option("--output", cfg.output_dir, "output directory");
    cmd->add_option("--seed", cfg.seed, "random seed");
    cmd->add_option("--jobs", cfg.jobs,
                    "maximum concurrent runs (runs execute sequentially; kept as a cap)")
        ->check(CLI::PositiveNumber);
  };

  CLI::App* generate = app.add_subcommand("generate", "write a synthetic labeled dataset");
  add_common(generate);
  generate->add_option("--resolution", cfg.resolution, "square image size in pixels");
  generate->add_option("--per-cell", cfg.per_cell,
                       "images per (procedure, modality, label) cell");

  CLI::App* train = app.add_subcommand("train", "run training scenarios into a bundle");
  add_common(train);
  train->add_option("--manifest", cfg.manifest, "dataset manifest csv");
  train->add_option("--image-root", cfg.image_root, "base dir for relative image paths");
  train->add_option("--arch", cfg.archs, "architecture (repeatable)");
  train->add_option("--scenario", cfg.scenarios, "scenario id 1|2|3 (repeatable)");
  train->add_option("--scale", cfg.width_scale, "channel width multiplier");
  train->add_option("--image-size", cfg.image_size, "network input resolution");
  train->add_option("--dtype", cfg.dtype, "f32 | f64");
  train->add_option("--warm-epochs", cfg.warm_epochs, "epochs with all layers trainable");
  train->add_option("--warm-lr", cfg.warm_lr, "learning rate for the warm phase");
  train->add_option("--finetune-epochs", cfg.finetune_epochs, "epochs with the base frozen");
  train->add_option("--finetune-lr", cfg.finetune_lr, "learning rate for the frozen phase");
  train->add_option("--freeze-k", cfg.freeze_k, "trainable layers kept at the top");
  train->add_option("--batch-size", cfg.batch_size, "minibatch size");
  train->add_option("--folds", cfg.folds, "cross-validation folds");
  train->add_option("--init-checkpoint", cfg.init_checkpoint,
                    "checkpoint to initialize every run from");
  train->add_option("--bundle", cfg.bundle, "bundle directory (default <output>/bundle)");

  CLI::App* eval = app.add_subcommand("eval", "score a manifest with a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", cfg.checkpoint, "model checkpoint");
  eval->add_option("--manifest", cfg.manifest, "dataset manifest csv");
  eval->add_option("--image-root", cfg.image_root, "base dir for relative image paths");
  eval->add_option("--batch-size", cfg.batch_size, "minibatch size");

  CLI::App* gradcam = app.add_subcommand("gradcam", "render a class activation overlay");
  add_common(gradcam);
  gradcam->add_option("--checkpoint", cfg.checkpoint, "model checkpoint");
  gradcam->add_option("--image", cfg.image, "input image (binary ppm)");
  gradcam->add_option("--class", cfg.class_index, "class index (default: predicted)");
  gradcam->add_option("--layer", cfg.target_layer, "target conv layer (default: last)");
  gradcam->add_option("--opacity", cfg.opacity, "overlay opacity in [0,1]");
  gradcam->add_flag("--dump-heatmap", cfg.dump_heatmap, "also write the raw grid as csv");

  CLI::App* report = app.add_subcommand("report", "aggregate a bundle into report files");
  add_common(report);
  report->add_option("--bundle", cfg.bundle, "bundle directory (default <output>/bundle)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return kConfig;
  }

  try {
    if (generate->parsed()) return cmd_generate(cfg);
    if (train->parsed()) return cmd_train(cfg);
    if (eval->parsed()) return cmd_eval(cfg);
    if (gradcam->parsed()) return cmd_gradcam(cfg);
    if (report->parsed()) return cmd_report(cfg);
    std::cerr << "error: usage: no subcommand\n";
    return kConfig;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return kConfig;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << "\n";
    return kIo;
  } catch (const CheckpointError& e) {
    std::cerr << "error: checkpoint: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const IncompleteBundleError& e) {
    std::cerr << "error: bundle: " << e.what() << "\n";
    return kBundle;
  } catch (const Error& e) {
    std::cerr << "error: validation: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return kInternal;
  }
}

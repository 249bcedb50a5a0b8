#include "uroscan/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

#include "json.hpp"
#include "uroscan/architectures.hpp"
#include "uroscan/common.hpp"
#include "uroscan/metrics.hpp"
#include "uroscan/ops.hpp"

namespace uroscan::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

void TrainConfig::validate() const {
  if (warm_lr <= 0.0 || finetune_lr <= 0.0)
    throw ValidationError("learning rates must be positive");
  if (warm_epochs < 0 || finetune_epochs < 0)
    throw ValidationError("epoch counts must be nonnegative");
  if (freeze_k < 3)
    throw ValidationError("freeze_k must be at least 3 so the head stays trainable, got " +
                          std::to_string(freeze_k));
  if (batch_size < 1) throw ValidationError("batch size must be positive");
  if (folds < 1) throw ValidationError("fold count must be positive");
}

Scenario scenario_by_id(int id) {
  switch (id) {
    case 1:
      return {1, kDomainCys, kDomainUrs, {kDomainCys, kDomainUrs}};
    case 2:
      return {2, kDomainUrs, kDomainCys, {kDomainCys, kDomainUrs}};
    case 3:
      return {3, kDomainCombined, "", {kDomainCys, kDomainUrs, kDomainCombined}};
    default:
      throw ValidationError("unknown scenario " + std::to_string(id) + " (want 1|2|3)");
  }
}

std::string domain_tag(const std::string& domain) {
  if (domain == kDomainCys) return arch::kTagCys;
  if (domain == kDomainUrs) return arch::kTagUrs;
  if (domain == kDomainCombined) return arch::kTagCombined;
  throw ValidationError("unknown training domain '" + domain + "'");
}

uint64_t run_seed(uint64_t seed, const std::string& arch, int scenario, int fold, int step) {
  return mix_seed(mix_seed(seed, fnv1a64(arch)), static_cast<uint64_t>(scenario),
                  mix_seed(static_cast<uint64_t>(fold), static_cast<uint64_t>(step)));
}

data::DatasetManifest manifest_subset(const data::DatasetManifest& m,
                                      std::span<const size_t> indices) {
  std::vector<data::Sample> rows;
  rows.reserve(indices.size());
  for (size_t i : indices) {
    if (i >= m.size()) throw ValidationError("subset index out of range");
    rows.push_back(m.samples[i]);
  }
  return data::make_manifest(std::move(rows));
}

std::pair<Tensor, Tensor> make_batch(const std::vector<Tensor>& images,
                                     const std::vector<int>& labels,
                                     std::span<const size_t> order, size_t begin, size_t count,
                                     Dtype dtype) {
  if (count == 0) throw ValidationError("empty batch");
  const Shape& ishape = images[order[begin]].shape();
  const int64_t per = images[order[begin]].numel();
  Tensor x(Shape{static_cast<int64_t>(count), ishape[0], ishape[1], ishape[2]}, dtype);
  Tensor y = Tensor::zeros(Shape{static_cast<int64_t>(count), 2}, dtype);
  for (size_t j = 0; j < count; ++j) {
    const size_t i = order[begin + j];
    const Tensor& img = images[i];
    const int64_t off = static_cast<int64_t>(j) * per;
    if (dtype == Dtype::f32 && img.dtype() == Dtype::f32) {
      auto src = img.data<float>();
      auto dst = x.data<float>();
      std::copy(src.begin(), src.end(), dst.begin() + off);
    } else {
      for (int64_t v = 0; v < per; ++v) x.set_value(off + v, img.value_at(v));
    }
    y.set_value(static_cast<int64_t>(j) * 2 + labels[i], 1.0);
  }
  return {std::move(x), std::move(y)};
}

namespace {

// One optimization phase: fresh Adam, per-epoch reshuffle, full passes.
std::vector<double> train_phase(nn::Network& net, const std::vector<Tensor>& images,
                                const std::vector<int>& labels, int epochs, double lr,
                                int batch_size, uint64_t seed, uint64_t phase_id,
                                const nn::FreezeMask& mask, const char* phase_name) {
  apply_freeze(net, mask);
  auto params = net.trainable_parameters();
  nn::AdamState adam = nn::make_adam(params, lr);

  const size_t n = images.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});

  std::vector<double> losses;
  for (int e = 0; e < epochs; ++e) {
    Rng rng(mix_seed(seed, phase_id, static_cast<uint64_t>(e)));
    deterministic_shuffle(order, rng);
    double sum = 0.0;
    for (size_t b = 0; b < n; b += static_cast<size_t>(batch_size)) {
      const size_t count = std::min(n - b, static_cast<size_t>(batch_size));
      auto [x, y] = make_batch(images, labels, order, b, count, net.spec.dtype);
      Tape tape;
      Tensor probs = net.forward(x, true, &tape);
      Tensor loss = ops::cross_entropy(probs, y, &tape);
      net.clear_gradients();
      ops::backward(loss, tape);
      nn::adam_step(adam, params);
      sum += loss.item() * static_cast<double>(count);
    }
    losses.push_back(sum / static_cast<double>(n));
    std::cerr << "[train]   " << phase_name << " epoch " << e + 1 << "/" << epochs
              << " mean loss " << losses.back() << "\n";
  }
  return losses;
}

}  // namespace

StepResult run_step(nn::Network& net, const data::DatasetManifest& train,
                    const std::string& domain, const TrainConfig& cfg, uint64_t seed) {
  cfg.validate();
  const std::string tag = domain_tag(domain);  // validates the domain up front
  if (train.empty()) throw ValidationError("training manifest is empty");
  if (train.summary.label_total(data::Label::lesion) == 0 ||
      train.summary.label_total(data::Label::no_lesion) == 0)
    throw ValidationError("training manifest needs both classes, got " +
                          std::to_string(train.summary.label_total(data::Label::lesion)) +
                          " lesion / " +
                          std::to_string(train.summary.label_total(data::Label::no_lesion)) +
                          " no-lesion samples");

  const int64_t side = net.spec.image_size;
  std::vector<Tensor> images;
  std::vector<int> labels;
  images.reserve(train.size());
  for (const auto& s : train.samples) {
    Tensor img = data::load_image(s.path);
    if (img.shape() != Shape{3, side, side})
      throw ValidationError("image '" + s.path + "' is " + shape_str(img.shape()) +
                            ", network wants " + shape_str({3, side, side}));
    images.push_back(std::move(img));
    labels.push_back(s.label == data::Label::lesion ? 1 : 0);
  }

  StepResult res;
  res.losses_warm = train_phase(net, images, labels, cfg.warm_epochs, cfg.warm_lr,
                                cfg.batch_size, seed, 1, {"none", 0}, "warm");
  res.losses_finetune =
      train_phase(net, images, labels, cfg.finetune_epochs, cfg.finetune_lr, cfg.batch_size,
                  seed, 2, {"all_but_last_k", cfg.freeze_k}, "finetune");
  net.provenance.push_back(tag);
  return res;
}

namespace {

struct DomainData {
  const data::DatasetManifest* manifest;
  data::FoldSplit split;
};

data::DatasetManifest train_manifest(const std::string& domain, const DomainData& cys,
                                     const DomainData& urs, int fold) {
  if (domain == kDomainCys) return manifest_subset(*cys.manifest, cys.split.complement_indices(fold));
  if (domain == kDomainUrs) return manifest_subset(*urs.manifest, urs.split.complement_indices(fold));
  auto a = manifest_subset(*cys.manifest, cys.split.complement_indices(fold));
  auto b = manifest_subset(*urs.manifest, urs.split.complement_indices(fold));
  a.samples.insert(a.samples.end(), b.samples.begin(), b.samples.end());
  return data::make_manifest(std::move(a.samples));
}

data::DatasetManifest eval_manifest(const std::string& domain, const DomainData& cys,
                                    const DomainData& urs, int fold) {
  if (domain == kDomainCys) return manifest_subset(*cys.manifest, cys.split.fold_indices(fold));
  if (domain == kDomainUrs) return manifest_subset(*urs.manifest, urs.split.fold_indices(fold));
  auto a = manifest_subset(*cys.manifest, cys.split.fold_indices(fold));
  auto b = manifest_subset(*urs.manifest, urs.split.fold_indices(fold));
  a.samples.insert(a.samples.end(), b.samples.begin(), b.samples.end());
  return data::make_manifest(std::move(a.samples));
}

void check_domain(const data::DatasetManifest& m, const char* name, int folds) {
  if (m.empty()) throw ValidationError(std::string("missing ") + name + " manifest");
  for (data::Label l : {data::Label::lesion, data::Label::no_lesion})
    if (m.summary.label_total(l) < folds)
      throw ValidationError(std::string(name) + " manifest needs at least one " +
                            data::to_string(l) + " sample per fold");
}

}  // namespace

std::vector<RunRecord> run_scenario(const nn::Network& init, int scenario_id,
                                    const data::DatasetManifest& cys,
                                    const data::DatasetManifest& urs, const TrainConfig& cfg,
                                    const std::string& bundle_dir) {
  cfg.validate();
  const Scenario sc = scenario_by_id(scenario_id);
  check_domain(cys, "cystoscopy", cfg.folds);
  check_domain(urs, "ureteroscopy", cfg.folds);
  if (bundle_dir.empty()) throw ValidationError("bundle directory must be set");

  DomainData dc{&cys, data::split_folds(cys, cfg.folds, "by_label",
                                        mix_seed(cfg.seed, fnv1a64(kDomainCys)))};
  DomainData du{&urs, data::split_folds(urs, cfg.folds, "by_label",
                                        mix_seed(cfg.seed, fnv1a64(kDomainUrs)))};

  const std::string& arch_name = init.spec.arch;
  std::vector<RunRecord> records;
  for (int fold = 0; fold < cfg.folds; ++fold) {
    nn::Network net = nn::deep_copy(init);
    for (int step = 1; step <= sc.steps(); ++step) {
      const std::string& domain = step == 1 ? sc.step1_train : sc.step2_train;
      std::cerr << "[train] " << arch_name << " scenario " << scenario_id << " fold " << fold
                << " step " << step << " on " << domain << "\n";
      const data::DatasetManifest train = train_manifest(domain, dc, du, fold);
      const std::string start_hash = hex64(net.weights_hash());
      StepResult sr =
          run_step(net, train, domain, cfg, run_seed(cfg.seed, arch_name, scenario_id, fold, step));

      const fs::path dir = fs::path(bundle_dir) / "runs" / arch_name /
                           ("scenario" + std::to_string(scenario_id)) /
                           ("fold" + std::to_string(fold)) / ("step" + std::to_string(step));
      std::error_code ec;
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
      arch::save_checkpoint(net, (dir / "end.ckpt").string(), step, start_hash);

      RunRecord rec;
      rec.arch = arch_name;
      rec.scenario = scenario_id;
      rec.step = step;
      rec.fold = fold;
      rec.train_domain = domain;
      rec.eval_domains = sc.eval_domains;
      rec.losses_warm = sr.losses_warm;
      rec.losses_finetune = sr.losses_finetune;
      rec.provenance = net.provenance;
      rec.start_hash = start_hash;
      rec.end_hash = hex64(net.weights_hash());
      rec.train_size = static_cast<int64_t>(train.size());
      for (const std::string& dom : sc.eval_domains) {
        const data::DatasetManifest em = eval_manifest(dom, dc, du, fold);
        auto scores = metrics::evaluate(net, em, cfg.batch_size, fold);
        metrics::write_scores_csv((dir / ("scores_" + dom + ".csv")).string(), scores);
        rec.auc[dom] = metrics::roc_curve(scores).auc;
      }

      json j{{"arch", rec.arch},
             {"scenario", rec.scenario},
             {"step", rec.step},
             {"fold", rec.fold},
             {"train_domain", rec.train_domain},
             {"eval_domains", rec.eval_domains},
             {"losses_warm", rec.losses_warm},
             {"losses_finetune", rec.losses_finetune},
             {"auc", rec.auc},
             {"provenance", rec.provenance},
             {"start_weights_hash", rec.start_hash},
             {"end_weights_hash", rec.end_hash},
             {"train_size", rec.train_size}};
      std::ofstream os(dir / "record.json");
      if (!os) throw IoError("cannot write " + (dir / "record.json").string());
      os << j.dump(2) << "\n";
      records.push_back(std::move(rec));
    }
  }
  return records;
}

std::vector<RunRecord> run_matrix(const std::vector<std::string>& archs,
                                  const std::vector<int>& scenarios,
                                  const nn::NetworkSpec& base_spec,
                                  const data::DatasetManifest& cys,
                                  const data::DatasetManifest& urs, const TrainConfig& cfg,
                                  const std::string& bundle_dir,
                                  const std::string& init_checkpoint) {
  cfg.validate();
  if (archs.empty()) throw ValidationError("no architectures requested");
  if (scenarios.empty()) throw ValidationError("no scenarios requested");
  for (int s : scenarios) (void)scenario_by_id(s);

  std::error_code ec;
  fs::create_directories(bundle_dir, ec);
  if (ec) throw IoError("cannot create " + bundle_dir + ": " + ec.message());

  std::vector<RunRecord> all;
  json runs = json::array();
  for (const std::string& arch_name : archs) {
    nn::NetworkSpec spec = base_spec;
    spec.arch = arch_name;
    nn::Network init =
        init_checkpoint.empty()
            ? arch::build_network(spec, mix_seed(cfg.seed, fnv1a64(arch_name)))
            : arch::load_checkpoint(init_checkpoint, nullptr, spec);
    for (int sid : scenarios) {
      auto recs = run_scenario(init, sid, cys, urs, cfg, bundle_dir);
      for (int fold = 0; fold < cfg.folds; ++fold) {
        std::vector<int> steps;
        for (const auto& r : recs)
          if (r.fold == fold) steps.push_back(r.step);
        std::sort(steps.begin(), steps.end());
        runs.push_back({{"arch", arch_name}, {"scenario", sid}, {"fold", fold}, {"steps", steps}});
      }
      all.insert(all.end(), recs.begin(), recs.end());
    }
  }

  json bundle{{"version", 1},
              {"seed", cfg.seed},
              {"folds", cfg.folds},
              {"archs", archs},
              {"scenarios", scenarios},
              {"config",
               {{"warm_epochs", cfg.warm_epochs},
                {"warm_lr", cfg.warm_lr},
                {"finetune_epochs", cfg.finetune_epochs},
                {"finetune_lr", cfg.finetune_lr},
                {"freeze_k", cfg.freeze_k},
                {"batch_size", cfg.batch_size},
                {"width_scale", base_spec.width_scale},
                {"image_size", base_spec.image_size},
                {"dtype", dtype_name(base_spec.dtype)}}},
              {"runs", runs}};
  std::ofstream os(fs::path(bundle_dir) / "bundle.json");
  if (!os) throw IoError("cannot write bundle.json under " + bundle_dir);
  os << bundle.dump(2) << "\n";
  return all;
}

}  // namespace uroscan::trainer

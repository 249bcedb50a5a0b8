#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "uroscan/dataset.hpp"
#include "uroscan/nn.hpp"

namespace uroscan::trainer {

struct TrainConfig {
  int warm_epochs = 5;        // phase A, every layer trainable
  double warm_lr = 1e-4;
  int finetune_epochs = 30;   // phase B, all but the last k layers frozen
  double finetune_lr = 1e-3;
  int freeze_k = 4;
  int batch_size = 16;
  int folds = 3;
  uint64_t seed = 0;

  void validate() const;  // rates positive, epochs nonnegative, k >= 3
};

// Evaluation domain names used in records and score files.
inline constexpr const char* kDomainCys = "cys";
inline constexpr const char* kDomainUrs = "urs";
inline constexpr const char* kDomainCombined = "combined";

struct Scenario {
  int id = 0;
  std::string step1_train;
  std::string step2_train;  // empty: single-step scenario
  std::vector<std::string> eval_domains;

  int steps() const { return step2_train.empty() ? 1 : 2; }
};

// 1: cys then urs; 2: urs then cys; 3: combined in a single step.
Scenario scenario_by_id(int id);

// Provenance tag recorded after training on a domain.
std::string domain_tag(const std::string& domain);

struct RunRecord {
  std::string arch;
  int scenario = 0;
  int step = 0;
  int fold = 0;
  std::string train_domain;
  std::vector<std::string> eval_domains;
  std::vector<double> losses_warm;      // one mean loss per warm epoch
  std::vector<double> losses_finetune;  // one mean loss per fine-tune epoch
  std::map<std::string, double> auc;    // eval domain -> held-out fold AUC
  std::vector<std::string> provenance;  // lineage after this step
  std::string start_hash, end_hash;     // weight fingerprints (hex)
  int64_t train_size = 0;
};

struct StepResult {
  std::vector<double> losses_warm, losses_finetune;
};

// One transfer step, in place: phase A warms every layer at warm_lr, phase B
// fine-tunes the last freeze_k parameterized layers at finetune_lr. Optimizer
// state is fresh per phase; net.provenance grows by domain_tag(domain).
StepResult run_step(nn::Network& net, const data::DatasetManifest& train,
                    const std::string& domain, const TrainConfig& cfg, uint64_t run_seed);

// Cross-validated scenario run for one architecture. Every fold trains an
// independent model from init's weights; each step is persisted under
// bundle_dir/runs/<arch>/scenario<id>/fold<k>/step<n>/ as end.ckpt,
// record.json and scores_<domain>.csv per evaluation domain.
std::vector<RunRecord> run_scenario(const nn::Network& init, int scenario_id,
                                    const data::DatasetManifest& cys,
                                    const data::DatasetManifest& urs, const TrainConfig& cfg,
                                    const std::string& bundle_dir);

// Full grid over architectures and scenarios; writes bundle.json alongside the
// runs and returns every record.
std::vector<RunRecord> run_matrix(const std::vector<std::string>& archs,
                                  const std::vector<int>& scenarios,
                                  const nn::NetworkSpec& base_spec,
                                  const data::DatasetManifest& cys,
                                  const data::DatasetManifest& urs, const TrainConfig& cfg,
                                  const std::string& bundle_dir,
                                  const std::string& init_checkpoint = "");

// Deterministic per-run stream: mixes the config seed with run coordinates.
uint64_t run_seed(uint64_t seed, const std::string& arch, int scenario, int fold, int step);

// Assembles a training batch: x is [n,3,S,S] in the spec dtype, y one-hot [n,2].
std::pair<Tensor, Tensor> make_batch(const std::vector<Tensor>& images,
                                     const std::vector<int>& labels,
                                     std::span<const size_t> order, size_t begin, size_t count,
                                     Dtype dtype);

data::DatasetManifest manifest_subset(const data::DatasetManifest& m,
                                      std::span<const size_t> indices);

}  // namespace uroscan::trainer

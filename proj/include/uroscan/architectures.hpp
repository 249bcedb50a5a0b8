#pragma once

#include <optional>
#include <string>

#include "uroscan/nn.hpp"

namespace uroscan::arch {

using nn::Network;
using nn::NetworkSpec;

// Weight lineage tags. Fresh builds start at kTagInit; each completed
// training step appends the tag of the domain it trained on.
inline constexpr const char* kTagInit = "w(rand)";
inline constexpr const char* kTagCys = "w(c)";
inline constexpr const char* kTagUrs = "w(u)";
inline constexpr const char* kTagCombined = "w(c+u)";

/// Channel width under a scale factor: never below 8 so tiny study models
/// keep functioning layers.
int64_t scaled_channels(int64_t base, double scale);

/// Classifier head appended to every backbone: dense(F -> 2048s) + relu,
/// dense -> 1024s + relu, dense -> classes, softmax. `feature_layer` must
/// produce [N, F] activations.
void attach_head(Network& net, const std::string& feature_layer, int64_t feature_dim,
                 Rng& rng);

// Backbone builders. Each validates spec.arch, initializes weights from the
// seed (He-uniform convs/dense, identity batch-norm), and marks the network
// provenance as freshly initialized.
Network build_vgg16(const NetworkSpec& spec, uint64_t seed);
Network build_inception_v3(const NetworkSpec& spec, uint64_t seed);
Network build_resnet50(const NetworkSpec& spec, uint64_t seed);

/// Dispatch on spec.arch.
Network build_network(const NetworkSpec& spec, uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints: self-contained binary files holding the full graph (topology,
// attributes, freeze state), weight lineage, and raw little-endian blobs.
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'U', 'R', 'O', 'C', 'K', 'P', 'T', '\n'};
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  uint32_t version = kCheckpointVersion;
  NetworkSpec spec;
  std::vector<std::string> provenance;
  int64_t seq = 0;             // deterministic save counter within a pipeline
  std::string parent_hash;     // weights_hash of the state this grew from
  std::string weights_hash;    // weights_hash at save time
};

void save_checkpoint(const Network& net, const std::string& path, int64_t seq = 0,
                     const std::string& parent_hash = "");

/// Restores a network. When `expect` is given, a stored spec that differs
/// raises CheckpointSpecError before any weights are touched.
Network load_checkpoint(const std::string& path, CheckpointMeta* meta = nullptr,
                        const std::optional<NetworkSpec>& expect = std::nullopt);

/// Reads only the header of a checkpoint.
CheckpointMeta read_checkpoint_meta(const std::string& path);

}  // namespace uroscan::arch

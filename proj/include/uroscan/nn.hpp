#pragma once

#include <map>
#include <string>
#include <vector>

#include "uroscan/ops.hpp"
#include "uroscan/tensor.hpp"

namespace uroscan::nn {

inline constexpr double kBnMomentum = 0.9;
inline constexpr double kBnEps = 1e-5;
inline constexpr const char* kInputName = "$input";

enum class LayerKind {
  conv,
  dense,
  batchnorm,
  maxpool,
  avgpool,
  globalpool,
  relu,
  softmax,
  add,
  concat,
  flatten,
};

const char* kind_name(LayerKind k);
LayerKind kind_from_name(const std::string& name);

/// One node of a feed-forward graph. Parameters are the tensors an optimizer
/// may update; buffers change only through forward passes (running stats).
struct Layer {
  std::string name;
  LayerKind kind{};
  std::vector<std::string> inputs;         // producer layer names, or $input
  std::map<std::string, Tensor> params;    // weight/bias or gamma/beta
  std::map<std::string, Tensor> buffers;   // running_mean/running_var
  std::map<std::string, int64_t> attrs;    // stride/padding/window
  bool trainable = true;

  bool has_params() const { return !params.empty(); }
  int64_t attr(const std::string& key) const;
};

/// Identity and geometry of a network, pinned into checkpoints so weights
/// cannot be loaded into a mismatched graph.
struct NetworkSpec {
  std::string arch;        // vgg16 | inception_v3 | resnet50
  double width_scale = 1.0;
  int64_t image_size = 224;
  int64_t in_channels = 3;
  int64_t classes = 2;
  Dtype dtype = Dtype::f32;

  bool operator==(const NetworkSpec&) const = default;
  std::string describe() const;
};

struct Network {
  NetworkSpec spec;
  std::vector<Layer> layers;  // topological order
  std::string output;         // name of the terminal layer
  std::vector<std::string> provenance;  // weight lineage tags, oldest first

  Layer& layer(const std::string& name);
  const Layer& layer(const std::string& name) const;
  bool has_layer(const std::string& name) const;

  /// Structural checks: unique names, inputs resolve to earlier layers,
  /// arities match kinds, output exists.
  void validate() const;

  /// Runs the graph. training toggles batch-norm statistics; capture, when
  /// given, receives every intermediate activation keyed by layer name.
  Tensor forward(const Tensor& input, bool training, Tape* tape = nullptr,
                 std::map<std::string, Tensor>* capture = nullptr);

  /// Layers owning parameters, in topological order.
  std::vector<const Layer*> parameterized_layers() const;
  std::vector<Layer*> parameterized_layers();

  /// Parameters of trainable layers, ordered by layer then parameter name.
  std::vector<Tensor> trainable_parameters();
  int64_t trainable_parameter_count() const;
  int64_t total_parameter_count() const;

  void clear_gradients();
  /// Single fingerprint over every parameter and buffer, in graph order.
  uint64_t weights_hash() const;
};

/// Copy with independent parameter and buffer storage (plain copies share it).
Network deep_copy(const Network& net);

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

/// Freeze policy. "none" leaves everything trainable; "all_but_last_k" keeps
/// only the last k parameterized layers (graph order) trainable.
struct FreezeMask {
  std::string mode = "none";
  int64_t k = 0;
};

/// Applies the mask: sets Layer::trainable and the requires_grad flag of
/// every parameter so taped forwards skip frozen subgraphs. Frozen
/// batch-norm layers also stop updating running statistics.
void apply_freeze(Network& net, const FreezeMask& mask);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;                // completed steps
  std::vector<Tensor> m, v;     // first/second moment, parallel to params
  std::vector<const void*> ids;  // identity guard against list drift
};

AdamState make_adam(const std::vector<Tensor>& params, double lr, double beta1 = 0.9,
                    double beta2 = 0.999, double eps = 1e-8);

/// One Adam update over the same parameter list the state was built from.
/// Parameters without a gradient buffer are treated as having zero gradient.
void adam_step(AdamState& state, const std::vector<Tensor>& params);

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

/// He/Kaiming uniform: limit sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, int64_t fan_in, Rng& rng, Dtype dtype);

}  // namespace uroscan::nn

#include "uroscan/nn.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace uroscan::nn {

namespace o = uroscan::ops;

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::dense: return "dense";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::globalpool: return "globalpool";
    case LayerKind::relu: return "relu";
    case LayerKind::softmax: return "softmax";
    case LayerKind::add: return "add";
    case LayerKind::concat: return "concat";
    case LayerKind::flatten: return "flatten";
  }
  throw ValidationError("unhandled layer kind");
}

LayerKind kind_from_name(const std::string& name) {
  static const std::map<std::string, LayerKind> table = {
      {"conv", LayerKind::conv},        {"dense", LayerKind::dense},
      {"batchnorm", LayerKind::batchnorm},
      {"maxpool", LayerKind::maxpool},  {"avgpool", LayerKind::avgpool},
      {"globalpool", LayerKind::globalpool},
      {"relu", LayerKind::relu},        {"softmax", LayerKind::softmax},
      {"add", LayerKind::add},          {"concat", LayerKind::concat},
      {"flatten", LayerKind::flatten},
  };
  auto it = table.find(name);
  if (it == table.end()) throw ValidationError("unknown layer kind: " + name);
  return it->second;
}

int64_t Layer::attr(const std::string& key) const {
  auto it = attrs.find(key);
  if (it == attrs.end())
    throw ValidationError("layer " + name + " is missing attribute " + key);
  return it->second;
}

std::string NetworkSpec::describe() const {
  std::ostringstream os;
  os << arch << " width=" << width_scale << " image=" << image_size << " channels="
     << in_channels << " classes=" << classes << " dtype=" << dtype_name(dtype);
  return os.str();
}

Layer& Network::layer(const std::string& name) {
  for (auto& l : layers)
    if (l.name == name) return l;
  throw ValidationError("no layer named " + name);
}

const Layer& Network::layer(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return l;
  throw ValidationError("no layer named " + name);
}

bool Network::has_layer(const std::string& name) const {
  return std::any_of(layers.begin(), layers.end(),
                     [&](const Layer& l) { return l.name == name; });
}

void Network::validate() const {
  std::unordered_set<std::string> seen;
  for (const auto& l : layers) {
    if (l.name.empty() || l.name[0] == '$')
      throw ValidationError("bad layer name: '" + l.name + "'");
    if (!seen.insert(l.name).second)
      throw ValidationError("duplicate layer name: " + l.name);

    size_t want_inputs = 1;
    if (l.kind == LayerKind::add) want_inputs = 2;
    if (l.kind == LayerKind::concat) want_inputs = l.inputs.size() >= 2 ? l.inputs.size() : 2;
    if (l.inputs.size() != want_inputs)
      throw ValidationError("layer " + l.name + " (" + kind_name(l.kind) + ") has " +
                            std::to_string(l.inputs.size()) + " inputs, expected " +
                            std::to_string(want_inputs));
    for (const auto& in : l.inputs)
      if (in != kInputName && seen.count(in) == 0)
        throw ValidationError("layer " + l.name + " consumes '" + in +
                              "' before it is produced");

    const bool needs_params =
        l.kind == LayerKind::conv || l.kind == LayerKind::dense ||
        l.kind == LayerKind::batchnorm;
    if (needs_params != l.has_params())
      throw ValidationError("layer " + l.name + " has unexpected parameter set");
  }
  if (seen.count(output) == 0)
    throw ValidationError("network output '" + output + "' does not exist");
}

Tensor Network::forward(const Tensor& input, bool training, Tape* tape,
                        std::map<std::string, Tensor>* capture) {
  // Layer::trainable is the source of truth; mirror it onto the parameter
  // flags so the tape only ever records what can actually learn.
  for (auto& l : layers)
    for (auto& [pname, t] : l.params) t.set_requires_grad(l.trainable);

  std::unordered_map<std::string, Tensor> acts;
  acts.reserve(layers.size() + 1);

  auto resolve = [&](const Layer& l, size_t i) -> Tensor {
    const std::string& name = l.inputs[i];
    if (name == kInputName) return input;
    auto it = acts.find(name);
    if (it == acts.end())
      throw ValidationError("layer " + l.name + " consumes unknown input '" + name + "'");
    return it->second;
  };

  Tensor last;
  for (auto& l : layers) {
    Tensor out;
    switch (l.kind) {
      case LayerKind::conv:
        out = o::conv2d(resolve(l, 0), l.params.at("weight"), l.params.at("bias"),
                        static_cast<int>(l.attr("stride")),
                        static_cast<int>(l.attr("padding")), tape);
        break;
      case LayerKind::dense:
        out = o::dense(resolve(l, 0), l.params.at("weight"), l.params.at("bias"), tape);
        break;
      case LayerKind::batchnorm:
        // A frozen batch-norm layer holds its statistics still and
        // normalizes with them, matching how backbones behave under
        // fine-tuning with frozen feature extractors.
        out = o::batch_norm(resolve(l, 0), l.params.at("gamma"), l.params.at("beta"),
                            l.buffers.at("running_mean"), l.buffers.at("running_var"),
                            training && l.trainable, kBnMomentum, kBnEps, tape);
        break;
      case LayerKind::maxpool:
        out = o::max_pool2d(resolve(l, 0), static_cast<int>(l.attr("window")),
                            static_cast<int>(l.attr("stride")),
                            static_cast<int>(l.attr("padding")), tape);
        break;
      case LayerKind::avgpool:
        out = o::avg_pool2d(resolve(l, 0), static_cast<int>(l.attr("window")),
                            static_cast<int>(l.attr("stride")),
                            static_cast<int>(l.attr("padding")), tape);
        break;
      case LayerKind::globalpool:
        out = o::global_avg_pool(resolve(l, 0), tape);
        break;
      case LayerKind::relu:
        out = o::relu(resolve(l, 0), tape);
        break;
      case LayerKind::softmax:
        out = o::softmax(resolve(l, 0), tape);
        break;
      case LayerKind::add:
        out = o::add(resolve(l, 0), resolve(l, 1), tape);
        break;
      case LayerKind::concat: {
        std::vector<Tensor> parts;
        parts.reserve(l.inputs.size());
        for (size_t i = 0; i < l.inputs.size(); ++i) parts.push_back(resolve(l, i));
        out = o::concat_channels(parts, tape);
        break;
      }
      case LayerKind::flatten:
        out = o::flatten(resolve(l, 0), tape);
        break;
    }
    acts.emplace(l.name, out);
    if (capture) (*capture)[l.name] = out;
    last = out;
  }

  auto it = acts.find(output);
  if (it == acts.end()) throw ValidationError("network output '" + output + "' not computed");
  return it->second;
}

std::vector<const Layer*> Network::parameterized_layers() const {
  std::vector<const Layer*> out;
  for (const auto& l : layers)
    if (l.has_params()) out.push_back(&l);
  return out;
}

std::vector<Layer*> Network::parameterized_layers() {
  std::vector<Layer*> out;
  for (auto& l : layers)
    if (l.has_params()) out.push_back(&l);
  return out;
}

std::vector<Tensor> Network::trainable_parameters() {
  std::vector<Tensor> out;
  for (auto& l : layers) {
    if (!l.trainable) continue;
    for (auto& [name, t] : l.params) out.push_back(t);
  }
  return out;
}

int64_t Network::trainable_parameter_count() const {
  int64_t n = 0;
  for (const auto& l : layers) {
    if (!l.trainable) continue;
    for (const auto& [name, t] : l.params) n += t.numel();
  }
  return n;
}

int64_t Network::total_parameter_count() const {
  int64_t n = 0;
  for (const auto& l : layers)
    for (const auto& [name, t] : l.params) n += t.numel();
  return n;
}

void Network::clear_gradients() {
  for (auto& l : layers)
    for (auto& [name, t] : l.params) t.drop_grad();
}

uint64_t Network::weights_hash() const {
  uint64_t h = fnv1a64(spec.describe());
  for (const auto& l : layers) {
    for (const auto& [name, t] : l.params) {
      h = fnv1a64(l.name + "/" + name, h);
      h = fnv1a64(hex64(t.content_hash()), h);
    }
    for (const auto& [name, t] : l.buffers) {
      h = fnv1a64(l.name + "/" + name, h);
      h = fnv1a64(hex64(t.content_hash()), h);
    }
  }
  return h;
}

Network deep_copy(const Network& net) {
  Network out = net;  // shares tensor storage until the clones below
  for (auto& l : out.layers) {
    for (auto& [name, t] : l.params) t = t.clone();
    for (auto& [name, t] : l.buffers) t = t.clone();
  }
  return out;
}

void apply_freeze(Network& net, const FreezeMask& mask) {
  auto plist = net.parameterized_layers();
  if (mask.mode == "none") {
    for (Layer* l : plist) l->trainable = true;
  } else if (mask.mode == "all_but_last_k") {
    if (mask.k < 1)
      throw ValidationError("freeze mask all_but_last_k requires k >= 1, got " +
                            std::to_string(mask.k));
    const int64_t total = static_cast<int64_t>(plist.size());
    const int64_t first_trainable = std::max<int64_t>(0, total - mask.k);
    for (int64_t i = 0; i < total; ++i) plist[i]->trainable = i >= first_trainable;
  } else {
    throw ValidationError("unknown freeze mode: " + mask.mode);
  }
  for (Layer* l : plist)
    for (auto& [name, t] : l->params) t.set_requires_grad(l->trainable);
}

AdamState make_adam(const std::vector<Tensor>& params, double lr, double beta1,
                    double beta2, double eps) {
  if (!(lr > 0.0)) throw ValidationError("adam: lr must be positive");
  if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
    throw ValidationError("adam: betas must lie in [0,1)");
  if (!(eps > 0.0)) throw ValidationError("adam: eps must be positive");
  AdamState st;
  st.lr = lr;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.eps = eps;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  st.ids.reserve(params.size());
  for (const Tensor& p : params) {
    st.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
    st.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
    st.ids.push_back(p.id());
  }
  return st;
}

void adam_step(AdamState& state, const std::vector<Tensor>& params) {
  if (params.size() != state.ids.size())
    throw ValidationError("adam_step: parameter list size changed");
  for (size_t i = 0; i < params.size(); ++i)
    if (params[i].id() != state.ids[i])
      throw ValidationError("adam_step: parameter list does not match optimizer state");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));

  for (size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    Tensor m = state.m[i];
    Tensor v = state.v[i];
    dispatch_dtype(p.dtype(), [&](auto tag) {
      using T = decltype(tag);
      auto w = p.data<T>();
      auto gm = m.data<T>();
      auto gv = v.data<T>();
      const bool has = p.has_grad();
      std::span<const T> g;
      if (has) g = std::as_const(p).grad<T>();
      for (size_t j = 0; j < w.size(); ++j) {
        const double gj = has ? static_cast<double>(g[j]) : 0.0;
        const double mj = state.beta1 * static_cast<double>(gm[j]) + (1.0 - state.beta1) * gj;
        const double vj =
            state.beta2 * static_cast<double>(gv[j]) + (1.0 - state.beta2) * gj * gj;
        gm[j] = static_cast<T>(mj);
        gv[j] = static_cast<T>(vj);
        const double step = state.lr * (mj / bc1) / (std::sqrt(vj / bc2) + state.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - step);
      }
    });
  }
}

Tensor he_uniform(Shape shape, int64_t fan_in, Rng& rng, Dtype dtype) {
  if (fan_in <= 0) throw ValidationError("he_uniform: fan_in must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
  Tensor t(std::move(shape), dtype);
  dispatch_dtype(dtype, [&](auto tag) {
    using T = decltype(tag);
    for (auto& x : t.data<T>()) x = static_cast<T>(rng.uniform(-limit, limit));
  });
  return t;
}

}  // namespace uroscan::nn

#include "uroscan/architectures.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace uroscan::arch {

using nn::Layer;
using nn::LayerKind;
using json = nlohmann::json;

int64_t scaled_channels(int64_t base, double scale) {
  if (base <= 0) throw ValidationError("scaled_channels: base must be positive");
  if (!(scale > 0.0)) throw ValidationError("scaled_channels: scale must be positive");
  return std::max<int64_t>(8, std::llround(static_cast<double>(base) * scale));
}

namespace {

void check_spec(const NetworkSpec& spec, const char* arch) {
  if (spec.arch != arch)
    throw ValidationError(std::string("builder for ") + arch + " got spec.arch=" + spec.arch);
  if (!(spec.width_scale > 0.0))
    throw ValidationError("width_scale must be positive");
  if (spec.image_size < 32)
    throw ValidationError("image_size must be at least 32, got " +
                          std::to_string(spec.image_size));
  if (spec.in_channels < 1) throw ValidationError("in_channels must be at least 1");
  if (spec.classes < 2) throw ValidationError("classes must be at least 2");
}

// Incremental graph assembly. Tracks the channel count of every layer so a
// miswired builder fails at construction instead of at first forward.
struct Builder {
  Network& net;
  Rng rng;
  Dtype dt;
  std::map<std::string, int64_t> width;  // layer name -> channels/features

  Builder(Network& n, uint64_t seed) : net(n), rng(seed), dt(n.spec.dtype) {
    width[nn::kInputName] = n.spec.in_channels;
  }

  int64_t channels(const std::string& name) const {
    auto it = width.find(name);
    if (it == width.end()) throw ValidationError("builder: unknown layer " + name);
    return it->second;
  }

  std::string conv(const std::string& name, const std::string& in, int64_t out_c, int k,
                   int stride, int pad) {
    const int64_t in_c = channels(in);
    Layer l{name, LayerKind::conv, {in}, {}, {}, {{"stride", stride}, {"padding", pad}},
            true};
    l.params["weight"] = nn::he_uniform({out_c, in_c, k, k}, in_c * k * k, rng, dt);
    l.params["bias"] = Tensor::zeros({out_c}, dt);
    push(std::move(l), out_c);
    return name;
  }

  std::string bn(const std::string& name, const std::string& in) {
    const int64_t c = channels(in);
    Layer l{name, LayerKind::batchnorm, {in}, {}, {}, {}, true};
    l.params["gamma"] = Tensor::full({c}, 1.0, dt);
    l.params["beta"] = Tensor::zeros({c}, dt);
    l.buffers["running_mean"] = Tensor::zeros({c}, dt);
    l.buffers["running_var"] = Tensor::full({c}, 1.0, dt);
    push(std::move(l), c);
    return name;
  }

  std::string relu(const std::string& name, const std::string& in) {
    push(Layer{name, LayerKind::relu, {in}, {}, {}, {}, true}, channels(in));
    return name;
  }

  std::string maxpool(const std::string& name, const std::string& in, int window,
                      int stride, int pad) {
    push(Layer{name, LayerKind::maxpool, {in}, {}, {},
               {{"window", window}, {"stride", stride}, {"padding", pad}}, true},
         channels(in));
    return name;
  }

  std::string gap(const std::string& name, const std::string& in) {
    push(Layer{name, LayerKind::globalpool, {in}, {}, {}, {}, true}, channels(in));
    return name;
  }

  std::string add(const std::string& name, const std::string& a, const std::string& b) {
    if (channels(a) != channels(b))
      throw ValidationError("builder: add of mismatched widths at " + name);
    push(Layer{name, LayerKind::add, {a, b}, {}, {}, {}, true}, channels(a));
    return name;
  }

  std::string concat(const std::string& name, const std::vector<std::string>& parts) {
    int64_t c = 0;
    for (const auto& p : parts) c += channels(p);
    Layer l{name, LayerKind::concat, {}, {}, {}, {}, true};
    l.inputs = parts;
    push(std::move(l), c);
    return name;
  }

  std::string dense(const std::string& name, const std::string& in, int64_t out_f) {
    const int64_t in_f = channels(in);
    Layer l{name, LayerKind::dense, {in}, {}, {}, {}, true};
    l.params["weight"] = nn::he_uniform({in_f, out_f}, in_f, rng, dt);
    l.params["bias"] = Tensor::zeros({out_f}, dt);
    push(std::move(l), out_f);
    return name;
  }

  std::string softmax(const std::string& name, const std::string& in) {
    push(Layer{name, LayerKind::softmax, {in}, {}, {}, {}, true}, channels(in));
    return name;
  }

  /// conv + bn + relu, the standard unit of the normalized backbones.
  std::string cbr(const std::string& stem, const std::string& in, int64_t out_c, int k,
                  int stride, int pad) {
    conv(stem + "_conv", in, out_c, k, stride, pad);
    bn(stem + "_bn", stem + "_conv");
    return relu(stem + "_relu", stem + "_bn");
  }

 private:
  void push(Layer l, int64_t out_width) {
    if (width.count(l.name)) throw ValidationError("builder: duplicate layer " + l.name);
    width[l.name] = out_width;
    net.layers.push_back(std::move(l));
  }
};

Network fresh(const NetworkSpec& spec) {
  Network net;
  net.spec = spec;
  net.provenance = {kTagInit};
  return net;
}

}  // namespace

void attach_head(Network& net, const std::string& feature_layer, int64_t feature_dim,
                 Rng& rng) {
  const double s = net.spec.width_scale;
  const int64_t h1 = scaled_channels(2048, s);
  const int64_t h2 = scaled_channels(1024, s);
  Builder b(net, 0);
  b.rng = rng;  // continue the caller's weight stream
  b.width[feature_layer] = feature_dim;
  b.dense("head_fc1", feature_layer, h1);
  b.relu("head_relu1", "head_fc1");
  b.dense("head_fc2", "head_relu1", h2);
  b.relu("head_relu2", "head_fc2");
  b.dense("head_fc3", "head_relu2", net.spec.classes);
  b.softmax("prob", "head_fc3");
  net.output = "prob";
}

Network build_vgg16(const NetworkSpec& spec, uint64_t seed) {
  check_spec(spec, "vgg16");
  Network net = fresh(spec);
  Builder b(net, mix_seed(seed, fnv1a64(spec.arch)));

  const int64_t widths[5] = {64, 128, 256, 512, 512};
  const int counts[5] = {2, 2, 3, 3, 3};
  std::string cur = nn::kInputName;
  for (int blk = 0; blk < 5; ++blk) {
    const int64_t c = scaled_channels(widths[blk], spec.width_scale);
    for (int i = 0; i < counts[blk]; ++i) {
      const std::string stem =
          "conv" + std::to_string(blk + 1) + "_" + std::to_string(i + 1);
      b.conv(stem, cur, c, 3, 1, 1);
      cur = b.relu(stem + "_relu", stem);
    }
    cur = b.maxpool("pool" + std::to_string(blk + 1), cur, 2, 2, 0);
  }
  cur = b.gap("gap", cur);

  attach_head(net, cur, b.channels(cur), b.rng);
  net.validate();
  return net;
}

Network build_resnet50(const NetworkSpec& spec, uint64_t seed) {
  check_spec(spec, "resnet50");
  Network net = fresh(spec);
  Builder b(net, mix_seed(seed, fnv1a64(spec.arch)));
  const double s = spec.width_scale;

  b.cbr("stem", nn::kInputName, scaled_channels(64, s), 7, 2, 3);
  std::string cur = b.maxpool("stem_pool", "stem_relu", 3, 2, 1);

  const int blocks[4] = {3, 4, 6, 3};
  const int64_t mids[4] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    const int64_t mid = scaled_channels(mids[stage], s);
    const int64_t out = scaled_channels(mids[stage] * 4, s);
    for (int blk = 0; blk < blocks[stage]; ++blk) {
      const std::string p = "s" + std::to_string(stage + 1) + "b" + std::to_string(blk + 1);
      const int stride = (stage > 0 && blk == 0) ? 2 : 1;
      const std::string residual_in = cur;

      b.cbr(p + "_a", cur, mid, 1, 1, 0);
      b.cbr(p + "_b", p + "_a_relu", mid, 3, stride, 1);
      b.conv(p + "_c_conv", p + "_b_relu", out, 1, 1, 0);
      b.bn(p + "_c_bn", p + "_c_conv");

      std::string shortcut = residual_in;
      if (b.channels(residual_in) != out || stride != 1) {
        b.conv(p + "_down_conv", residual_in, out, 1, stride, 0);
        shortcut = b.bn(p + "_down_bn", p + "_down_conv");
      }
      b.add(p + "_add", p + "_c_bn", shortcut);
      cur = b.relu(p + "_relu", p + "_add");
    }
  }
  cur = b.gap("gap", cur);

  attach_head(net, cur, b.channels(cur), b.rng);
  net.validate();
  return net;
}

Network build_inception_v3(const NetworkSpec& spec, uint64_t seed) {
  check_spec(spec, "inception_v3");
  Network net = fresh(spec);
  Builder b(net, mix_seed(seed, fnv1a64(spec.arch)));
  const double s = spec.width_scale;

  b.cbr("stem1", nn::kInputName, scaled_channels(64, s), 7, 2, 3);
  b.maxpool("stem_pool1", "stem1_relu", 3, 2, 1);
  b.cbr("stem2", "stem_pool1", scaled_channels(64, s), 1, 1, 0);
  b.cbr("stem3", "stem2_relu", scaled_channels(192, s), 3, 1, 1);
  std::string cur = b.maxpool("stem_pool2", "stem3_relu", 3, 2, 1);

  struct ModuleWidths {
    const char* name;
    int64_t b1, b3r, b3, b5r, b5, pool;
  };
  // Mixed-branch widths of the classic nine-module body.
  const ModuleWidths table[] = {
      {"mix3a", 64, 96, 128, 16, 32, 32},    {"mix3b", 128, 128, 192, 32, 96, 64},
      {"mix4a", 192, 96, 208, 16, 48, 64},   {"mix4b", 160, 112, 224, 24, 64, 64},
      {"mix4c", 128, 128, 256, 24, 64, 64},  {"mix4d", 112, 144, 288, 32, 64, 64},
      {"mix4e", 256, 160, 320, 32, 128, 128},
      {"mix5a", 256, 160, 320, 32, 128, 128},
      {"mix5b", 384, 192, 384, 48, 128, 128},
  };

  auto module = [&](const ModuleWidths& m, const std::string& in) {
    const std::string p = m.name;
    b.cbr(p + "_b1", in, scaled_channels(m.b1, s), 1, 1, 0);
    b.cbr(p + "_b3r", in, scaled_channels(m.b3r, s), 1, 1, 0);
    b.cbr(p + "_b3", p + "_b3r_relu", scaled_channels(m.b3, s), 3, 1, 1);
    b.cbr(p + "_b5r", in, scaled_channels(m.b5r, s), 1, 1, 0);
    b.cbr(p + "_b5", p + "_b5r_relu", scaled_channels(m.b5, s), 5, 1, 2);
    b.maxpool(p + "_pool", in, 3, 1, 1);
    b.cbr(p + "_bp", p + "_pool", scaled_channels(m.pool, s), 1, 1, 0);
    return b.concat(p, {p + "_b1_relu", p + "_b3_relu", p + "_b5_relu", p + "_bp_relu"});
  };

  cur = module(table[0], cur);
  cur = module(table[1], cur);
  cur = b.maxpool("pool3", cur, 3, 2, 1);
  for (int i = 2; i <= 6; ++i) cur = module(table[i], cur);
  cur = b.maxpool("pool4", cur, 3, 2, 1);
  cur = module(table[7], cur);
  cur = module(table[8], cur);
  cur = b.gap("gap", cur);

  attach_head(net, cur, b.channels(cur), b.rng);
  net.validate();
  return net;
}

Network build_network(const NetworkSpec& spec, uint64_t seed) {
  if (spec.arch == "vgg16") return build_vgg16(spec, seed);
  if (spec.arch == "inception_v3") return build_inception_v3(spec, seed);
  if (spec.arch == "resnet50") return build_resnet50(spec, seed);
  throw ValidationError("unknown architecture: " + spec.arch);
}

// ---------------------------------------------------------------------------
// Checkpoint format, version 1 (all integers little-endian):
//   bytes 0..7    magic "UROCKPT\n"
//   bytes 8..11   u32 format version
//   bytes 12..19  u64 JSON header length
//   header        JSON: spec, lineage, graph topology, blob directory
//   blobs         raw tensor bytes, offsets relative to the blob section
// ---------------------------------------------------------------------------

namespace {

json spec_to_json(const NetworkSpec& s) {
  return json{{"arch", s.arch},
              {"width_scale", s.width_scale},
              {"image_size", s.image_size},
              {"in_channels", s.in_channels},
              {"classes", s.classes},
              {"dtype", dtype_name(s.dtype)}};
}

NetworkSpec spec_from_json(const json& j) {
  NetworkSpec s;
  s.arch = j.at("arch").get<std::string>();
  s.width_scale = j.at("width_scale").get<double>();
  s.image_size = j.at("image_size").get<int64_t>();
  s.in_channels = j.at("in_channels").get<int64_t>();
  s.classes = j.at("classes").get<int64_t>();
  s.dtype = dtype_from_name(j.at("dtype").get<std::string>());
  return s;
}

json tensor_entry(const Tensor& t, uint64_t& offset) {
  const uint64_t bytes = static_cast<uint64_t>(t.numel()) * dtype_size(t.dtype());
  json e{{"dtype", dtype_name(t.dtype())},
         {"shape", t.shape()},
         {"offset", offset},
         {"length", bytes}};
  offset += bytes;
  return e;
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path, int64_t seq,
                     const std::string& parent_hash) {
  net.validate();
  json header;
  header["spec"] = spec_to_json(net.spec);
  header["provenance"] = net.provenance;
  header["seq"] = seq;
  header["parent_hash"] = parent_hash;
  header["weights_hash"] = hex64(net.weights_hash());
  header["output"] = net.output;

  uint64_t offset = 0;
  json jlayers = json::array();
  for (const Layer& l : net.layers) {
    json jl{{"name", l.name},
            {"kind", nn::kind_name(l.kind)},
            {"inputs", l.inputs},
            {"attrs", l.attrs},
            {"trainable", l.trainable}};
    json params = json::object(), buffers = json::object();
    for (const auto& [pname, t] : l.params) params[pname] = tensor_entry(t, offset);
    for (const auto& [bname, t] : l.buffers) buffers[bname] = tensor_entry(t, offset);
    jl["params"] = params;
    jl["buffers"] = buffers;
    jlayers.push_back(std::move(jl));
  }
  header["layers"] = std::move(jlayers);

  const std::string htext = header.dump();
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const uint32_t version = kCheckpointVersion;
  os.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const uint64_t hlen = htext.size();
  os.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  os.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const Layer& l : net.layers) {
    auto dump = [&](const Tensor& t) {
      dispatch_dtype(t.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto d = t.data<T>();
        os.write(reinterpret_cast<const char*>(d.data()),
                 static_cast<std::streamsize>(d.size_bytes()));
      });
    };
    for (const auto& [pname, t] : l.params) dump(t);
    for (const auto& [bname, t] : l.buffers) dump(t);
  }
  if (!os) throw IoError("short write while saving checkpoint: " + path);
}

namespace {

struct RawFile {
  std::string bytes;
};

RawFile slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  RawFile f;
  f.bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
  return f;
}

json parse_header(const RawFile& f, size_t* blob_start) {
  constexpr size_t kPreamble = sizeof(kCheckpointMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (f.bytes.size() < kPreamble)
    throw CheckpointTruncatedError("checkpoint shorter than its preamble");
  if (std::memcmp(f.bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw CheckpointError("not a checkpoint file (bad magic)");
  uint32_t version = 0;
  std::memcpy(&version, f.bytes.data() + sizeof(kCheckpointMagic), sizeof(version));
  if (version != kCheckpointVersion)
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) +
                                 " (expected " + std::to_string(kCheckpointVersion) + ")");
  uint64_t hlen = 0;
  std::memcpy(&hlen, f.bytes.data() + sizeof(kCheckpointMagic) + sizeof(version), sizeof(hlen));
  if (kPreamble + hlen > f.bytes.size())
    throw CheckpointTruncatedError("checkpoint header extends past end of file");
  json header;
  try {
    header = json::parse(f.bytes.substr(kPreamble, hlen));
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  *blob_start = kPreamble + static_cast<size_t>(hlen);
  return header;
}

CheckpointMeta meta_from_header(const json& header) {
  CheckpointMeta meta;
  meta.spec = spec_from_json(header.at("spec"));
  meta.provenance = header.at("provenance").get<std::vector<std::string>>();
  meta.seq = header.at("seq").get<int64_t>();
  meta.parent_hash = header.at("parent_hash").get<std::string>();
  meta.weights_hash = header.at("weights_hash").get<std::string>();
  return meta;
}

Tensor tensor_from_entry(const json& e, const RawFile& f, size_t blob_start) {
  const Dtype dt = dtype_from_name(e.at("dtype").get<std::string>());
  const Shape shape = e.at("shape").get<Shape>();
  const uint64_t offset = e.at("offset").get<uint64_t>();
  const uint64_t length = e.at("length").get<uint64_t>();
  Tensor t(shape, dt);
  const uint64_t want = static_cast<uint64_t>(t.numel()) * dtype_size(dt);
  if (length != want)
    throw CheckpointError("blob length does not match its declared shape");
  if (blob_start + offset + length > f.bytes.size())
    throw CheckpointTruncatedError("weight blob extends past end of file");
  dispatch_dtype(dt, [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(t.data<T>().data(), f.bytes.data() + blob_start + offset, length);
  });
  return t;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const std::string& path) {
  RawFile f = slurp(path);
  size_t blob_start = 0;
  return meta_from_header(parse_header(f, &blob_start));
}

Network load_checkpoint(const std::string& path, CheckpointMeta* meta,
                        const std::optional<NetworkSpec>& expect) {
  RawFile f = slurp(path);
  size_t blob_start = 0;
  const json header = parse_header(f, &blob_start);
  CheckpointMeta m = meta_from_header(header);
  if (expect && !(m.spec == *expect))
    throw CheckpointSpecError("checkpoint holds " + m.spec.describe() + ", expected " +
                              expect->describe());

  Network net;
  net.spec = m.spec;
  net.provenance = m.provenance;
  net.output = header.at("output").get<std::string>();
  for (const json& jl : header.at("layers")) {
    Layer l;
    l.name = jl.at("name").get<std::string>();
    l.kind = nn::kind_from_name(jl.at("kind").get<std::string>());
    l.inputs = jl.at("inputs").get<std::vector<std::string>>();
    l.attrs = jl.at("attrs").get<std::map<std::string, int64_t>>();
    l.trainable = jl.at("trainable").get<bool>();
    for (const auto& [pname, e] : jl.at("params").items())
      l.params[pname] = tensor_from_entry(e, f, blob_start);
    for (const auto& [bname, e] : jl.at("buffers").items())
      l.buffers[bname] = tensor_from_entry(e, f, blob_start);
    net.layers.push_back(std::move(l));
  }
  net.validate();
  if (hex64(net.weights_hash()) != m.weights_hash)
    throw CheckpointError("stored weights hash does not match restored contents");
  if (meta) *meta = m;
  return net;
}

}  // namespace uroscan::arch

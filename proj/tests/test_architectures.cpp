#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "uroscan/architectures.hpp"

using namespace uroscan;
using namespace uroscan::nn;
using namespace uroscan::arch;
namespace fs = std::filesystem;

namespace {

int count_kind(const Network& net, LayerKind k) {
  int n = 0;
  for (const auto& l : net.layers) n += l.kind == k ? 1 : 0;
  return n;
}

int64_t kernel_of(const Layer& l) { return l.params.at("weight").shape()[2]; }

NetworkSpec small_spec(const std::string& arch) {
  return {arch, 0.125, 32, 3, 2, Dtype::f32};
}

fs::path temp_file(const std::string& stem) {
  return fs::temp_directory_path() / ("uroscan_" + stem + ".ckpt");
}

}  // namespace

TEST_CASE("scaled_channels rounds and clamps") {
  CHECK(scaled_channels(64, 1.0) == 64);
  CHECK(scaled_channels(64, 0.25) == 16);
  CHECK(scaled_channels(64, 0.01) == 8);    // floor
  CHECK(scaled_channels(2048, 0.5) == 1024);
  CHECK(scaled_channels(100, 1.5) == 150);
  CHECK(scaled_channels(3, 1.0) == 8);
  CHECK_THROWS_AS(scaled_channels(0, 1.0), ValidationError);
  CHECK_THROWS_AS(scaled_channels(64, 0.0), ValidationError);
}

TEST_CASE("vgg16 has thirteen 3x3 convs in five doubling blocks") {
  NetworkSpec spec{"vgg16", 1.0, 224, 3, 2, Dtype::f32};
  Network net = build_vgg16(spec, 1);

  CHECK(count_kind(net, LayerKind::conv) == 13);
  CHECK(count_kind(net, LayerKind::maxpool) == 5);
  CHECK(count_kind(net, LayerKind::batchnorm) == 0);
  CHECK(count_kind(net, LayerKind::dense) == 3);

  const int64_t want_width[5] = {64, 128, 256, 512, 512};
  const int want_count[5] = {2, 2, 3, 3, 3};
  for (int blk = 0; blk < 5; ++blk)
    for (int i = 0; i < want_count[blk]; ++i) {
      const auto& l =
          net.layer("conv" + std::to_string(blk + 1) + "_" + std::to_string(i + 1));
      CHECK(l.params.at("weight").shape()[0] == want_width[blk]);
      CHECK(kernel_of(l) == 3);
      CHECK(l.attr("stride") == 1);
      CHECK(l.attr("padding") == 1);
    }
  CHECK(net.provenance == std::vector<std::string>{kTagInit});
}

TEST_CASE("resnet50 is four bottleneck stages of 3-4-6-3 blocks with skips") {
  NetworkSpec spec{"resnet50", 1.0, 224, 3, 2, Dtype::f32};
  Network net = build_resnet50(spec, 1);

  // 1 stem + 16 blocks x 3 + 4 downsample projections.
  CHECK(count_kind(net, LayerKind::conv) == 53);
  CHECK(count_kind(net, LayerKind::add) == 16);
  CHECK(count_kind(net, LayerKind::batchnorm) == count_kind(net, LayerKind::conv));
  CHECK(count_kind(net, LayerKind::globalpool) == 1);

  const int blocks[4] = {3, 4, 6, 3};
  const int64_t mids[4] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage)
    for (int blk = 0; blk < blocks[stage]; ++blk) {
      const std::string p =
          "s" + std::to_string(stage + 1) + "b" + std::to_string(blk + 1);
      CHECK(kernel_of(net.layer(p + "_a_conv")) == 1);
      CHECK(kernel_of(net.layer(p + "_b_conv")) == 3);
      CHECK(kernel_of(net.layer(p + "_c_conv")) == 1);
      CHECK(net.layer(p + "_a_conv").params.at("weight").shape()[0] == mids[stage]);
      CHECK(net.layer(p + "_c_conv").params.at("weight").shape()[0] == mids[stage] * 4);
      const int want_stride = (stage > 0 && blk == 0) ? 2 : 1;
      CHECK(net.layer(p + "_b_conv").attr("stride") == want_stride);
      CHECK(net.has_layer(p + "_down_conv") == (blk == 0));
    }
  CHECK(net.layer("stem_conv").attr("stride") == 2);
  CHECK(kernel_of(net.layer("stem_conv")) == 7);
  CHECK(net.layer("head_fc1").params.at("weight").shape()[0] == 2048);
}

TEST_CASE("inception body is nine modules mixing 1x1, 3x3 and 5x5 branches") {
  NetworkSpec spec{"inception_v3", 1.0, 224, 3, 2, Dtype::f32};
  Network net = build_inception_v3(spec, 1);

  const char* names[] = {"mix3a", "mix3b", "mix4a", "mix4b", "mix4c",
                         "mix4d", "mix4e", "mix5a", "mix5b"};
  CHECK(count_kind(net, LayerKind::concat) == 9);
  for (const char* m : names) {
    const std::string p = m;
    CHECK(kernel_of(net.layer(p + "_b1_conv")) == 1);
    CHECK(kernel_of(net.layer(p + "_b3_conv")) == 3);
    CHECK(kernel_of(net.layer(p + "_b5_conv")) == 5);
    CHECK(kernel_of(net.layer(p + "_bp_conv")) == 1);
    const auto& cat = net.layer(p);
    CHECK(cat.kind == LayerKind::concat);
    CHECK(cat.inputs.size() == 4);
  }
  // Feature width entering the head: 384 + 384 + 128 + 128.
  CHECK(net.layer("head_fc1").params.at("weight").shape()[0] == 1024);
  // Every conv is normalized.
  CHECK(count_kind(net, LayerKind::batchnorm) == count_kind(net, LayerKind::conv));
}

TEST_CASE("the classifier head is 2048-1024-2 with softmax output") {
  for (const char* a : {"vgg16", "inception_v3", "resnet50"}) {
    NetworkSpec spec{a, 1.0, 224, 3, 2, Dtype::f32};
    Network net = build_network(spec, 3);
    CHECK(net.output == "prob");
    CHECK(net.layers.back().kind == LayerKind::softmax);
    CHECK(net.layer("head_fc1").params.at("weight").shape()[1] == 2048);
    CHECK(net.layer("head_fc2").params.at("weight").shape()[1] == 1024);
    CHECK(net.layer("head_fc3").params.at("weight").shape()[1] == 2);

    // Freezing everything but the head leaves exactly the head trainable.
    apply_freeze(net, {"all_but_last_k", 3});
    const int64_t f = net.layer("head_fc1").params.at("weight").shape()[0];
    const int64_t want =
        (f * 2048 + 2048) + (2048 * 1024 + 1024) + (1024 * 2 + 2);
    CHECK(net.trainable_parameter_count() == want);
    if (std::string(a) == "resnet50") CHECK(want == 6296578);
  }
}

TEST_CASE("width scaling shrinks every stage but keeps the graph shape") {
  NetworkSpec spec{"resnet50", 0.25, 64, 3, 2, Dtype::f32};
  Network net = build_resnet50(spec, 1);
  CHECK(count_kind(net, LayerKind::conv) == 53);
  CHECK(net.layer("stem_conv").params.at("weight").shape()[0] == 16);
  CHECK(net.layer("s4b3_c_conv").params.at("weight").shape()[0] == 512);
  CHECK(net.layer("head_fc1").params.at("weight").shape() == Shape{512, 512});
  CHECK(net.layer("head_fc2").params.at("weight").shape() == Shape{512, 256});
}

TEST_CASE("every architecture runs forward at reduced size and width") {
  Rng rng(5);
  for (const char* a : {"vgg16", "inception_v3", "resnet50"}) {
    Network net = build_network(small_spec(a), 7);
    Tensor x(Shape{2, 3, 32, 32}, Dtype::f32);
    for (int64_t i = 0; i < x.numel(); ++i) x.set_value(i, rng.uniform(-1.0, 1.0));
    Tensor probs = net.forward(x, false);
    REQUIRE(probs.shape() == Shape{2, 2});
    CHECK(probs.all_finite());
    for (int64_t n = 0; n < 2; ++n)
      CHECK(probs.value_at(n * 2) + probs.value_at(n * 2 + 1) ==
            doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("builders are deterministic in the seed") {
  for (const char* a : {"vgg16", "inception_v3", "resnet50"}) {
    Network n1 = build_network(small_spec(a), 11);
    Network n2 = build_network(small_spec(a), 11);
    Network n3 = build_network(small_spec(a), 12);
    CHECK(n1.weights_hash() == n2.weights_hash());
    CHECK(n1.weights_hash() != n3.weights_hash());
  }
}

TEST_CASE("builders reject nonsense specs") {
  CHECK_THROWS_AS(build_vgg16({"resnet50", 1, 224, 3, 2, Dtype::f32}, 1), ValidationError);
  CHECK_THROWS_AS(build_vgg16({"vgg16", 0.0, 224, 3, 2, Dtype::f32}, 1), ValidationError);
  CHECK_THROWS_AS(build_vgg16({"vgg16", 1, 16, 3, 2, Dtype::f32}, 1), ValidationError);
  CHECK_THROWS_AS(build_vgg16({"vgg16", 1, 224, 0, 2, Dtype::f32}, 1), ValidationError);
  CHECK_THROWS_AS(build_vgg16({"vgg16", 1, 224, 3, 1, Dtype::f32}, 1), ValidationError);
  CHECK_THROWS_AS(build_network({"alexnet", 1, 224, 3, 2, Dtype::f32}, 1), ValidationError);
}

TEST_CASE("checkpoints round-trip weights, lineage, and freeze state") {
  Network net = build_network(small_spec("resnet50"), 21);
  apply_freeze(net, {"all_but_last_k", 4});
  net.provenance.push_back(kTagCys);
  const fs::path path = temp_file("roundtrip");

  save_checkpoint(net, path.string(), 2, "feedfacefeedface");
  Network back = load_checkpoint(path.string());

  CHECK(back.spec == net.spec);
  CHECK(back.provenance == net.provenance);
  CHECK(back.weights_hash() == net.weights_hash());
  CHECK(back.output == net.output);
  REQUIRE(back.layers.size() == net.layers.size());
  for (size_t i = 0; i < net.layers.size(); ++i) {
    CHECK(back.layers[i].trainable == net.layers[i].trainable);
    for (const auto& [pname, t] : net.layers[i].params)
      CHECK(back.layers[i].params.at(pname).bitwise_equal(t));
    for (const auto& [bname, t] : net.layers[i].buffers)
      CHECK(back.layers[i].buffers.at(bname).bitwise_equal(t));
  }

  CheckpointMeta meta = read_checkpoint_meta(path.string());
  CHECK(meta.seq == 2);
  CHECK(meta.parent_hash == "feedfacefeedface");
  CHECK(meta.weights_hash == hex64(net.weights_hash()));
  CHECK(meta.provenance == net.provenance);
  fs::remove(path);
}

TEST_CASE("checkpoint bytes are identical across saves") {
  Network net = build_network(small_spec("vgg16"), 33);
  const fs::path p1 = temp_file("bytes1"), p2 = temp_file("bytes2");
  save_checkpoint(net, p1.string(), 1, "");
  save_checkpoint(net, p2.string(), 1, "");
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  const std::string b1((std::istreambuf_iterator<char>(f1)), {});
  const std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  CHECK(!b1.empty());
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("checkpoint loader distinguishes its failure modes") {
  Network net = build_network(small_spec("vgg16"), 41);
  const fs::path path = temp_file("failures");
  save_checkpoint(net, path.string(), 1, "");

  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), {});
  is.close();

  auto write_variant = [&](const std::string& data) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(data.data(), static_cast<std::streamsize>(data.size()));
  };

  SUBCASE("missing file is an io error") {
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/nowhere.ckpt"), IoError);
  }
  SUBCASE("bad magic") {
    std::string bad = bytes;
    bad[0] = 'X';
    write_variant(bad);
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointError);
    CHECK_THROWS_AS(load_checkpoint(path.string()), std::runtime_error);
  }
  SUBCASE("future version") {
    std::string bad = bytes;
    bad[8] = 9;  // little-endian low byte of the version word
    write_variant(bad);
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointVersionError);
  }
  SUBCASE("truncated blob section") {
    write_variant(bytes.substr(0, bytes.size() - 64));
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointTruncatedError);
  }
  SUBCASE("truncated header") {
    write_variant(bytes.substr(0, 24));
    CHECK_THROWS_AS(load_checkpoint(path.string()), CheckpointTruncatedError);
  }
  SUBCASE("spec mismatch") {
    write_variant(bytes);
    NetworkSpec other = small_spec("vgg16");
    other.width_scale = 0.5;
    CHECK_THROWS_AS(load_checkpoint(path.string(), nullptr, other), CheckpointSpecError);
    // The right spec passes.
    CHECK_NOTHROW(load_checkpoint(path.string(), nullptr, small_spec("vgg16")));
  }
  fs::remove(path);
}

TEST_CASE("loading into the wrong expectation never mutates the caller") {
  // A frozen, fine-tuned network reloads with identical behavior.
  Network net = build_network(small_spec("inception_v3"), 55);
  apply_freeze(net, {"all_but_last_k", 5});
  Rng rng(3);
  Tensor x(Shape{1, 3, 32, 32}, Dtype::f32);
  for (int64_t i = 0; i < x.numel(); ++i) x.set_value(i, rng.uniform(-1.0, 1.0));
  Tensor before = net.forward(x, false);

  const fs::path path = temp_file("behavior");
  save_checkpoint(net, path.string());
  Network back = load_checkpoint(path.string(), nullptr, net.spec);
  Tensor after = back.forward(x, false);
  CHECK(after.bitwise_equal(before));
  fs::remove(path);
}

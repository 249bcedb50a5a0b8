#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "uroscan/nn.hpp"

using namespace uroscan;
using namespace uroscan::nn;
namespace o = uroscan::ops;

namespace {

Tensor rand_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0,
                   Dtype dt = Dtype::f64) {
  Tensor t(std::move(s), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set_value(i, rng.uniform(lo, hi));
  return t;
}

// conv(3x3) -> bn -> relu -> maxpool -> flatten -> dense -> softmax on 6x6 inputs.
Network tiny_net(Dtype dt = Dtype::f64, uint64_t seed = 5) {
  Rng rng(seed);
  Network net;
  net.spec = {"tiny", 1.0, 6, 1, 2, dt};

  Layer conv{"conv1", LayerKind::conv, {kInputName}, {}, {}, {{"stride", 1}, {"padding", 1}}};
  conv.params["weight"] = he_uniform({4, 1, 3, 3}, 9, rng, dt);
  conv.params["bias"] = Tensor::zeros({4}, dt);

  Layer bn{"bn1", LayerKind::batchnorm, {"conv1"}, {}, {}, {}};
  bn.params["gamma"] = Tensor::full({4}, 1.0, dt);
  bn.params["beta"] = Tensor::zeros({4}, dt);
  bn.buffers["running_mean"] = Tensor::zeros({4}, dt);
  bn.buffers["running_var"] = Tensor::full({4}, 1.0, dt);

  Layer act{"relu1", LayerKind::relu, {"bn1"}, {}, {}, {}};
  Layer pool{"pool1", LayerKind::maxpool, {"relu1"}, {}, {},
             {{"window", 2}, {"stride", 2}, {"padding", 0}}};
  Layer flat{"flatten", LayerKind::flatten, {"pool1"}, {}, {}, {}};

  Layer fc{"fc", LayerKind::dense, {"flatten"}, {}, {}, {}};
  fc.params["weight"] = he_uniform({4 * 3 * 3, 2}, 36, rng, dt);
  fc.params["bias"] = Tensor::zeros({2}, dt);

  Layer soft{"prob", LayerKind::softmax, {"fc"}, {}, {}, {}};

  net.layers = {conv, bn, act, pool, flat, fc, soft};
  net.output = "prob";
  net.validate();
  return net;
}

}  // namespace

TEST_CASE("network forward matches the same ops composed by hand") {
  Network net = tiny_net();
  Rng rng(17);
  Tensor x = rand_tensor({3, 1, 6, 6}, rng);

  Tensor rm = net.layer("bn1").buffers.at("running_mean").clone();
  Tensor rv = net.layer("bn1").buffers.at("running_var").clone();
  Tensor want = o::conv2d(x, net.layer("conv1").params.at("weight"),
                          net.layer("conv1").params.at("bias"), 1, 1);
  want = o::batch_norm(want, net.layer("bn1").params.at("gamma"),
                       net.layer("bn1").params.at("beta"), rm, rv, true);
  want = o::flatten(o::max_pool2d(o::relu(want), 2, 2));
  want = o::softmax(o::dense(want, net.layer("fc").params.at("weight"),
                             net.layer("fc").params.at("bias")));

  std::map<std::string, Tensor> acts;
  Tensor got = net.forward(x, true, nullptr, &acts);
  CHECK(got.bitwise_equal(want));
  CHECK(acts.size() == 7);
  CHECK(acts.at("prob").bitwise_equal(got));
  CHECK(acts.at("conv1").shape() == Shape{3, 4, 6, 6});
  // Training forward advanced the real running buffers away from the clones' start.
  CHECK(net.layer("bn1").buffers.at("running_mean").bitwise_equal(rm));
}

TEST_CASE("network validation rejects malformed graphs") {
  Network net = tiny_net();
  CHECK_NOTHROW(net.validate());

  Network dup = tiny_net();
  dup.layers[2].name = "conv1";
  CHECK_THROWS_AS(dup.validate(), ValidationError);

  Network dangling = tiny_net();
  dangling.layers[3].inputs = {"missing"};
  CHECK_THROWS_AS(dangling.validate(), ValidationError);

  Network forward_ref = tiny_net();
  forward_ref.layers[0].inputs = {"fc"};
  CHECK_THROWS_AS(forward_ref.validate(), ValidationError);

  Network no_out = tiny_net();
  no_out.output = "nope";
  CHECK_THROWS_AS(no_out.validate(), ValidationError);

  Network bad_arity = tiny_net();
  bad_arity.layers[2].inputs = {"bn1", "conv1"};
  CHECK_THROWS_AS(bad_arity.validate(), ValidationError);

  Network stripped = tiny_net();
  stripped.layers[0].params.clear();
  CHECK_THROWS_AS(stripped.validate(), ValidationError);
}

TEST_CASE("parameter bookkeeping counts trainables by layer") {
  Network net = tiny_net();
  // conv 4*1*3*3+4, bn 4+4, fc 36*2+2
  CHECK(net.total_parameter_count() == 40 + 8 + 74);
  CHECK(net.trainable_parameter_count() == net.total_parameter_count());

  apply_freeze(net, {"all_but_last_k", 1});
  CHECK(net.trainable_parameter_count() == 74);
  CHECK(net.trainable_parameters().size() == 2);

  apply_freeze(net, {"all_but_last_k", 2});
  CHECK(net.trainable_parameter_count() == 8 + 74);

  apply_freeze(net, {"all_but_last_k", 99});  // more than exist: nothing frozen
  CHECK(net.trainable_parameter_count() == net.total_parameter_count());

  apply_freeze(net, {"none", 0});
  CHECK(net.trainable_parameter_count() == net.total_parameter_count());

  CHECK_THROWS_AS(apply_freeze(net, {"all_but_last_k", 0}), ValidationError);
  CHECK_THROWS_AS(apply_freeze(net, {"sideways", 1}), ValidationError);
}

TEST_CASE("freeze stops gradients, updates, and batch-norm drift") {
  Network net = tiny_net();
  apply_freeze(net, {"all_but_last_k", 1});

  for (const Layer* l : std::as_const(net).parameterized_layers()) {
    for (const auto& [pname, t] : l->params)
      CHECK(t.requires_grad() == (l->name == "fc"));
  }

  Rng rng(19);
  Tensor x = rand_tensor({4, 1, 6, 6}, rng);
  Tensor y = Tensor::from_values({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1});

  const uint64_t conv_w = net.layer("conv1").params.at("weight").content_hash();
  const uint64_t bn_g = net.layer("bn1").params.at("gamma").content_hash();
  const uint64_t bn_rm = net.layer("bn1").buffers.at("running_mean").content_hash();
  const uint64_t bn_rv = net.layer("bn1").buffers.at("running_var").content_hash();
  const uint64_t fc_w = net.layer("fc").params.at("weight").content_hash();

  auto params = net.trainable_parameters();
  AdamState adam = make_adam(params, 1e-3);
  for (int step = 0; step < 3; ++step) {
    Tape tape;
    Tensor probs = net.forward(x, true, &tape);
    Tensor loss = o::cross_entropy(probs, y, &tape);
    tape.backward(loss);
    // Frozen prefix must not even be recorded: conv/bn/relu/pool/flatten
    // run untaped, so only dense, softmax, and the loss node appear.
    CHECK(tape.node_count() == 3);
    adam_step(adam, params);
    net.clear_gradients();
  }

  CHECK(net.layer("conv1").params.at("weight").content_hash() == conv_w);
  CHECK(net.layer("bn1").params.at("gamma").content_hash() == bn_g);
  CHECK(net.layer("bn1").buffers.at("running_mean").content_hash() == bn_rm);
  CHECK(net.layer("bn1").buffers.at("running_var").content_hash() == bn_rv);
  CHECK(net.layer("fc").params.at("weight").content_hash() != fc_w);
}

TEST_CASE("frozen batch-norm normalizes with its stored statistics") {
  Network net = tiny_net();
  apply_freeze(net, {"all_but_last_k", 1});
  Rng rng(23);
  Tensor x = rand_tensor({2, 1, 6, 6}, rng);
  Tensor train_mode = net.forward(x, true);
  Tensor eval_mode = net.forward(x, false);
  CHECK(train_mode.bitwise_equal(eval_mode));
}

TEST_CASE("adam first step has magnitude close to the learning rate") {
  Tensor w = Tensor::from_values({4}, {1.0, -2.0, 0.5, 3.0});
  w.set_requires_grad(true);
  Tape tape;
  Tensor target = Tensor::from_values({4}, {0.0, 0.0, 0.0, 0.0});
  Tensor diff = o::add(w, o::scale(target, -1.0, &tape), &tape);
  Tensor loss = o::sum(o::mul(diff, diff, &tape), &tape);
  tape.backward(loss);

  std::vector<Tensor> params{w};
  AdamState st = make_adam(params, 0.01);
  Tensor before = w.clone();
  adam_step(st, params);
  for (int64_t i = 0; i < 4; ++i) {
    const double delta = w.value_at(i) - before.value_at(i);
    CHECK(std::abs(std::abs(delta) - 0.01) < 1e-6);  // lr * g/(|g|+eps)
    const double g = 2.0 * before.value_at(i);
    CHECK(delta * g < 0.0);  // moves against the gradient
  }
  CHECK(st.t == 1);
}

TEST_CASE("adam leaves a parameter with zero gradient untouched at step one") {
  Tensor w = Tensor::from_values({3}, {1.0, 2.0, 3.0});
  std::vector<Tensor> params{w};
  AdamState st = make_adam(params, 0.1);
  Tensor before = w.clone();
  adam_step(st, params);  // no grad buffer at all
  CHECK(w.bitwise_equal(before));

  w.ensure_grad();  // explicit zero gradient
  adam_step(st, params);
  CHECK(w.bitwise_equal(before));
}

TEST_CASE("adam drives a quadratic to its minimum") {
  Tensor w = Tensor::scalar(0.0);
  w.set_requires_grad(true);
  std::vector<Tensor> params{w};
  AdamState st = make_adam(params, 0.1);
  double max_step = 0.0;
  for (int i = 0; i < 400; ++i) {
    w.drop_grad();
    Tape tape;
    Tensor diff = o::add(w, Tensor::scalar(-3.0), &tape);
    Tensor loss = o::mul(diff, diff, &tape);
    tape.backward(loss);
    const double before = w.item();
    adam_step(st, params);
    max_step = std::max(max_step, std::abs(w.item() - before));
  }
  CHECK(std::abs(w.item() - 3.0) < 1e-2);
  CHECK(max_step < 4.0 * 0.1);
}

TEST_CASE("adam guards against a drifting parameter list") {
  Tensor a = Tensor::zeros({2});
  Tensor b = Tensor::zeros({2});
  AdamState st = make_adam({a}, 0.1);
  std::vector<Tensor> swapped{b};
  CHECK_THROWS_AS(adam_step(st, swapped), ValidationError);
  std::vector<Tensor> grown{a, b};
  CHECK_THROWS_AS(adam_step(st, grown), ValidationError);
  CHECK_THROWS_AS(make_adam({a}, 0.0), ValidationError);
  CHECK_THROWS_AS(make_adam({a}, 0.1, 1.0), ValidationError);
  CHECK_THROWS_AS(make_adam({a}, 0.1, 0.9, 0.999, 0.0), ValidationError);
}

TEST_CASE("adam training is reproducible bit for bit") {
  auto run = [] {
    Network net = tiny_net(Dtype::f32, 99);
    Rng rng(7);
    Tensor x = rand_tensor({4, 1, 6, 6}, rng, -1.0, 1.0, Dtype::f32);
    Tensor y = Tensor::from_values({4, 2}, {1, 0, 0, 1, 1, 0, 0, 1}, Dtype::f32);
    auto params = net.trainable_parameters();
    AdamState st = make_adam(params, 1e-3);
    for (int step = 0; step < 5; ++step) {
      net.clear_gradients();
      Tape tape;
      Tensor loss = o::cross_entropy(net.forward(x, true, &tape), y, &tape);
      tape.backward(loss);
      adam_step(st, params);
    }
    return net.weights_hash();
  };
  CHECK(run() == run());
}

TEST_CASE("he_uniform respects its limit and its seed") {
  Rng rng(31);
  Tensor t = he_uniform({64, 3, 3, 3}, 27, rng, Dtype::f32);
  const double limit = std::sqrt(6.0 / 27.0);
  for (int64_t i = 0; i < t.numel(); ++i) {
    CHECK(t.value_at(i) <= limit);
    CHECK(t.value_at(i) >= -limit);
  }
  Rng rng2(31);
  CHECK(he_uniform({64, 3, 3, 3}, 27, rng2, Dtype::f32).bitwise_equal(t));
  CHECK_THROWS_AS(he_uniform({2}, 0, rng, Dtype::f32), ValidationError);
}

TEST_CASE("training reduces loss on a separable toy problem") {
  Network net = tiny_net(Dtype::f64, 3);
  Rng rng(41);
  // Two blobs: class 0 bright top-left, class 1 bright bottom-right.
  Tensor x = Tensor::zeros({8, 1, 6, 6});
  Tensor y = Tensor::zeros({8, 2});
  for (int64_t n = 0; n < 8; ++n) {
    const int cls = static_cast<int>(n % 2);
    y.set_value(n * 2 + cls, 1.0);
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j) {
        const int64_t r = cls == 0 ? i : 3 + i, q = cls == 0 ? j : 3 + j;
        x.set_value(n * 36 + r * 6 + q, 1.0 + 0.1 * rng.uniform());
      }
  }
  auto params = net.trainable_parameters();
  AdamState st = make_adam(params, 1e-2);
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 60; ++step) {
    net.clear_gradients();
    Tape tape;
    Tensor loss = o::cross_entropy(net.forward(x, true, &tape), y, &tape);
    tape.backward(loss);
    adam_step(st, params);
    if (step == 0) first = loss.item();
    last = loss.item();
  }
  CHECK(last < first);
  CHECK(last < 0.1);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>

#include "doctest.h"
#include "fd_check.hpp"
#include "surgpis/net/checkpoint.hpp"
#include "surgpis/net/net.hpp"
#include "test_helpers.hpp"

using namespace surgpis;

namespace {

ImageF random_image(int h, int w, uint64_t seed) {
  ImageF img(h, w);
  Rng rng(seed);
  for (auto& v : img.data) v = rng.uniform();
  return img;
}

NetConfig small_config() {
  NetConfig cfg;
  cfg.embed_dim = 32;
  cfg.num_queries = 8;
  cfg.decoder_layers = 2;
  cfg.attn_heads = 4;
  cfg.stem_channels = 4;
  return cfg;
}

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.embed_dim = 8;
  cfg.num_queries = 3;
  cfg.decoder_layers = 1;
  cfg.attn_heads = 2;
  cfg.stem_channels = 4;
  return cfg;
}

Eigen::ArrayXd pack(const ParamStore& ps) {
  Eigen::ArrayXd flat(ps.total_size());
  long off = 0;
  for (const auto& [name, t] : ps.entries()) {
    flat.segment(off, t.numel()) = t.data;
    off += t.numel();
  }
  return flat;
}

void unpack(ParamStore& ps, const Eigen::ArrayXd& flat) {
  long off = 0;
  for (auto& [name, t] : ps.entries()) {
    t.data = flat.segment(off, t.numel());
    off += t.numel();
  }
}

// weighted sum of every network output, as a differentiable scalar
Var output_functional(Tape& tape, const Model::GraphOut& g, const std::vector<Tensor>& weights) {
  Var acc = tape.sum_all(tape.mul(g.class_probs, tape.constant(weights[0])));
  acc = tape.add(acc, tape.sum_all(tape.mul(g.inst_masks, tape.constant(weights[1]))));
  for (size_t k = 0; k < g.part_masks.size(); ++k)
    acc = tape.add(acc, tape.sum_all(tape.mul(g.part_masks[k], tape.constant(weights[2 + k]))));
  return acc;
}

}  // namespace

TEST_CASE("parameter store ordering and lookup") {
  ParamStore ps;
  ps.add("b", {2, 3});
  ps.add("a", {4});
  CHECK(ps.total_size() == 10);
  CHECK(ps.has("a"));
  CHECK_FALSE(ps.has("c"));
  CHECK(ps.entries()[0].first == "b");
  CHECK_THROWS(ps.add("a", {1}));
  CHECK_THROWS(ps.at("missing"));

  ParamStore other;
  other.add("b", {2, 3});
  other.add("a", {4});
  CHECK(ps.shape_compatible(other));
  ParamStore shorter;
  shorter.add("b", {2, 3});
  CHECK_FALSE(ps.shape_compatible(shorter));
}

TEST_CASE("config validation") {
  NetConfig bad = small_config();
  bad.attn_heads = 5;
  CHECK_THROWS(Model(bad));
  bad = small_config();
  bad.embed_dim = 30;
  CHECK_THROWS(Model(bad));
  bad = small_config();
  bad.part_query_mode = "none";
  CHECK_THROWS(Model(bad));
  CHECK_NOTHROW(Model(small_config()));
}

TEST_CASE("init determinism and seed sensitivity") {
  Model model(small_config());
  ParamStore a = model.init_params(11);
  ParamStore b = model.init_params(11);
  ParamStore c = model.init_params(12);
  CHECK(a.shape_compatible(b));
  CHECK(a.shape_compatible(c));
  CHECK((pack(a) - pack(b)).abs().maxCoeff() == 0.0);
  CHECK((pack(a) - pack(c)).abs().maxCoeff() > 0.0);
  CHECK(a.total_size() > 0);
}

TEST_CASE("forward output contract at 64x64") {
  Model model(small_config());
  ParamStore ps = model.init_params(3);
  ImageF img = random_image(64, 64, 21);
  PredictionSet pred = model.forward(img, ps);

  const int ncls = model.config().num_classes_out();
  CHECK(pred.nq == 8);
  CHECK(pred.h == 64);
  CHECK(pred.w == 64);
  CHECK(pred.class_probs.shape == std::vector<int>{8, ncls});
  CHECK(pred.inst_masks.shape == std::vector<int>{8, 64 * 64});
  CHECK(pred.part_masks.size() == 3);
  for (const auto& m : pred.part_masks) CHECK(m.shape == std::vector<int>{8, 64 * 64});

  for (int q = 0; q < 8; ++q) {
    double sum = 0.0;
    for (int j = 0; j < ncls; ++j) {
      CHECK(pred.class_probs.at(q, j) >= 0.0);
      sum += pred.class_probs.at(q, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(pred.inst_masks.data.minCoeff() > 0.0);
  CHECK(pred.inst_masks.data.maxCoeff() < 1.0);
  for (const auto& m : pred.part_masks) {
    CHECK(m.data.minCoeff() > 0.0);
    CHECK(m.data.maxCoeff() < 1.0);
  }

  PredictionSet again = model.forward(img, ps);
  CHECK((pred.class_probs.data - again.class_probs.data).abs().maxCoeff() == 0.0);
  CHECK((pred.inst_masks.data - again.inst_masks.data).abs().maxCoeff() == 0.0);
}

TEST_CASE("image size validation") {
  Model model(small_config());
  ParamStore ps = model.init_params(3);
  CHECK_THROWS(model.forward(random_image(20, 24, 1), ps));
  CHECK_THROWS(model.forward(random_image(8, 8, 1), ps));
  CHECK_NOTHROW(model.forward(random_image(16, 24, 1), ps));
}

TEST_CASE("whole-network gradient matches finite differences") {
  Model model(tiny_config());
  ParamStore ps = model.init_params(5);
  ImageF img = random_image(16, 16, 9);

  Rng wrng(17);
  std::vector<Tensor> weights;
  weights.push_back(fdcheck::random_tensor({3, model.config().num_classes_out()}, wrng, 0.5));
  weights.push_back(fdcheck::random_tensor({3, 256}, wrng, 0.1));
  for (int k = 0; k < 3; ++k) weights.push_back(fdcheck::random_tensor({3, 256}, wrng, 0.1));

  Tape tape;
  Model::GraphOut g = model.forward_graph(tape, img, ps, true);
  Var root = output_functional(tape, g, weights);
  tape.backward(root);

  std::map<std::string, Var> by_name;
  for (auto& [name, leaf] : g.param_leaves) by_name[name] = leaf;
  Eigen::ArrayXd grad(ps.total_size());
  long off = 0;
  for (const auto& [name, t] : ps.entries()) {
    auto it = by_name.find(name);
    if (it != by_name.end() && it->second->grad.numel() > 0)
      grad.segment(off, t.numel()) = it->second->grad.data;
    else
      grad.segment(off, t.numel()).setZero();
    off += t.numel();
  }

  auto eval = [&](const Eigen::ArrayXd& flat) {
    ParamStore local = model.init_params(5);
    unpack(local, flat);
    Tape t2;
    Model::GraphOut g2 = model.forward_graph(t2, img, local, false);
    return output_functional(t2, g2, weights)->value.data[0];
  };
  Rng rng(31);
  double err = fdcheck::max_rel_error_flat(eval, pack(ps), grad, rng, 6, 1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("part query transform ordering against dense oracle") {
  Model model(small_config());
  ParamStore ps = model.init_params(7);
  const int nq = 5, c = model.config().embed_dim, np = model.config().num_parts();

  Rng rng(2);
  Tensor q = fdcheck::random_tensor({nq, c}, rng, 1.0);
  Tape tape;
  Var pq = model.part_query_transform(tape, tape.leaf(q, false), ps, false);
  CHECK(pq->value.shape == std::vector<int>{np * nq, c});

  // dense reference computation
  auto affine = [&](const Eigen::MatrixXd& x, const std::string& prefix) {
    Eigen::MatrixXd y = x * ps.at(prefix + ".w").mat();
    y.rowwise() += Eigen::RowVectorXd(
        Eigen::Map<const Eigen::VectorXd>(ps.at(prefix + ".b").data.data(), c));
    return y;
  };
  Eigen::MatrixXd t = affine(q.mat(), "part.trunk.l1").cwiseMax(0.0);
  t = affine(t, "part.trunk.l2").cwiseMax(0.0);
  for (int k = 0; k < np; ++k) {
    Eigen::MatrixXd ok = affine(t, "part.head" + std::to_string(k));
    for (int j = 0; j < nq; ++j)
      for (int d = 0; d < c; ++d)
        CHECK(pq->value.at(j * np + k, d) == doctest::Approx(ok(j, d)).epsilon(1e-12));
  }
}

TEST_CASE("zeroed part head produces zero part queries") {
  Model model(small_config());
  ParamStore ps = model.init_params(7);
  ps.at("part.head1.w").data.setZero();
  ps.at("part.head1.b").data.setZero();
  const int nq = 4, np = model.config().num_parts();

  Rng rng(3);
  Tape tape;
  Var q = tape.leaf(fdcheck::random_tensor({nq, model.config().embed_dim}, rng, 1.0), false);
  Var pq = model.part_query_transform(tape, q, ps, false);
  for (int j = 0; j < nq; ++j)
    for (int d = 0; d < model.config().embed_dim; ++d) {
      CHECK(pq->value.at(j * np + 1, d) == 0.0);
    }
  CHECK(pq->value.data.abs().maxCoeff() > 0.0);
}

TEST_CASE("generic part queries ignore the instrument queries") {
  NetConfig cfg = small_config();
  cfg.part_query_mode = "generic";
  Model model(cfg);
  ParamStore ps = model.init_params(7);
  CHECK(ps.has("part.generic"));
  CHECK_FALSE(ps.has("part.trunk.l1.w"));

  Rng rng(4);
  Tape tape;
  Var q1 = tape.leaf(fdcheck::random_tensor({cfg.num_queries, cfg.embed_dim}, rng, 1.0), false);
  Var q2 = tape.leaf(fdcheck::random_tensor({cfg.num_queries, cfg.embed_dim}, rng, 1.0), false);
  Var a = model.part_query_transform(tape, q1, ps, false);
  Var b = model.part_query_transform(tape, q2, ps, false);
  CHECK((a->value.data - b->value.data).abs().maxCoeff() == 0.0);
  CHECK((a->value.data - ps.at("part.generic").data).abs().maxCoeff() == 0.0);
}

TEST_CASE("part query transform gradient") {
  Model model(tiny_config());
  ParamStore ps = model.init_params(9);
  Rng rng(6);
  Tensor q0 = fdcheck::random_tensor({3, model.config().embed_dim}, rng, 1.0);
  auto fn = [&](Tape& t, std::vector<Var>& in) {
    Var pq = model.part_query_transform(t, in[0], ps, false);
    return t.sum_all(t.mul(pq, pq));
  };
  CHECK(fdcheck::max_rel_error(fn, {q0}, rng, 8) < 1e-4);
}

TEST_CASE("predict_masks matches the dot-product oracle") {
  Rng rng(8);
  Tensor q = fdcheck::random_tensor({4, 6}, rng, 1.0);
  Tensor f = fdcheck::random_tensor({6, 10}, rng, 1.0);
  Tape tape;
  Var m = predict_masks(tape, tape.leaf(q, false), tape.leaf(f, false));
  CHECK(m->value.shape == std::vector<int>{4, 10});
  for (int i = 0; i < 4; ++i)
    for (int p = 0; p < 10; ++p) {
      double dot = 0.0;
      for (int d = 0; d < 6; ++d) dot += q.at(i, d) * f.at(d, p);
      CHECK(m->value.at(i, p) == doctest::Approx(1.0 / (1.0 + std::exp(-dot))).epsilon(1e-12));
    }

  Var zero = tape.leaf(Tensor::zeros({2, 6}), false);
  Var m0 = predict_masks(tape, zero, tape.leaf(f, false));
  CHECK((m0->value.data - 0.5).abs().maxCoeff() == doctest::Approx(0.0));

  CHECK_THROWS(predict_masks(tape, tape.leaf(Tensor::zeros({2, 5}), false), tape.leaf(f, false)));
}

TEST_CASE("query permutation permutes predictions") {
  Model model(small_config());
  ParamStore ps = model.init_params(13);
  ImageF img = random_image(16, 16, 33);
  PredictionSet base = model.forward(img, ps);

  const int nq = model.config().num_queries;
  std::vector<int> perm(nq);
  for (int i = 0; i < nq; ++i) perm[i] = (i + 3) % nq;

  ParamStore permuted = model.init_params(13);
  for (const std::string& name : {std::string("query_feat"), std::string("query_pos")}) {
    Tensor src = ps.at(name);
    Tensor& dst = permuted.at(name);
    for (int i = 0; i < nq; ++i)
      for (int d = 0; d < model.config().embed_dim; ++d) dst.at(i, d) = src.at(perm[i], d);
  }
  PredictionSet moved = model.forward(img, permuted);

  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < model.config().num_classes_out(); ++j)
      CHECK(moved.class_probs.at(i, j) ==
            doctest::Approx(base.class_probs.at(perm[i], j)).epsilon(1e-9));
    for (int p = 0; p < 16 * 16; p += 7)
      CHECK(moved.inst_masks.at(i, p) ==
            doctest::Approx(base.inst_masks.at(perm[i], p)).epsilon(1e-9));
    for (int k = 0; k < 3; ++k)
      for (int p = 0; p < 16 * 16; p += 13)
        CHECK(moved.part_masks[k].at(i, p) ==
              doctest::Approx(base.part_masks[k].at(perm[i], p)).epsilon(1e-9));
  }
}

TEST_CASE("checkpoint round trip") {
  testhelpers::TempDir tmp("ckpt");
  NetConfig cfg = small_config();
  Model model(cfg);

  Checkpoint ckpt;
  ckpt.config = cfg;
  ckpt.params = model.init_params(42);
  SUBCASE("without optimizer state") {
    save_checkpoint(ckpt, tmp.path() + "/a");
    Checkpoint back = load_checkpoint(tmp.path() + "/a");
    CHECK(back.config.embed_dim == cfg.embed_dim);
    CHECK(back.config.part_query_mode == cfg.part_query_mode);
    CHECK(back.config.catalog == cfg.catalog);
    CHECK(back.params.shape_compatible(ckpt.params));
    CHECK((pack_params(back.params) - pack_params(ckpt.params)).abs().maxCoeff() == 0.0);
    CHECK_FALSE(back.optim.has_value());
  }
  SUBCASE("with optimizer state") {
    OptimState o;
    Rng rng(1);
    o.m = Eigen::ArrayXd(ckpt.params.total_size());
    o.v = Eigen::ArrayXd(ckpt.params.total_size());
    for (long i = 0; i < o.m.size(); ++i) {
      o.m[i] = rng.normal();
      o.v[i] = rng.uniform();
    }
    o.step = 137;
    ckpt.optim = o;
    save_checkpoint(ckpt, tmp.path() + "/b");
    Checkpoint back = load_checkpoint(tmp.path() + "/b");
    REQUIRE(back.optim.has_value());
    CHECK(back.optim->step == 137);
    CHECK((back.optim->m - o.m).abs().maxCoeff() == 0.0);
    CHECK((back.optim->v - o.v).abs().maxCoeff() == 0.0);
  }
  SUBCASE("corruption is detected") {
    save_checkpoint(ckpt, tmp.path() + "/c");
    std::filesystem::resize_file(tmp.path() + "/c/params.bin", 16);
    CHECK_THROWS(load_checkpoint(tmp.path() + "/c"));
    CHECK_THROWS(load_checkpoint(tmp.path() + "/does_not_exist"));
  }
}

TEST_CASE("pack and unpack are inverses") {
  Model model(small_config());
  ParamStore ps = model.init_params(8);
  Eigen::ArrayXd flat = pack_params(ps);
  ParamStore fresh = model.init_params(99);
  unpack_params(fresh, flat);
  CHECK((pack_params(fresh) - flat).abs().maxCoeff() == 0.0);
  Eigen::ArrayXd wrong(3);
  CHECK_THROWS(unpack_params(fresh, wrong));
}

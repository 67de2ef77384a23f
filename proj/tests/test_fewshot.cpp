#include <doctest.h>

#include <cmath>

#include "smelt/fewshot.hpp"
#include "smelt/rng.hpp"

using namespace smelt;

namespace {

Tensor rows_tensor(std::vector<std::vector<double>> rows) {
  int d = static_cast<int>(rows[0].size());
  Tensor t = Tensor::zeros({static_cast<int>(rows.size()), d});
  for (size_t i = 0; i < rows.size(); ++i)
    for (int j = 0; j < d; ++j) t.at(static_cast<int>(i), j) = rows[i][static_cast<size_t>(j)];
  return t;
}

// Logits straight from embedding matrices.
Tensor proto_logits(std::vector<std::vector<double>> support_emb, std::vector<int> sy,
                    std::vector<std::vector<double>> query_emb, int n_way,
                    Metric metric = Metric::kSqEuclid) {
  Tape t;
  Var se = t.constant(rows_tensor(std::move(support_emb)));
  Var qe = t.constant(rows_tensor(std::move(query_emb)));
  return t.val(protonet_logits_from_embeddings(t, se, sy, n_way, qe, metric));
}

std::vector<double> softmax_row(const Tensor& logits, int row) {
  double m = logits.at(row, 0);
  for (int j = 1; j < logits.cols(); ++j) m = std::max(m, logits.at(row, j));
  double s = 0;
  std::vector<double> p(static_cast<size_t>(logits.cols()));
  for (int j = 0; j < logits.cols(); ++j) {
    p[static_cast<size_t>(j)] = std::exp(logits.at(row, j) - m);
    s += p[static_cast<size_t>(j)];
  }
  for (auto& v : p) v /= s;
  return p;
}

}  // namespace

TEST_CASE("protonet 1-shot probabilities at squared distances {0,1}") {
  Tensor logits = proto_logits({{0, 0}, {1, 0}}, {0, 1}, {{0, 0}}, 2);
  auto p = softmax_row(logits, 0);
  CHECK(p[0] == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(p[1] == doctest::Approx(0.2689).epsilon(1e-4));
}

TEST_CASE("protonet hand-computed query probability") {
  // d^2 = {0.0625, 0.5625}; p(class 0) = sigmoid(0.5)
  Tensor logits = proto_logits({{0, 0}, {1, 0}}, {0, 1}, {{0.25, 0}}, 2);
  auto p = softmax_row(logits, 0);
  CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-0.5))).epsilon(1e-12));
}

TEST_CASE("identical centroids give uniform probabilities") {
  Tensor logits = proto_logits({{0.5, 0.5}, {0.5, 0.5}}, {0, 1}, {{3, -1}}, 2);
  auto p = softmax_row(logits, 0);
  CHECK(p[0] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("protonet probabilities sum to one and net path agrees") {
  RngStream rng(5);
  NetConfig cfg{.input_dim = 4, .width = 6, .depth = 1, .embed_dim = 5};
  ParamSet net = init_backbone(cfg, RngStream(77));
  for (int rep = 0; rep < 10; ++rep) {
    Episode ep;
    ep.n_way = 2;
    ep.support_x = Tensor::zeros({6, 4});
    for (auto& v : ep.support_x.data()) v = rng.normal();
    ep.support_y = {0, 0, 0, 1, 1, 1};
    ep.query_x = Tensor::zeros({4, 4});
    for (auto& v : ep.query_x.data()) v = rng.normal();
    ep.query_y = {0, 0, 1, 1};
    ep.domain = "toy";
    for (auto metric : {Metric::kSqEuclid, Metric::kCosine}) {
      Tensor logits = protonet_logits(net, cfg, ep, metric);
      for (int r = 0; r < logits.rows(); ++r) {
        auto p = softmax_row(logits, r);
        double s = p[0] + p[1];
        CHECK(std::fabs(s - 1.0) < 1e-12);
      }
    }
  }
}

TEST_CASE("rigid translation of embeddings leaves sqeuclid CE unchanged") {
  RngStream rng(6);
  std::vector<std::vector<double>> sup, qry;
  std::vector<int> sy, qy;
  for (int k = 0; k < 2; ++k)
    for (int s = 0; s < 2; ++s) {
      sup.push_back({rng.normal(), rng.normal(), rng.normal()});
      sy.push_back(k);
    }
  for (int q = 0; q < 5; ++q) {
    qry.push_back({rng.normal(), rng.normal(), rng.normal()});
    qy.push_back(q % 2);
  }
  double ce0 = ce_value(proto_logits(sup, sy, qry, 2), qy);
  for (auto& r : sup)
    for (auto& v : r) v += 7.25;
  for (auto& r : qry)
    for (auto& v : r) v += 7.25;
  double ce1 = ce_value(proto_logits(sup, sy, qry, 2), qy);
  CHECK(std::fabs(ce0 - ce1) < 1e-9);
}

TEST_CASE("uniform logits cross-entropy is ln n_way") {
  Tensor logits = Tensor::full({3, 4}, 0.7);
  CHECK(ce_value(logits, {0, 1, 3}) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("confident correct logit drives loss to zero") {
  Tensor logits = Tensor::zeros({1, 3});
  logits.at(0, 1) = 1000.0;
  CHECK(ce_value(logits, {1}) < 1e-10);
}

TEST_CASE("cross-entropy matches independent recomputation") {
  RngStream rng(7);
  Tensor logits = Tensor::zeros({4, 5});
  for (auto& v : logits.data()) v = rng.uniform(-3, 3);
  std::vector<int> labels{2, 0, 4, 1};
  double expect = 0;
  for (int i = 0; i < 4; ++i) {
    double m = logits.at(i, 0);
    for (int j = 1; j < 5; ++j) m = std::max(m, logits.at(i, j));
    double lse = 0;
    for (int j = 0; j < 5; ++j) lse += std::exp(logits.at(i, j) - m);
    expect += -(logits.at(i, labels[static_cast<size_t>(i)]) - m - std::log(lse));
  }
  expect /= 4;
  CHECK(ce_value(logits, labels) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("ce requires labels") {
  Tape t;
  Var logits = t.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS((void)ce_loss_t(t, logits, {}), ConfigError);
}

TEST_CASE("kd loss of identical logits is zero") {
  RngStream rng(8);
  Tensor logits = Tensor::zeros({3, 4});
  for (auto& v : logits.data()) v = rng.uniform(-2, 2);
  CHECK(kd_value(logits, logits, 2.0) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("kd gradient never reaches the teacher") {
  RngStream rng(9);
  Tape t;
  Tensor sv = Tensor::zeros({2, 3}), tv = Tensor::zeros({2, 3});
  for (auto& v : sv.data()) v = rng.uniform(-1, 1);
  for (auto& v : tv.data()) v = rng.uniform(-1, 1);
  Var student = t.leaf(sv);
  Var teacher_leaf = t.leaf(tv);  // on the tape, but kd consumes values only
  Var loss = kd_loss_t(t, student, t.val(teacher_leaf), 2.0);
  std::vector<Var> wrt{teacher_leaf, student};
  auto g = t.grad(loss, wrt);
  for (double v : g[0].data()) CHECK(v == 0.0);
  double snorm = 0;
  for (double v : g[1].data()) snorm += v * v;
  CHECK(snorm > 0.0);
}

TEST_CASE("kd matches independent KL computation at temp 2") {
  RngStream rng(10);
  Tensor s = Tensor::zeros({3, 5}), te = Tensor::zeros({3, 5});
  for (auto& v : s.data()) v = rng.uniform(-2, 2);
  for (auto& v : te.data()) v = rng.uniform(-2, 2);
  const double temp = 2.0;
  double expect = 0;
  for (int i = 0; i < 3; ++i) {
    auto soft = [&](const Tensor& x, int j) {
      double m = x.at(i, 0) / temp;
      for (int c = 1; c < 5; ++c) m = std::max(m, x.at(i, c) / temp);
      double lse = 0;
      for (int c = 0; c < 5; ++c) lse += std::exp(x.at(i, c) / temp - m);
      return x.at(i, j) / temp - m - std::log(lse);
    };
    for (int j = 0; j < 5; ++j) {
      double lp = soft(te, j), lq = soft(s, j);
      expect += std::exp(lp) * (lp - lq);
    }
  }
  expect = expect / 3 * temp * temp;
  CHECK(kd_value(s, te, temp) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("kd loss is nonnegative, zero iff softened distributions match") {
  RngStream rng(11);
  for (int rep = 0; rep < 30; ++rep) {
    Tensor s = Tensor::zeros({2, 4}), te = Tensor::zeros({2, 4});
    for (auto& v : s.data()) v = rng.uniform(-3, 3);
    for (auto& v : te.data()) v = rng.uniform(-3, 3);
    double kd = kd_value(s, te, 1.5);
    CHECK(kd >= -1e-15);
  }
  // shifting logits by a constant leaves the softened distribution unchanged
  Tensor s = Tensor::full({1, 3}, 0.2);
  Tensor te = Tensor::full({1, 3}, 5.2);
  CHECK(kd_value(s, te, 1.5) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("episode meta loss composition") {
  RngStream rng(12);
  Tensor s = Tensor::zeros({3, 4}), te = Tensor::zeros({3, 4});
  for (auto& v : s.data()) v = rng.uniform(-2, 2);
  for (auto& v : te.data()) v = rng.uniform(-2, 2);
  std::vector<int> labels{1, 3, 0};

  auto meta = [&](double beta) {
    Tape t;
    Var sl = t.leaf(s);
    return t.val(episode_meta_loss_t(t, sl, te, labels, beta, 2.0)).scalar_value();
  };
  CHECK(meta(1.0) == doctest::Approx(ce_value(s, labels)).epsilon(1e-12));
  CHECK(meta(0.5) ==
        doctest::Approx(0.5 * ce_value(s, labels) + 0.5 * kd_value(s, te, 2.0)).epsilon(1e-12));
  // beta 0 with teacher == student
  Tape t;
  Var sl = t.leaf(s);
  CHECK(t.val(episode_meta_loss_t(t, sl, s, labels, 0.0, 2.0)).scalar_value() ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("accuracy counts argmax hits") {
  Tensor logits = Tensor::matrix(2, 3, {0.1, 0.9, 0.0, 0.8, 0.1, 0.1});
  CHECK(accuracy(logits, {1, 0}) == 1.0);
  CHECK(accuracy(logits, {0, 0}) == 0.5);
}

#include "smelt/fewshot.hpp"

#include <algorithm>
#include <cmath>

namespace smelt {

void Episode::validate() const {
  if (n_way < 2) throw ConfigError("episode: n_way must be >= 2");
  if (support_x.rows() != static_cast<int>(support_y.size()))
    throw ShapeError("episode: support size mismatch");
  if (!query_y.empty() && query_x.rows() != static_cast<int>(query_y.size()))
    throw ShapeError("episode: query size mismatch");
  std::vector<int> counts(static_cast<size_t>(n_way), 0);
  for (int y : support_y) {
    if (y < 0 || y >= n_way) throw ConfigError("episode: support label out of range");
    ++counts[static_cast<size_t>(y)];
  }
  for (int c : counts)
    if (c == 0) throw ConfigError("episode: a class has no support examples");
  for (int y : query_y)
    if (y < 0 || y >= n_way) throw ConfigError("episode: query label out of range");
}

Metric metric_from_name(const std::string& s) {
  if (s == "sqeuclid") return Metric::kSqEuclid;
  if (s == "cosine") return Metric::kCosine;
  throw ConfigError("unknown metric: " + s);
}

const char* metric_name(Metric m) { return m == Metric::kSqEuclid ? "sqeuclid" : "cosine"; }

Var class_centroids(Tape& tape, Var embeddings, const std::vector<int>& labels, int n_way) {
  int n = tape.val(embeddings).rows();
  if (n != static_cast<int>(labels.size())) throw ShapeError("class_centroids: label count mismatch");
  std::vector<int> counts(static_cast<size_t>(n_way), 0);
  for (int y : labels) {
    if (y < 0 || y >= n_way) throw ConfigError("class_centroids: label out of range");
    ++counts[static_cast<size_t>(y)];
  }
  for (int k = 0; k < n_way; ++k)
    if (counts[static_cast<size_t>(k)] == 0) throw ConfigError("class_centroids: empty class");
  Tensor avg = Tensor::zeros({n_way, n});
  for (int j = 0; j < n; ++j) avg.at(labels[static_cast<size_t>(j)], j) = 1.0 / counts[static_cast<size_t>(labels[static_cast<size_t>(j)])];
  return tape.matmul(tape.constant(std::move(avg)), embeddings);
}

namespace {

// -distance logits between row embeddings and centroids.
Var metric_logits(Tape& tape, Var queries, Var centroids, Metric metric) {
  if (metric == Metric::kSqEuclid) {
    Var cross = tape.scale(tape.matmul(queries, tape.transpose(centroids)), -2.0);
    Var qsq = tape.sum_rows(tape.mul(queries, queries));           // [Nq x 1]
    Var csq = tape.transpose(tape.sum_rows(tape.mul(centroids, centroids)));  // [1 x K]
    Var dist = tape.add(tape.add(cross, qsq), csq);
    return tape.scale(dist, -1.0);
  }
  // cosine: logits = cos - 1
  auto normalize = [&](Var x) {
    Var nrm = tape.sqrt(tape.add(tape.sum_rows(tape.mul(x, x)), tape.constant_scalar(1e-12)));
    return tape.div(x, nrm);
  };
  Var cosine = tape.matmul(normalize(queries), tape.transpose(normalize(centroids)));
  return tape.sub(cosine, tape.constant_scalar(1.0));
}

}  // namespace

Var protonet_logits_from_embeddings(Tape& tape, Var support_emb, const std::vector<int>& support_y,
                                    int n_way, Var query_emb, Metric metric) {
  Var centroids = class_centroids(tape, support_emb, support_y, n_way);
  return metric_logits(tape, query_emb, centroids, metric);
}

Var protonet_logits_t(Tape& tape, const TapedParams& net, const NetConfig& cfg,
                      const Episode& episode, Metric metric) {
  episode.validate();
  Var es = backbone_embed(tape, net, cfg, tape.constant(episode.support_x));
  Var eq = backbone_embed(tape, net, cfg, tape.constant(episode.query_x));
  return protonet_logits_from_embeddings(tape, es, episode.support_y, episode.n_way, eq, metric);
}

Tensor protonet_logits(const ParamSet& net, const NetConfig& cfg, const Episode& episode,
                       Metric metric) {
  Tape tape;
  TapedParams tp = lift(tape, net, false);
  return tape.val(protonet_logits_t(tape, tp, cfg, episode, metric));
}

Var protonet_support_logits_t(Tape& tape, const TapedParams& net, const NetConfig& cfg,
                              const Episode& episode, Metric metric) {
  episode.validate();
  Var es = backbone_embed(tape, net, cfg, tape.constant(episode.support_x));
  Var centroids = class_centroids(tape, es, episode.support_y, episode.n_way);
  return metric_logits(tape, es, centroids, metric);
}

Var ce_loss_t(Tape& tape, Var logits, const std::vector<int>& labels) {
  const Tensor& lv = tape.val(logits);
  int n = lv.rows(), c = lv.cols();
  if (labels.empty()) throw ConfigError("ce_loss: labels missing");
  if (n != static_cast<int>(labels.size())) throw ShapeError("ce_loss: label count mismatch");
  Tensor onehot = Tensor::zeros({n, c});
  for (int i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
      throw ConfigError("ce_loss: label out of range");
    onehot.at(i, labels[static_cast<size_t>(i)]) = 1.0;
  }
  Var ls = tape.log_softmax(logits);
  return tape.scale(tape.sum(tape.mul(ls, tape.constant(std::move(onehot)))),
                    -1.0 / static_cast<double>(n));
}

double ce_value(const Tensor& logits, const std::vector<int>& labels) {
  Tape tape;
  Var l = tape.leaf(logits);
  return tape.val(ce_loss_t(tape, l, labels)).scalar_value();
}

Var kd_loss_t(Tape& tape, Var student, const Tensor& teacher, double temp) {
  if (temp <= 0.0) throw ConfigError("kd_loss: temperature must be positive");
  const Tensor& sv = tape.val(student);
  if (sv.rows() != teacher.rows() || sv.cols() != teacher.cols())
    throw ShapeError("kd_loss: student/teacher shape mismatch");
  int n = teacher.rows(), c = teacher.cols();

  // softened teacher distribution and its (constant) negative entropy
  Tensor p = Tensor::zeros({n, c});
  double plogp = 0.0;
  for (int i = 0; i < n; ++i) {
    double m = -1e300;
    for (int j = 0; j < c; ++j) m = std::max(m, teacher.at(i, j) / temp);
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += std::exp(teacher.at(i, j) / temp - m);
    double lse = m + std::log(s);
    for (int j = 0; j < c; ++j) {
      double lp = teacher.at(i, j) / temp - lse;
      double pj = std::exp(lp);
      p.at(i, j) = pj;
      plogp += pj * lp;
    }
  }
  plogp /= static_cast<double>(n);

  Var qlog = tape.log_softmax(tape.scale(student, 1.0 / temp));
  Var cross = tape.scale(tape.sum(tape.mul(qlog, tape.constant(std::move(p)))),
                         -1.0 / static_cast<double>(n));
  Var kl = tape.add(cross, tape.constant_scalar(plogp));
  return tape.scale(kl, temp * temp);
}

double kd_value(const Tensor& student, const Tensor& teacher, double temp) {
  Tape tape;
  Var s = tape.leaf(student);
  return tape.val(kd_loss_t(tape, s, teacher, temp)).scalar_value();
}

Var episode_meta_loss_t(Tape& tape, Var student_logits, const Tensor& teacher_logits,
                        const std::vector<int>& labels, double beta_w, double temp) {
  if (beta_w < 0.0 || beta_w > 1.0) throw ConfigError("episode_meta_loss: beta_w must be in [0,1]");
  Var ce = ce_loss_t(tape, student_logits, labels);
  if (beta_w == 1.0) return ce;
  Var kd = kd_loss_t(tape, student_logits, teacher_logits, temp);
  if (beta_w == 0.0) return kd;
  return tape.add(tape.scale(ce, beta_w), tape.scale(kd, 1.0 - beta_w));
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  int n = logits.rows(), c = logits.cols();
  if (n != static_cast<int>(labels.size())) throw ShapeError("accuracy: label count mismatch");
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    int best = 0;
    for (int j = 1; j < c; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    if (best == labels[static_cast<size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

}  // namespace smelt

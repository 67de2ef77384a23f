#pragma once

#include <string>
#include <vector>

#include "smelt/net.hpp"
#include "smelt/params.hpp"

namespace smelt {

// One few-shot task. Query labels may be absent (meta-test time).
struct Episode {
  Tensor support_x;  // [Ns x input_dim]
  std::vector<int> support_y;
  Tensor query_x;  // [Nq x input_dim]
  std::vector<int> query_y;  // empty when unlabeled
  int n_way = 0;
  std::string domain;
  bool is_ood = false;

  void validate() const;
  bool query_labeled() const { return !query_y.empty(); }
};

enum class Metric { kSqEuclid, kCosine };
Metric metric_from_name(const std::string& s);
const char* metric_name(Metric m);

// Class centroids [n_way x E] from embeddings, ordered by class id.
Var class_centroids(Tape& tape, Var embeddings, const std::vector<int>& labels, int n_way);

// Nearest-centroid logits from explicit embedding matrices: -d(e_q, c_k).
Var protonet_logits_from_embeddings(Tape& tape, Var support_emb, const std::vector<int>& support_y,
                                    int n_way, Var query_emb, Metric metric);

// Nearest-centroid logits for the query set: -d(f(x), c_k).
Var protonet_logits_t(Tape& tape, const TapedParams& net, const NetConfig& cfg,
                      const Episode& episode, Metric metric);
Tensor protonet_logits(const ParamSet& net, const NetConfig& cfg, const Episode& episode,
                       Metric metric);

// Logits for the support set itself against centroids from the full support.
Var protonet_support_logits_t(Tape& tape, const TapedParams& net, const NetConfig& cfg,
                              const Episode& episode, Metric metric);

Var ce_loss_t(Tape& tape, Var logits, const std::vector<int>& labels);
double ce_value(const Tensor& logits, const std::vector<int>& labels);

// temp^2 * mean KL(softmax(teacher/temp) || softmax(student/temp)); the
// teacher is a detached constant, so gradients reach the student only.
Var kd_loss_t(Tape& tape, Var student, const Tensor& teacher, double temp);
double kd_value(const Tensor& student, const Tensor& teacher, double temp);

// beta_w * CE + (1 - beta_w) * KD on the query set.
Var episode_meta_loss_t(Tape& tape, Var student_logits, const Tensor& teacher_logits,
                        const std::vector<int>& labels, double beta_w, double temp);

double accuracy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace smelt

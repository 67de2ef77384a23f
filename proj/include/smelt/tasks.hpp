#pragma once

#include <functional>
#include <string>
#include <vector>

#include "smelt/fewshot.hpp"
#include "smelt/net.hpp"
#include "smelt/optim.hpp"
#include "smelt/rng.hpp"

namespace smelt {

enum class GeneratorKind { kGaussianClusters, kRingClusters, kWarpedClusters };
GeneratorKind generator_from_name(const std::string& s);
const char* generator_name(GeneratorKind k);

enum class InputWarp { kNone, kTanh, kSin };
InputWarp warp_from_name(const std::string& s);
const char* warp_name(InputWarp w);

// A task domain: a cluster generator followed by a fixed invertible affine
// map and an optional pointwise nonlinearity. ID/OOD shift is realized as
// held-out transforms.
struct DomainSpec {
  std::string name;
  GeneratorKind kind = GeneratorKind::kGaussianClusters;
  uint64_t transform_seed = 0;  // derives the rotation and bias
  double scale_min = 0.7;       // diagonal scale range of the affine part
  double scale_max = 1.4;
  InputWarp warp = InputWarp::kNone;
  double noise_scale = 0.3;     // within-class spread in the signal subspace
  double nuisance_mult = 4.0;   // noise multiplier outside the signal subspace
  double center_scale = 1.0;
  int input_dim = 16;
  int signal_dims = 6;  // class centers live in this leading subspace
  int class_pool_size = 32;

  void validate() const;
};

// Materialized affine part (A nonsingular by construction) and bias.
struct DomainTransform {
  Tensor a;  // [d x d]
  Tensor bias;
};
DomainTransform domain_transform(const DomainSpec& spec);

// Frobenius distance between affine parts plus a fixed penalty for differing
// nonlinearities; used for the ID/OOD separation assertion.
double transform_distance(const DomainSpec& a, const DomainSpec& b);

enum class Split { kTrain, kVal, kTest };
const char* split_name(Split s);
Split split_from_name(const std::string& s);

struct SuiteSpec {
  std::string name;
  std::vector<DomainSpec> id_domains;
  std::vector<DomainSpec> ood_domains;
  int n_way_min = 5, n_way_max = 5;
  int k_shot_min = 5, k_shot_max = 5;
  int q_query = 5;
  uint64_t seed = 0;
  std::string version = "1";
  double min_transform_distance = 1.0;

  void validate() const;
};

// Deterministic in (suite seed, split, which, index).
Episode sample_episode(const SuiteSpec& spec, Split split, bool ood, uint64_t index);

struct PretrainConfig {
  int steps = 1500;
  int batch = 64;
  double lr = 3e-3;
  uint64_t seed = 0;
};

// Supervised pre-training on pooled ID-domain data (train-split classes) with
// a throwaway classification head; returns the body as theta_pre.
ParamSet pretrain_backbone(const SuiteSpec& spec, const NetConfig& net_cfg,
                           const PretrainConfig& cfg);

// Named suite catalog; ships "md-mini" (4 ID + 3 OOD domains).
std::vector<SuiteSpec> suite_catalog(const std::string& version = "1");
SuiteSpec find_suite(const std::string& name, const std::string& version = "1");

std::string episode_json(const Episode& e);

}  // namespace smelt

#include "smelt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace smelt {

GeneratorKind generator_from_name(const std::string& s) {
  if (s == "gaussian-clusters") return GeneratorKind::kGaussianClusters;
  if (s == "ring-clusters") return GeneratorKind::kRingClusters;
  if (s == "warped-clusters") return GeneratorKind::kWarpedClusters;
  throw ConfigError("unknown generator kind: " + s);
}

const char* generator_name(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::kGaussianClusters: return "gaussian-clusters";
    case GeneratorKind::kRingClusters: return "ring-clusters";
    case GeneratorKind::kWarpedClusters: return "warped-clusters";
  }
  return "?";
}

InputWarp warp_from_name(const std::string& s) {
  if (s == "none") return InputWarp::kNone;
  if (s == "tanh") return InputWarp::kTanh;
  if (s == "sin") return InputWarp::kSin;
  throw ConfigError("unknown warp: " + s);
}

const char* warp_name(InputWarp w) {
  switch (w) {
    case InputWarp::kNone: return "none";
    case InputWarp::kTanh: return "tanh";
    case InputWarp::kSin: return "sin";
  }
  return "?";
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

Split split_from_name(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ConfigError("unknown split: " + s);
}

void DomainSpec::validate() const {
  if (name.empty()) throw ConfigError("domain: empty name");
  if (noise_scale <= 0.0) throw ConfigError("domain " + name + ": noise_scale must be positive");
  if (input_dim <= 0 || class_pool_size <= 0) throw ConfigError("domain " + name + ": bad dims");
  if (signal_dims < 2 || signal_dims > input_dim)
    throw ConfigError("domain " + name + ": signal_dims must be in [2, input_dim]");
  if (nuisance_mult <= 0.0) throw ConfigError("domain " + name + ": nuisance_mult must be positive");
  if (!(scale_min > 0.0 && scale_max >= scale_min))
    throw ConfigError("domain " + name + ": bad scale range");
}

DomainTransform domain_transform(const DomainSpec& spec) {
  spec.validate();
  int d = spec.input_dim;
  RngStream rng = RngStream(spec.transform_seed).child("transform");
  // Random rotation via Gram-Schmidt on a Gaussian matrix, then positive
  // diagonal scales: A = Q * diag(s) is nonsingular by construction.
  std::vector<std::vector<double>> q(static_cast<size_t>(d), std::vector<double>(static_cast<size_t>(d)));
  for (auto& row : q)
    for (auto& v : row) v = rng.normal();
  for (int i = 0; i < d; ++i) {
    for (int j = 0; j < i; ++j) {
      double dp = 0;
      for (int k = 0; k < d; ++k) dp += q[static_cast<size_t>(i)][static_cast<size_t>(k)] * q[static_cast<size_t>(j)][static_cast<size_t>(k)];
      for (int k = 0; k < d; ++k) q[static_cast<size_t>(i)][static_cast<size_t>(k)] -= dp * q[static_cast<size_t>(j)][static_cast<size_t>(k)];
    }
    double nrm = 0;
    for (int k = 0; k < d; ++k) nrm += q[static_cast<size_t>(i)][static_cast<size_t>(k)] * q[static_cast<size_t>(i)][static_cast<size_t>(k)];
    nrm = std::sqrt(nrm);
    if (nrm < 1e-9) throw NumericError("domain transform: degenerate rotation draw");
    for (int k = 0; k < d; ++k) q[static_cast<size_t>(i)][static_cast<size_t>(k)] /= nrm;
  }
  Tensor a = Tensor::zeros({d, d});
  for (int j = 0; j < d; ++j) {
    double s = rng.uniform(spec.scale_min, spec.scale_max);
    for (int i = 0; i < d; ++i) a.at(i, j) = q[static_cast<size_t>(i)][static_cast<size_t>(j)] * s;
  }
  Tensor bias = Tensor::zeros({d});
  for (auto& v : bias.data()) v = 0.3 * rng.normal();
  return DomainTransform{std::move(a), std::move(bias)};
}

double transform_distance(const DomainSpec& a, const DomainSpec& b) {
  DomainTransform ta = domain_transform(a), tb = domain_transform(b);
  double s = 0;
  for (int64_t i = 0; i < ta.a.numel(); ++i) {
    double d = ta.a[i] - tb.a[i];
    s += d * d;
  }
  double dist = std::sqrt(s);
  if (a.warp != b.warp) dist += 10.0;
  if (a.kind != b.kind) dist += 10.0;
  return dist;
}

void SuiteSpec::validate() const {
  if (id_domains.empty()) throw ConfigError("suite: no ID domains");
  if (!(n_way_min >= 2 && n_way_max >= n_way_min)) throw ConfigError("suite: bad n_way range");
  if (!(k_shot_min >= 1 && k_shot_max >= k_shot_min)) throw ConfigError("suite: bad k_shot range");
  if (q_query < 1) throw ConfigError("suite: q_query must be >= 1");
  for (const auto& d : id_domains) d.validate();
  for (const auto& d : ood_domains) d.validate();
  for (const auto& od : ood_domains) {
    for (const auto& id : id_domains) {
      if (od.name == id.name) throw ConfigError("suite: OOD domain name collides with ID: " + od.name);
      double dist = transform_distance(od, id);
      if (dist < min_transform_distance)
        throw ConfigError("suite: OOD domain " + od.name + " too close to ID domain " + id.name +
                          " (distance " + std::to_string(dist) + ")");
    }
  }
}

namespace {

// Class centers for one domain; stable across splits and episodes.
std::vector<Tensor> class_centers(const SuiteSpec& suite, const DomainSpec& dom) {
  RngStream rng = RngStream(suite.seed).child("centers").child(dom.name);
  std::vector<Tensor> centers;
  centers.reserve(static_cast<size_t>(dom.class_pool_size));
  for (int k = 0; k < dom.class_pool_size; ++k) {
    Tensor c = Tensor::zeros({dom.input_dim});
    if (dom.kind == GeneratorKind::kRingClusters) {
      double phase = rng.uniform(0.0, 6.283185307179586);
      double theta = 6.283185307179586 * k / dom.class_pool_size + phase;
      c[0] = dom.center_scale * 1.6 * std::cos(theta);
      c[1] = dom.center_scale * 1.6 * std::sin(theta);
      for (int j = 2; j < dom.signal_dims; ++j) c[j] = 0.5 * dom.center_scale * rng.normal();
    } else {
      for (int j = 0; j < dom.signal_dims; ++j) c[j] = dom.center_scale * rng.normal();
    }
    centers.push_back(std::move(c));
  }
  return centers;
}

// Split-disjoint class index ranges within the pool; OOD domains (never seen
// in training) expose the whole pool.
std::pair<int, int> class_range(const DomainSpec& dom, Split split, bool ood) {
  if (ood) return {0, dom.class_pool_size};
  int train_hi = dom.class_pool_size * 6 / 10;
  int val_hi = dom.class_pool_size * 8 / 10;
  switch (split) {
    case Split::kTrain: return {0, train_hi};
    case Split::kVal: return {train_hi, val_hi};
    case Split::kTest: return {val_hi, dom.class_pool_size};
  }
  return {0, dom.class_pool_size};
}

Tensor sample_point(const DomainSpec& dom, const Tensor& center, const DomainTransform& tf,
                    RngStream& rng) {
  int d = dom.input_dim;
  Tensor x = center;
  for (int j = 0; j < d; ++j) {
    double sigma = j < dom.signal_dims ? dom.noise_scale : dom.noise_scale * dom.nuisance_mult;
    x[j] += sigma * rng.normal();
  }
  if (dom.kind == GeneratorKind::kWarpedClusters)
    for (auto& v : x.data()) v += 0.3 * std::sin(2.0 * v);
  // optional pointwise nonlinearity, then the affine mix
  switch (dom.warp) {
    case InputWarp::kNone: break;
    case InputWarp::kTanh:
      for (auto& v : x.data()) v = 2.0 * std::tanh(0.8 * v);
      break;
    case InputWarp::kSin:
      for (auto& v : x.data()) v = 2.0 * std::sin(0.9 * v);
      break;
  }
  Tensor y = Tensor::zeros({d});
  for (int i = 0; i < d; ++i) {
    double s = tf.bias[i];
    for (int j = 0; j < d; ++j) s += tf.a.at(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

}  // namespace

Episode sample_episode(const SuiteSpec& spec, Split split, bool ood, uint64_t index) {
  if (ood && split == Split::kTrain) throw ConfigError("sample_episode: no OOD training episodes");
  const auto& domains = ood ? spec.ood_domains : spec.id_domains;
  if (domains.empty()) throw ConfigError("sample_episode: domain list empty");

  RngStream rng = RngStream(spec.seed)
                      .child("episode")
                      .child(split_name(split))
                      .child(ood ? "ood" : "id")
                      .child(index);
  const DomainSpec& dom = domains[rng.next_below(domains.size())];
  DomainTransform tf = domain_transform(dom);
  auto centers = class_centers(spec, dom);
  auto [lo, hi] = class_range(dom, split, ood);

  int n_way = spec.n_way_min + static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.n_way_max - spec.n_way_min + 1)));
  int k_shot = spec.k_shot_min + static_cast<int>(rng.next_below(static_cast<uint64_t>(spec.k_shot_max - spec.k_shot_min + 1)));
  if (hi - lo < n_way)
    throw ConfigError("sample_episode: class pool slice smaller than n_way in domain " + dom.name);

  // draw n_way distinct classes from [lo, hi)
  std::vector<int> ids(static_cast<size_t>(hi - lo));
  std::iota(ids.begin(), ids.end(), lo);
  for (size_t i = 0; i < ids.size(); ++i) {
    size_t j = i + static_cast<size_t>(rng.next_below(ids.size() - i));
    std::swap(ids[i], ids[j]);
  }
  ids.resize(static_cast<size_t>(n_way));

  int ns = n_way * k_shot, nq = n_way * spec.q_query, d = dom.input_dim;
  Episode ep;
  ep.support_x = Tensor::zeros({ns, d});
  ep.query_x = Tensor::zeros({nq, d});
  ep.n_way = n_way;
  ep.domain = dom.name;
  ep.is_ood = ood;
  int srow = 0, qrow = 0;
  for (int k = 0; k < n_way; ++k) {
    const Tensor& center = centers[static_cast<size_t>(ids[static_cast<size_t>(k)])];
    for (int s = 0; s < k_shot; ++s) {
      Tensor x = sample_point(dom, center, tf, rng);
      for (int j = 0; j < d; ++j) ep.support_x.at(srow, j) = x[j];
      ep.support_y.push_back(k);
      ++srow;
    }
    for (int q = 0; q < spec.q_query; ++q) {
      Tensor x = sample_point(dom, center, tf, rng);
      for (int j = 0; j < d; ++j) ep.query_x.at(qrow, j) = x[j];
      ep.query_y.push_back(k);
      ++qrow;
    }
  }
  ep.validate();
  return ep;
}

ParamSet pretrain_backbone(const SuiteSpec& spec, const NetConfig& net_cfg,
                           const PretrainConfig& cfg) {
  spec.validate();
  ParamSet body = init_backbone(net_cfg, RngStream(cfg.seed).child("init"));
  if (cfg.steps == 0) return body;

  // global label space: (domain, train-split class)
  struct ClassRef {
    const DomainSpec* dom;
    int class_id;
  };
  std::vector<ClassRef> classes;
  for (const auto& dom : spec.id_domains) {
    auto [lo, hi] = class_range(dom, Split::kTrain, false);
    for (int k = lo; k < hi; ++k) classes.push_back({&dom, k});
  }
  int n_classes = static_cast<int>(classes.size());

  auto head_specs = make_specs({
      {"head.weight", LayerKind::kLinearWeight, {net_cfg.embed_dim, n_classes}, 0},
      {"head.bias", LayerKind::kLinearBias, {n_classes}, 0},
  });
  RngStream hrng = RngStream(cfg.seed).child("head");
  Tensor hw = Tensor::zeros({net_cfg.embed_dim, n_classes});
  for (auto& v : hw.data()) v = hrng.normal() / std::sqrt(static_cast<double>(net_cfg.embed_dim));
  ParamSet head(head_specs, {std::move(hw), Tensor::zeros({n_classes})});

  Adam opt_body(body.specs());
  Adam opt_head(head.specs());

  std::vector<std::vector<Tensor>> center_cache;
  std::vector<DomainTransform> tf_cache;
  for (const auto& dom : spec.id_domains) {
    center_cache.push_back(class_centers(spec, dom));
    tf_cache.push_back(domain_transform(dom));
  }

  for (int step = 0; step < cfg.steps; ++step) {
    RngStream rng = RngStream(cfg.seed).child("pretrain", static_cast<uint64_t>(step));
    Tensor x = Tensor::zeros({cfg.batch, net_cfg.input_dim});
    std::vector<int> y(static_cast<size_t>(cfg.batch));
    for (int b = 0; b < cfg.batch; ++b) {
      int ci = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_classes)));
      const auto& cref = classes[static_cast<size_t>(ci)];
      size_t dom_idx = static_cast<size_t>(cref.dom - spec.id_domains.data());
      Tensor pt = sample_point(*cref.dom, center_cache[dom_idx][static_cast<size_t>(cref.class_id)],
                               tf_cache[dom_idx], rng);
      for (int j = 0; j < net_cfg.input_dim; ++j) x.at(b, j) = pt[j];
      y[static_cast<size_t>(b)] = ci;
    }

    Tape tape;
    TapedParams tb = lift(tape, body, true);
    TapedParams th = lift(tape, head, true);
    Var emb = backbone_embed(tape, tb, net_cfg, tape.constant(x));
    Var logits = tape.add(tape.matmul(emb, th.vars[0]), th.vars[1]);
    Var loss = ce_loss_t(tape, logits, y);
    if (!std::isfinite(tape.val(loss).scalar_value()))
      throw NumericError("pretrain diverged at step " + std::to_string(step));

    std::vector<Var> wrt = tb.vars;
    wrt.insert(wrt.end(), th.vars.begin(), th.vars.end());
    auto grads = tape.grad(loss, wrt);
    ParamSet gbody(body.specs(), std::vector<Tensor>(grads.begin(), grads.begin() + static_cast<long>(tb.vars.size())));
    ParamSet ghead(head.specs(), std::vector<Tensor>(grads.begin() + static_cast<long>(tb.vars.size()), grads.end()));
    body = opt_body.step(body, gbody, cfg.lr);
    head = opt_head.step(head, ghead, cfg.lr);
  }

  // Calibrate the embedding scale: classification pre-training inflates the
  // projection, which would leave nearest-centroid logits (negative squared
  // distances) far off the unit scale the episodic losses expect.
  {
    RngStream rng = RngStream(cfg.seed).child("calibrate");
    int probe_n = 256;
    Tensor probe = Tensor::zeros({probe_n, net_cfg.input_dim});
    for (int b = 0; b < probe_n; ++b) {
      int ci = static_cast<int>(rng.next_below(static_cast<uint64_t>(n_classes)));
      const auto& cref = classes[static_cast<size_t>(ci)];
      size_t dom_idx = static_cast<size_t>(cref.dom - spec.id_domains.data());
      Tensor pt = sample_point(*cref.dom, center_cache[dom_idx][static_cast<size_t>(cref.class_id)],
                               tf_cache[dom_idx], rng);
      for (int j = 0; j < net_cfg.input_dim; ++j) probe.at(b, j) = pt[j];
    }
    Tensor emb = backbone_embed_values(body, net_cfg, probe);
    std::vector<double> mean(static_cast<size_t>(net_cfg.embed_dim), 0.0);
    for (int i = 0; i < probe_n; ++i)
      for (int c = 0; c < net_cfg.embed_dim; ++c) mean[static_cast<size_t>(c)] += emb.at(i, c);
    for (auto& m : mean) m /= probe_n;
    double var = 0.0;
    for (int i = 0; i < probe_n; ++i)
      for (int c = 0; c < net_cfg.embed_dim; ++c) {
        double d = emb.at(i, c) - mean[static_cast<size_t>(c)];
        var += d * d;
      }
    var /= probe_n;  // total embedding variance across coordinates
    if (var > 0.0) {
      double c = 1.0 / std::sqrt(var);
      std::vector<Tensor> vals(body.values().begin(), body.values().end());
      for (size_t l = 0; l < body.n_layers(); ++l) {
        const auto& name = body.layers()[l].name;
        if (name == "proj.weight" || name == "proj.bias")
          for (auto& v : vals[l].data()) v *= c;
      }
      body = ParamSet(body.specs(), std::move(vals));
    }
  }
  return body;  // the classification head is discarded
}

std::vector<SuiteSpec> suite_catalog(const std::string& version) {
  auto seed_of = [&](const std::string& tag) {
    return RngStream::hash_tag(version + ":" + tag);
  };
  SuiteSpec md;
  md.name = "md-mini";
  md.version = version;
  md.seed = seed_of("md-mini");
  md.n_way_min = md.n_way_max = 5;
  md.k_shot_min = md.k_shot_max = 5;
  md.q_query = 5;
  md.min_transform_distance = 1.0;

  auto dom = [&](const std::string& name, GeneratorKind kind, InputWarp warp, double noise) {
    DomainSpec d;
    d.name = name;
    d.kind = kind;
    d.warp = warp;
    d.noise_scale = noise;
    d.center_scale = 0.9;
    d.scale_min = 0.8;
    d.scale_max = 1.4;
    d.signal_dims = 4;
    d.nuisance_mult = 8.0;
    d.transform_seed = seed_of("domain:" + name);
    return d;
  };
  md.id_domains = {
      dom("gauss-a", GeneratorKind::kGaussianClusters, InputWarp::kNone, 0.30),
      dom("gauss-b", GeneratorKind::kGaussianClusters, InputWarp::kTanh, 0.30),
      dom("ring-a", GeneratorKind::kRingClusters, InputWarp::kNone, 0.26),
      dom("warp-a", GeneratorKind::kWarpedClusters, InputWarp::kTanh, 0.28),
  };
  md.ood_domains = {
      dom("gauss-c", GeneratorKind::kGaussianClusters, InputWarp::kSin, 0.30),
      dom("ring-b", GeneratorKind::kRingClusters, InputWarp::kTanh, 0.26),
      dom("warp-b", GeneratorKind::kWarpedClusters, InputWarp::kSin, 0.28),
  };
  md.validate();
  return {md};
}

SuiteSpec find_suite(const std::string& name, const std::string& version) {
  for (auto& s : suite_catalog(version))
    if (s.name == name) return s;
  throw ConfigError("unknown suite: " + name);
}

std::string episode_json(const Episode& e) {
  nlohmann::json j;
  j["n_way"] = e.n_way;
  j["domain"] = e.domain;
  j["is_ood"] = e.is_ood;
  j["support_x"] = e.support_x.data();
  j["support_shape"] = e.support_x.shape();
  j["support_y"] = e.support_y;
  j["query_x"] = e.query_x.data();
  j["query_shape"] = e.query_x.shape();
  j["query_y"] = e.query_y;
  return j.dump();
}

}  // namespace smelt

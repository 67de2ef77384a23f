#include "smelt/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace smelt {

using nlohmann::json;

namespace {

void expect_object(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
}

void reject_unknown(const json& j, const std::string& ctx, const std::set<std::string>& allowed) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError(ctx + ": unknown key \"" + it.key() + "\"");
}

template <typename T>
T get_or(const json& j, const std::string& key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config: bad type for \"" + key + "\"");
  }
}

template <typename T>
T get_req(const json& j, const std::string& ctx, const std::string& key) {
  if (!j.contains(key)) throw ConfigError(ctx + ": missing required key \"" + key + "\"");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(ctx + ": bad type for \"" + key + "\"");
  }
}

DomainSpec parse_domain(const json& j) {
  expect_object(j, "domain");
  reject_unknown(j, "domain", {"name", "kind", "warp", "noise_scale", "center_scale", "scale_min",
                               "scale_max", "input_dim", "signal_dims", "class_pool_size", "transform_seed",
                               "nuisance_mult"});
  DomainSpec d;
  d.name = get_req<std::string>(j, "domain", "name");
  d.kind = generator_from_name(get_or<std::string>(j, "kind", "gaussian-clusters"));
  d.warp = warp_from_name(get_or<std::string>(j, "warp", "none"));
  d.noise_scale = get_or<double>(j, "noise_scale", d.noise_scale);
  d.nuisance_mult = get_or<double>(j, "nuisance_mult", d.nuisance_mult);
  d.center_scale = get_or<double>(j, "center_scale", d.center_scale);
  d.scale_min = get_or<double>(j, "scale_min", d.scale_min);
  d.scale_max = get_or<double>(j, "scale_max", d.scale_max);
  d.input_dim = get_or<int>(j, "input_dim", d.input_dim);
  d.signal_dims = get_or<int>(j, "signal_dims", d.signal_dims);
  d.class_pool_size = get_or<int>(j, "class_pool_size", d.class_pool_size);
  d.transform_seed = get_or<uint64_t>(j, "transform_seed", RngStream::hash_tag("domain:" + d.name));
  d.validate();
  return d;
}

json domain_json(const DomainSpec& d) {
  json j;
  j["name"] = d.name;
  j["kind"] = generator_name(d.kind);
  j["warp"] = warp_name(d.warp);
  j["noise_scale"] = d.noise_scale;
  j["nuisance_mult"] = d.nuisance_mult;
  j["center_scale"] = d.center_scale;
  j["scale_min"] = d.scale_min;
  j["scale_max"] = d.scale_max;
  j["input_dim"] = d.input_dim;
  j["signal_dims"] = d.signal_dims;
  j["class_pool_size"] = d.class_pool_size;
  j["transform_seed"] = d.transform_seed;
  return j;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  expect_object(j, "config");
  reject_unknown(j, "config", {"format_version", "suite", "net", "pretrain", "train", "adapt",
                               "output_dir", "seed"});

  RunConfig cfg;
  cfg.format_version = get_req<int>(j, "config", "format_version");
  if (cfg.format_version != 1)
    throw VersionError("config: unsupported format_version " + std::to_string(cfg.format_version));
  cfg.seed = get_or<uint64_t>(j, "seed", 0);
  cfg.output_dir = get_or<std::string>(j, "output_dir", cfg.output_dir);

  const json& s = j.at("suite");
  expect_object(s, "suite");
  if (s.contains("id_domains")) {
    reject_unknown(s, "suite", {"name", "seed", "version", "n_way", "k_shot", "q_query",
                                "min_transform_distance", "id_domains", "ood_domains"});
    cfg.suite_by_name = false;
    cfg.suite.name = get_req<std::string>(s, "suite", "name");
    cfg.suite.version = get_or<std::string>(s, "version", "inline");
    cfg.suite.seed = get_or<uint64_t>(s, "seed", cfg.seed);
    if (s.contains("n_way")) {
      auto r = s.at("n_way").get<std::vector<int>>();
      if (r.size() != 2) throw ConfigError("suite: n_way must be [lo, hi]");
      cfg.suite.n_way_min = r[0];
      cfg.suite.n_way_max = r[1];
    }
    if (s.contains("k_shot")) {
      auto r = s.at("k_shot").get<std::vector<int>>();
      if (r.size() != 2) throw ConfigError("suite: k_shot must be [lo, hi]");
      cfg.suite.k_shot_min = r[0];
      cfg.suite.k_shot_max = r[1];
    }
    cfg.suite.q_query = get_or<int>(s, "q_query", cfg.suite.q_query);
    cfg.suite.min_transform_distance =
        get_or<double>(s, "min_transform_distance", cfg.suite.min_transform_distance);
    for (const auto& d : s.at("id_domains")) cfg.suite.id_domains.push_back(parse_domain(d));
    if (s.contains("ood_domains"))
      for (const auto& d : s.at("ood_domains")) cfg.suite.ood_domains.push_back(parse_domain(d));
    cfg.suite.validate();
  } else {
    reject_unknown(s, "suite", {"name", "catalog_version"});
    cfg.suite_by_name = true;
    cfg.suite_name = get_req<std::string>(s, "suite", "name");
    cfg.catalog_version = get_or<std::string>(s, "catalog_version", "1");
    cfg.suite = find_suite(cfg.suite_name, cfg.catalog_version);
  }

  if (j.contains("net")) {
    const json& n = j.at("net");
    expect_object(n, "net");
    reject_unknown(n, "net", {"input_dim", "width", "depth", "embed_dim"});
    cfg.net.input_dim = get_or<int>(n, "input_dim", cfg.net.input_dim);
    cfg.net.width = get_or<int>(n, "width", cfg.net.width);
    cfg.net.depth = get_or<int>(n, "depth", cfg.net.depth);
    cfg.net.embed_dim = get_or<int>(n, "embed_dim", cfg.net.embed_dim);
    if (cfg.net.input_dim <= 0 || cfg.net.width <= 0 || cfg.net.depth < 1 || cfg.net.embed_dim <= 0)
      throw ConfigError("net: dimensions must be positive (depth >= 1)");
  }
  if (!cfg.suite.id_domains.empty() && cfg.suite.id_domains[0].input_dim != cfg.net.input_dim)
    throw ConfigError("config: net.input_dim differs from the suite's domain input_dim");

  cfg.pretrain.seed = cfg.seed;
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    expect_object(p, "pretrain");
    reject_unknown(p, "pretrain", {"steps", "batch", "lr", "seed"});
    cfg.pretrain.steps = get_or<int>(p, "steps", cfg.pretrain.steps);
    cfg.pretrain.batch = get_or<int>(p, "batch", cfg.pretrain.batch);
    cfg.pretrain.lr = get_or<double>(p, "lr", cfg.pretrain.lr);
    cfg.pretrain.seed = get_or<uint64_t>(p, "seed", cfg.seed);
    if (cfg.pretrain.steps < 0 || cfg.pretrain.batch < 1 || cfg.pretrain.lr <= 0)
      throw ConfigError("pretrain: bad values");
  }

  cfg.train.seed = cfg.seed;
  if (j.contains("train")) {
    const json& t = j.at("train");
    expect_object(t, "train");
    reject_unknown(t, "train",
                   {"experts", "tau", "beta_w", "kd_temp", "teacher_steps", "lr_main", "lr_lambda",
                    "lr_teacher", "batch_tasks", "max_steps", "seed", "gumbel_temp",
                    "gumbel_temp_final", "alpha_weighted_ascent", "metric", "hard_concrete",
                    "mask_init_density", "mask_init_std", "eval_every", "eval_episodes"});
    cfg.train.experts = get_or<int>(t, "experts", cfg.train.experts);
    cfg.train.tau = get_or<double>(t, "tau", cfg.train.tau);
    cfg.train.beta_w = get_or<double>(t, "beta_w", cfg.train.beta_w);
    cfg.train.kd_temp = get_or<double>(t, "kd_temp", cfg.train.kd_temp);
    cfg.train.teacher_steps = get_or<int>(t, "teacher_steps", cfg.train.teacher_steps);
    cfg.train.lr_main = get_or<double>(t, "lr_main", cfg.train.lr_main);
    cfg.train.lr_lambda = get_or<double>(t, "lr_lambda", cfg.train.lr_lambda);
    cfg.train.lr_teacher = get_or<double>(t, "lr_teacher", cfg.train.lr_teacher);
    cfg.train.batch_tasks = get_or<int>(t, "batch_tasks", cfg.train.batch_tasks);
    cfg.train.max_steps = get_or<int>(t, "max_steps", cfg.train.max_steps);
    cfg.train.seed = get_or<uint64_t>(t, "seed", cfg.seed);
    cfg.train.gumbel_temp = get_or<double>(t, "gumbel_temp", cfg.train.gumbel_temp);
    cfg.train.gumbel_temp_final =
        get_or<double>(t, "gumbel_temp_final", get_or<double>(t, "gumbel_temp", cfg.train.gumbel_temp));
    cfg.train.alpha_weighted_ascent =
        get_or<bool>(t, "alpha_weighted_ascent", cfg.train.alpha_weighted_ascent);
    cfg.train.metric = metric_from_name(get_or<std::string>(t, "metric", "sqeuclid"));
    if (t.contains("hard_concrete")) {
      const json& h = t.at("hard_concrete");
      expect_object(h, "hard_concrete");
      reject_unknown(h, "hard_concrete", {"beta", "gamma", "zeta_s"});
      cfg.train.hc.beta = get_or<double>(h, "beta", cfg.train.hc.beta);
      cfg.train.hc.gamma = get_or<double>(h, "gamma", cfg.train.hc.gamma);
      cfg.train.hc.zeta_s = get_or<double>(h, "zeta_s", cfg.train.hc.zeta_s);
    }
    cfg.train.mask_init_density = get_or<double>(t, "mask_init_density", cfg.train.mask_init_density);
    cfg.train.mask_init_std = get_or<double>(t, "mask_init_std", cfg.train.mask_init_std);
    cfg.train.eval_every = get_or<int>(t, "eval_every", cfg.train.eval_every);
    cfg.train.eval_episodes = get_or<int>(t, "eval_episodes", cfg.train.eval_episodes);
    cfg.train.validate();
  }

  cfg.adapt.selection.seed = cfg.seed;
  cfg.adapt.finetune.seed = cfg.seed;
  if (j.contains("adapt")) {
    const json& a = j.at("adapt");
    expect_object(a, "adapt");
    reject_unknown(a, "adapt", {"rounds", "accept_prob", "stochastic_gates", "loo_support_loss",
                                "ft_steps", "ft_lr", "lr_grid", "lr_search_episodes", "seed"});
    cfg.adapt.selection.rounds = get_or<int>(a, "rounds", cfg.adapt.selection.rounds);
    cfg.adapt.selection.accept_prob = get_or<double>(a, "accept_prob", cfg.adapt.selection.accept_prob);
    cfg.adapt.selection.stochastic_gates =
        get_or<bool>(a, "stochastic_gates", cfg.adapt.selection.stochastic_gates);
    cfg.adapt.selection.loo_support_loss =
        get_or<bool>(a, "loo_support_loss", cfg.adapt.selection.loo_support_loss);
    cfg.adapt.selection.seed = get_or<uint64_t>(a, "seed", cfg.seed);
    cfg.adapt.finetune.steps = get_or<int>(a, "ft_steps", cfg.adapt.finetune.steps);
    if (a.contains("ft_lr")) {
      cfg.adapt.finetune.lr = get_req<double>(a, "adapt", "ft_lr");
      cfg.adapt.ft_lr_fixed = true;
    }
    cfg.adapt.finetune.stochastic_gates = cfg.adapt.selection.stochastic_gates;
    cfg.adapt.finetune.seed = cfg.adapt.selection.seed;
    cfg.adapt.lr_grid = get_or<std::vector<double>>(a, "lr_grid", cfg.adapt.lr_grid);
    cfg.adapt.lr_search_episodes = get_or<int>(a, "lr_search_episodes", cfg.adapt.lr_search_episodes);
    cfg.adapt.selection.validate();
    if (cfg.adapt.lr_grid.empty()) throw ConfigError("adapt: lr_grid must be nonempty");
  }
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

std::string run_config_json(const RunConfig& cfg) {
  json j;
  j["format_version"] = cfg.format_version;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  if (cfg.suite_by_name) {
    j["suite"]["name"] = cfg.suite_name;
    j["suite"]["catalog_version"] = cfg.catalog_version;
  } else {
    json s;
    s["name"] = cfg.suite.name;
    s["version"] = cfg.suite.version;
    s["seed"] = cfg.suite.seed;
    s["n_way"] = {cfg.suite.n_way_min, cfg.suite.n_way_max};
    s["k_shot"] = {cfg.suite.k_shot_min, cfg.suite.k_shot_max};
    s["q_query"] = cfg.suite.q_query;
    s["min_transform_distance"] = cfg.suite.min_transform_distance;
    for (const auto& d : cfg.suite.id_domains) s["id_domains"].push_back(domain_json(d));
    for (const auto& d : cfg.suite.ood_domains) s["ood_domains"].push_back(domain_json(d));
    j["suite"] = std::move(s);
  }
  j["net"] = {{"input_dim", cfg.net.input_dim},
              {"width", cfg.net.width},
              {"depth", cfg.net.depth},
              {"embed_dim", cfg.net.embed_dim}};
  j["pretrain"] = {{"steps", cfg.pretrain.steps},
                   {"batch", cfg.pretrain.batch},
                   {"lr", cfg.pretrain.lr},
                   {"seed", cfg.pretrain.seed}};
  j["train"] = {{"experts", cfg.train.experts},
                {"tau", cfg.train.tau},
                {"beta_w", cfg.train.beta_w},
                {"kd_temp", cfg.train.kd_temp},
                {"teacher_steps", cfg.train.teacher_steps},
                {"lr_main", cfg.train.lr_main},
                {"lr_lambda", cfg.train.lr_lambda},
                {"lr_teacher", cfg.train.lr_teacher},
                {"batch_tasks", cfg.train.batch_tasks},
                {"max_steps", cfg.train.max_steps},
                {"seed", cfg.train.seed},
                {"gumbel_temp", cfg.train.gumbel_temp},
                {"gumbel_temp_final", cfg.train.gumbel_temp_final},
                {"alpha_weighted_ascent", cfg.train.alpha_weighted_ascent},
                {"metric", metric_name(cfg.train.metric)},
                {"hard_concrete",
                 {{"beta", cfg.train.hc.beta}, {"gamma", cfg.train.hc.gamma}, {"zeta_s", cfg.train.hc.zeta_s}}},
                {"mask_init_density", cfg.train.mask_init_density},
                {"mask_init_std", cfg.train.mask_init_std},
                {"eval_every", cfg.train.eval_every},
                {"eval_episodes", cfg.train.eval_episodes}};
  j["adapt"] = {{"rounds", cfg.adapt.selection.rounds},
                {"accept_prob", cfg.adapt.selection.accept_prob},
                {"stochastic_gates", cfg.adapt.selection.stochastic_gates},
                {"loo_support_loss", cfg.adapt.selection.loo_support_loss},
                {"ft_steps", cfg.adapt.finetune.steps},
                {"lr_grid", cfg.adapt.lr_grid},
                {"lr_search_episodes", cfg.adapt.lr_search_episodes},
                {"seed", cfg.adapt.selection.seed}};
  if (cfg.adapt.ft_lr_fixed) j["adapt"]["ft_lr"] = cfg.adapt.finetune.lr;
  return j.dump(2);
}

}  // namespace smelt

// Scratch calibration driver (not a test; removed before release).
#include <chrono>
#include <cstdio>
#include <iostream>

#include "smelt/adapt.hpp"
#include "smelt/evalrun.hpp"
#include "smelt/metaopt.hpp"
#include "smelt/tasks.hpp"

using namespace smelt;
using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

static double protonet_acc(const ParamSet& theta, const NetConfig& net, const SuiteSpec& suite,
                           bool ood, int n, Metric metric) {
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    Episode ep = sample_episode(suite, Split::kTest, ood, static_cast<uint64_t>(i));
    acc += accuracy(protonet_logits(theta, net, ep, metric), ep.query_y);
  }
  return acc / n;
}

int main(int argc, char** argv) {
  uint64_t seed = argc > 1 ? static_cast<uint64_t>(std::atoll(argv[1])) : 0;
  int pretrain_steps = argc > 2 ? std::atoi(argv[2]) : 1500;
  int train_steps = argc > 3 ? std::atoi(argv[3]) : 2000;
  double tau = argc > 4 ? std::atof(argv[4]) : 0.5;
  double noise_mult = argc > 5 ? std::atof(argv[5]) : 1.0;
  int signal_dims = argc > 6 ? std::atoi(argv[6]) : 0;
  double center_scale = argc > 7 ? std::atof(argv[7]) : 0.0;

  SuiteSpec suite = find_suite("md-mini");
  for (auto* doms : {&suite.id_domains, &suite.ood_domains})
    for (auto& d : *doms) {
      d.noise_scale *= noise_mult;
      if (signal_dims > 0) d.signal_dims = signal_dims;
      if (center_scale > 0) d.center_scale = center_scale;
    }
  NetConfig net;
  Metric metric = Metric::kSqEuclid;

  ParamSet untrained = init_backbone(net, RngStream(seed).child("init"));
  printf("untrained ID acc: %.4f\n", protonet_acc(untrained, net, suite, false, 100, metric));

  auto t0 = Clock::now();
  PretrainConfig pcfg;
  pcfg.steps = pretrain_steps;
  pcfg.seed = seed;
  ParamSet pre = pretrain_backbone(suite, net, pcfg);
  printf("pretrain (%d steps): %.0f ms\n", pretrain_steps, ms_since(t0));
  double base_id = protonet_acc(pre, net, suite, false, 200, metric);
  double base_ood = protonet_acc(pre, net, suite, true, 200, metric);
  printf("baseline ID acc: %.4f  OOD acc: %.4f\n", base_id, base_ood);

  TrainConfig tcfg;
  tcfg.seed = seed;
  tcfg.tau = tau;
  tcfg.max_steps = train_steps;
  tcfg.eval_every = 500;
  tcfg.eval_episodes = 50;

  EpisodeSource src;
  src.train_episode = [&suite](uint64_t i) { return sample_episode(suite, Split::kTrain, false, i); };
  src.val_id = [&suite](uint64_t i) { return sample_episode(suite, Split::kVal, false, i); };
  src.val_ood = [&suite](uint64_t i) { return sample_episode(suite, Split::kVal, true, i); };

  // one-step timing probe
  {
    TrainState probe = init_train_state(tcfg, net, pre);
    std::vector<Episode> batch;
    for (int b = 0; b < tcfg.batch_tasks; ++b) batch.push_back(src.train_episode(static_cast<uint64_t>(b)));
    auto tp = Clock::now();
    for (int i = 0; i < 20; ++i) (void)meta_step(probe, batch, tcfg, net);
    printf("meta_step: %.2f ms\n", ms_since(tp) / 20);
  }

  if (const char* dense_env = std::getenv("CAL_DENSE")) {
    double lr = std::atof(dense_env);
    auto td = Clock::now();
    DenseTuneResult dres = dense_meta_tune(pre, net, src.train_episode, train_steps,
                                           tcfg.batch_tasks, lr, metric);
    printf("dense %d steps lr %g: %.0f ms, ID %.4f (base %.4f) OOD %.4f (base %.4f)\n",
           train_steps, lr, ms_since(td), protonet_acc(dres.theta, net, suite, false, 200, metric),
           base_id, protonet_acc(dres.theta, net, suite, true, 200, metric), base_ood);
    return 0;
  }
  if (const char* e = std::getenv("CAL_BETA")) tcfg.beta_w = std::atof(e);
  if (const char* e = std::getenv("CAL_LR")) tcfg.lr_main = std::atof(e);
  if (const char* e = std::getenv("CAL_LR_TEACHER")) tcfg.lr_teacher = std::atof(e);
  if (const char* e = std::getenv("CAL_GUMBEL_FINAL")) tcfg.gumbel_temp_final = std::atof(e);
  printf("beta_w %.2f lr_main %g lr_teacher %g\n", tcfg.beta_w, tcfg.lr_main, tcfg.lr_teacher);

  t0 = Clock::now();
  TrainResult res = train(tcfg, net, pre, src);
  if (std::getenv("CAL_TRACE")) {
    printf("metrics header: %s\n", metrics_csv_header(tcfg.experts).c_str());
    for (size_t i = 0; i < res.metrics_rows.size(); i += 100)
      printf("  %s\n", res.metrics_rows[i].c_str());
  }
  printf("train %d steps: %.0f ms (best val %.4f at step %lld)\n", train_steps, ms_since(t0),
         res.best_val_acc, static_cast<long long>(res.best_step));

  auto report = [&](const TrainState& st, const char* tag) {
    auto gates = episode_gates(st.pool, false, RngStream(0));
    double id = 0, ood = 0;
    for (int i = 0; i < 200; ++i) {
      Episode e1 = sample_episode(suite, Split::kTest, false, static_cast<uint64_t>(i));
      id += accuracy(direct_inference(st, net, e1, metric, gates).query_logits, e1.query_y);
      Episode e2 = sample_episode(suite, Split::kTest, true, static_cast<uint64_t>(i));
      ood += accuracy(direct_inference(st, net, e2, metric, gates).query_logits, e2.query_y);
    }
    printf("%s: direct ID %.4f (vs base %.4f, delta %+.4f)  OOD %.4f (vs base %.4f, delta %+.4f)\n",
           tag, id / 200, base_id, id / 200 - base_id, ood / 200, base_ood, ood / 200 - base_ood);
    for (size_t m = 0; m < st.pool.masks.size(); ++m)
      printf("  mask %zu density %.4f lambda %.4f\n", m, expected_density(st.pool.masks[m]),
             st.pool.lambdas[m]);
  };
  report(res.best, "best");
  report(res.final_state, "final");
  return 0;
}

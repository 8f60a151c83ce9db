#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "splitstream/errors.hpp"
#include "splitstream/harness.hpp"

using namespace splitstream;

namespace {

// Exit statuses.
constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kSessionFailure = 2;
constexpr int kProtocolFailure = 3;
constexpr int kNotReached = 4;

struct RunArgs {
  std::string config;
  std::string arm;
  std::string role = "loopback";
  std::string listen;
  std::string connect;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct CompareArgs {
  std::string a;
  std::string b;
  double tolerance = 0.02;
};

struct EvalArgs {
  std::string config;
  std::string checkpoint;
  int budget = 0;
  std::string dataset;
};

int cmd_run(const RunArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (!a.arm.empty()) cfg.arm = parse_arm(a.arm);
  const Role role = parse_role(a.role);
  if (role != Role::Loopback) cfg.transport = Transport::Tcp;
  if (!a.listen.empty()) cfg.listen = a.listen;
  if (!a.connect.empty()) cfg.connect = a.connect;
  if (a.seed) cfg.plan.seed = *a.seed;
  if (!a.out.empty()) cfg.out = a.out;

  const auto res = run_experiment(cfg, role);
  if (role == Role::Server) {
    std::printf("server done: tx %llu rx %llu bytes\n", static_cast<unsigned long long>(res.counters.tx),
                static_cast<unsigned long long>(res.counters.rx));
    return kOk;
  }
  std::printf("%s: final accuracy %.4f, tx %llu rx %llu bytes -> %s\n", arm_name(cfg.arm), res.final_accuracy,
              static_cast<unsigned long long>(res.counters.tx),
              static_cast<unsigned long long>(res.counters.rx), res.csv_path.c_str());
  for (const auto& [b, path] : res.trained.checkpoints)
    std::printf("  theta_b%d %s (accuracy %.4f)\n", b, path.c_str(), res.trained.accuracy.at(b));
  return kOk;
}

int cmd_compare(const CompareArgs& a) {
  const auto report = compare_runs(a.a, a.b, a.tolerance);
  std::cout << format_report(report);
  return report.reached ? kOk : kNotReached;
}

int cmd_eval(const EvalArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (!a.dataset.empty()) {
    cfg.dataset.kind = DatasetKind::Cifar10Binary;
    cfg.dataset.path = a.dataset;
  }
  const auto data = load_dataset(cfg.dataset);
  const auto res = resolve(cfg, data.test.sample_shape, data.test.num_classes);
  auto params = load_split_checkpoint(a.checkpoint);
  const int b = a.budget > 0 ? a.budget : static_cast<int>(res.model.phi());
  const double acc = evaluate(res.model, params, b, data.test, cfg.plan.eval_batch_size);
  std::printf("accuracy %.6f at b=%d on %zu test samples\n", acc, b, data.test.size());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Split training with learnable channel budgets"};
  app.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Train one arm and write a metrics CSV");
  run_cmd->add_option("--config", run.config, "INI experiment config")->check(CLI::ExistingFile);
  run_cmd->add_option("--arm", run.arm, "no-compression | high-compression | deprune | prune | from-scratch | unsplit");
  run_cmd->add_option("--role", run.role, "loopback | client | server (client/server use tcp)")
      ->check(CLI::IsMember({"loopback", "client", "server"}));
  run_cmd->add_option("--listen", run.listen, "host:port for the server role");
  run_cmd->add_option("--connect", run.connect, "host:port for the client role");
  run_cmd->add_option("--seed", run.seed, "training seed");
  run_cmd->add_option("--out", run.out, "metrics CSV path");

  CompareArgs cmp;
  auto* cmp_cmd = app.add_subcommand("compare", "Accuracy-matched byte ratio of run A over run B");
  cmp_cmd->add_option("--a", cmp.a, "metrics CSV of run A")->required()->check(CLI::ExistingFile);
  cmp_cmd->add_option("--b", cmp.b, "metrics CSV of run B")->required()->check(CLI::ExistingFile);
  cmp_cmd->add_option("--tolerance", cmp.tolerance, "accuracy tolerance (fraction)")->check(CLI::NonNegativeNumber);

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Test accuracy of a split checkpoint at a budget");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "split checkpoint file")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--budget", ev.budget, "channels sent (default phi)")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--dataset", ev.dataset, "CIFAR-10 binary directory (default: config dataset)");
  eval_cmd->add_option("--config", ev.config, "INI config describing the model")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run_cmd) return cmd_run(run);
    if (*cmp_cmd) return cmd_compare(cmp);
    if (*eval_cmd) return cmd_eval(ev);
  } catch (const SessionError& e) {
    std::fprintf(stderr, "session error after %lld batches: %s\n", static_cast<long long>(e.batches_completed()),
                 e.what());
    return kSessionFailure;
  } catch (const ProtocolError& e) {
    std::fprintf(stderr, "protocol error: %s\n", e.what());
    return kProtocolFailure;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}

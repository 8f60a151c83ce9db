#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "splitstream/data.hpp"
#include "splitstream/schedules.hpp"

namespace splitstream {

enum class Arm { NoCompression, HighCompression, Deprune, Prune, FromScratch, Unsplit };
enum class Transport { Loopback, Tcp, Local };
enum class Role { Loopback, Client, Server };

const char* arm_name(Arm a);
Arm parse_arm(const std::string& s);
const char* transport_name(Transport t);
Transport parse_transport(const std::string& s);
Role parse_role(const std::string& s);

struct ModelSpec {
  std::string kind = "vgg11-like";  // or "mlp"
  double width_scale = 0.5;
  bool batch_norm = true;
  std::vector<int> hidden{64, 64};  // mlp only
};

/// A budget of -1 in the plan stands for phi and is filled in by resolve().
inline constexpr double kBudgetPhi = -1.0;

struct ExperimentConfig {
  ModelSpec model;
  DatasetSpec dataset;
  std::size_t split_index = 5;
  int r = 1;
  std::int64_t phi = 0;  // 0: phi = phi_tilde
  bool bypass = false;
  LossWeights loss{0.25, 0.5, 0.1};
  TrainPlan plan;
  Arm arm = Arm::Deprune;
  Transport transport = Transport::Loopback;
  std::string listen = "127.0.0.1:7070";
  std::string connect = "127.0.0.1:7070";
  double scratch_budget = 32;  // from-scratch arm
  std::string checkpoint_dir = "checkpoints";
  std::string out = "metrics.csv";

  ExperimentConfig();
};

/// Parses INI text with sections [model] [dataset] [split] [loss] [plan] [run].
/// Unknown keys are a ValidationError.
ExperimentConfig parse_config(const std::string& ini_text);
ExperimentConfig load_config(const std::string& path);
/// Deterministic INI rendering; parse_config(to_ini(c)) reproduces c.
std::string to_ini(const ExperimentConfig& c);

/// Model, split and plan after arm rules are applied.
struct ResolvedExperiment {
  ExperimentConfig config;  // plan rewritten for the arm, phi budgets filled in
  LayerList layers;
  SplitModel model;
  PlanKind kind = PlanKind::Fixed;
};

/// Builds the model for the dataset's input shape and class count, then
/// rewrites the plan for the arm: no-compression runs one stage at b = phi,
/// high-compression one stage at the smallest planned budget, from-scratch
/// one stage at scratch_budget with that stage's epochs, deprune and prune
/// keep the plan. ValidationError when the arm and plan disagree.
ResolvedExperiment resolve(const ExperimentConfig& cfg, const Shape& sample_shape, int num_classes);

// ---- metrics CSV ----

inline constexpr const char* kMetricsHeader =
    "kind,wall_ms,epoch,stage,stage_b,budget_target,batch,task_loss,prune_loss,sum_f,test_accuracy,"
    "cum_tx_bytes,cum_rx_bytes,samples_per_sec";

std::string format_metrics_row(const MetricsRecord& r);
/// FormatError on a wrong column count or an unparsable field.
MetricsRecord parse_metrics_row(const std::string& line);

/// Writes the config as "# " lines, then the header, then one row per
/// record, flushing each row.
class MetricsWriter {
 public:
  MetricsWriter(const std::string& path, const std::string& config_ini);
  void write(const MetricsRecord& r);
  MetricsSink sink();

 private:
  std::shared_ptr<std::ofstream> out_;
};

struct MetricsFile {
  std::string config_ini;
  std::vector<MetricsRecord> rows;
};

MetricsFile read_metrics(const std::string& path);

/// The CSV text with the wall-clock columns (wall_ms, samples_per_sec)
/// removed; used for determinism checks.
std::string strip_wall_clock(const std::string& csv_text);

// ---- experiments ----

struct ExperimentResult {
  std::string csv_path;
  double final_accuracy = 0.0;
  std::vector<double> epoch_accuracy;
  ByteCounters counters;
  TrainedSet trained;  // prune arm only
};

/// Runs one arm end to end and writes the metrics CSV. With transport tcp
/// the role picks the side; the server role writes no CSV.
ExperimentResult run_experiment(const ExperimentConfig& cfg, Role role = Role::Loopback);
/// Same, on an already loaded dataset.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const DatasetSplit& data, Role role = Role::Loopback);

struct CompareReport {
  double tolerance = 0.02;
  double final_accuracy_a = 0.0;
  double final_accuracy_b = 0.0;
  double threshold = 0.0;  // final_accuracy_b - tolerance
  bool reached = false;
  int match_epoch_a = -1;  // first epoch row of A at or above threshold
  int threshold_epoch_b = -1;
  std::uint64_t bytes_a = 0;  // cumulative tx+rx at A's match epoch
  std::uint64_t bytes_b = 0;  // at B's final epoch
  double byte_ratio = 0.0;    // bytes_a / bytes_b
  double epoch_speedup = 0.0;  // epochs B needs / epochs A needs (to threshold)
  double throughput_ratio = 0.0;
};

CompareReport compare_runs(const MetricsFile& a, const MetricsFile& b, double tolerance = 0.02);
CompareReport compare_runs(const std::string& csv_a, const std::string& csv_b, double tolerance = 0.02);
std::string format_report(const CompareReport& r);

}  // namespace splitstream

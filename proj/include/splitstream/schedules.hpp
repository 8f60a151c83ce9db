#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "splitstream/dataset.hpp"
#include "splitstream/link.hpp"
#include "splitstream/model.hpp"
#include "splitstream/wire.hpp"

namespace splitstream {

struct StagePlan {
  double budget_target = 0.0;  // B
  int b = 1;                   // channels sent
  int epochs = 1;
};

enum class PlanKind { Deprune, Prune, Fixed };

struct TrainPlan {
  std::vector<StagePlan> stages;
  int l_k = 2;
  double gamma_boost = 5.0;
  double base_lr = 1e-5;
  double weight_decay = 5e-4;
  int batch_size = 32;
  int eval_batch_size = 100;
  std::uint64_t seed = 1;
  double reset_threshold = 0.5;

  int total_epochs() const;
  /// Checks ordering rules for the kind and the l_k bound. `phi` is the
  /// channel count at the split; every b must lie in [1, phi].
  void validate(PlanKind kind, std::int64_t phi) const;
};

/// Builds a stage from a budget target, b = round(B).
StagePlan stage_for_target(double B, int epochs);

double select_lr(std::size_t stage_index, int epoch_in_stage, const TrainPlan& plan);

/// Per-row training record. Batch rows carry losses; epoch and stage-start
/// rows carry test accuracy; the summary row carries run totals.
struct MetricsRecord {
  enum class Kind { Batch, Epoch, StageStart, Summary };
  Kind kind = Kind::Batch;
  double wall_ms = 0.0;
  int epoch = 0;
  int stage = 0;
  int stage_b = 0;
  double budget_target = 0.0;
  std::int64_t batch = -1;
  double task_loss = 0.0;
  double prune_loss = 0.0;
  double sum_f = 0.0;
  double test_accuracy = -1.0;
  std::uint64_t cum_tx_bytes = 0;
  std::uint64_t cum_rx_bytes = 0;
  double samples_per_sec = 0.0;

  bool operator==(const MetricsRecord&) const = default;
};

const char* metrics_kind_name(MetricsRecord::Kind k);
MetricsRecord::Kind parse_metrics_kind(const std::string& s);

using MetricsSink = std::function<void(const MetricsRecord&)>;

struct StageState {
  std::size_t stage = 0;
  int epoch_in_stage = 0;
  int global_epoch = 0;
  double lr = 0.0;
  std::uint64_t cum_tx = 0;
  std::uint64_t cum_rx = 0;
  std::int64_t batches_completed = 0;
};

/// Server side of one training step, shared by every transport.
class ServerHalf {
 public:
  ServerHalf(const SplitModel& model, ParameterStore& params, LossWeights weights, TrainPlan plan);

  /// StageChange must name the next stage with its exact B and b;
  /// anything else is a ControlError.
  void apply_control(const wire::ControlMsg& msg);
  /// Forward pass, totalLoss, backward and SGD step.
  wire::BackwardMsg train_step(const wire::ForwardMsg& msg);
  wire::AckMsg infer(const wire::ForwardMsg& msg);

  std::optional<std::size_t> stage() const { return stage_; }
  int epoch_in_stage() const { return epoch_ - stage_start_epoch_; }
  double current_lr() const;
  bool shutdown() const { return shutdown_; }

 private:
  void check_message(const wire::ForwardMsg& msg) const;

  const SplitModel& model_;
  ParameterStore& params_;
  LossWeights weights_;
  TrainPlan plan_;
  std::optional<std::size_t> stage_;
  int epoch_ = 0;
  int stage_start_epoch_ = 0;
  bool shutdown_ = false;
};

/// Client side: owns the tape between sending activations and receiving
/// their gradients.
class ClientHalf {
 public:
  ClientHalf(const SplitModel& model, ParameterStore& params);

  struct Pending {
    Tape tape;
    Var payload;
    Var f;
    wire::ForwardMsg msg;
    double sum_f = 0.0;
    Shape payload_shape;
  };

  /// Runs layers [0,n) and compression, selects the top b channels and
  /// builds the forward message. Labels are omitted for inference.
  std::unique_ptr<Pending> forward(const Tensor& x, std::span<const std::int32_t> labels, std::uint64_t batch_id,
                                   std::uint32_t stage, int b, bool inference);

  /// Checks batch id and shapes (ProtocolError), backpropagates both
  /// returned gradients and steps SGD on the client parameters.
  void apply(Pending& p, const wire::BackwardMsg& reply, double lr, double weight_decay);

 private:
  const SplitModel& model_;
  ParameterStore& params_;
};

/// Where forward messages go. The wire implementation encodes frames over a
/// Link; the direct one calls a ServerHalf in-process.
class Exchange {
 public:
  virtual ~Exchange() = default;
  virtual wire::BackwardMsg train(const wire::ForwardMsg& msg) = 0;
  virtual wire::AckMsg infer(const wire::ForwardMsg& msg) = 0;
  virtual void control(const wire::ControlMsg& msg) = 0;
  /// Bytes sent / received by the client so far.
  virtual ByteCounters counters() const = 0;
};

class LinkExchange final : public Exchange {
 public:
  explicit LinkExchange(Link& link) : link_(link) {}
  wire::BackwardMsg train(const wire::ForwardMsg& msg) override;
  wire::AckMsg infer(const wire::ForwardMsg& msg) override;
  void control(const wire::ControlMsg& msg) override;
  ByteCounters counters() const override { return link_.counters(); }

 private:
  Link& link_;
};

/// In-process exchange that still counts the frame sizes the wire would carry.
class DirectExchange final : public Exchange {
 public:
  explicit DirectExchange(ServerHalf& server) : server_(server) {}
  wire::BackwardMsg train(const wire::ForwardMsg& msg) override;
  wire::AckMsg infer(const wire::ForwardMsg& msg) override;
  void control(const wire::ControlMsg& msg) override;
  ByteCounters counters() const override { return counters_; }

 private:
  void count(wire::MsgType type, std::uint64_t tx, std::uint64_t rx_type_bytes, wire::MsgType rx_type);
  ServerHalf& server_;
  ByteCounters counters_;
};

/// Serves one client until Shutdown. Replies to control messages with an
/// empty Ack and to inference forwards with predictions. Malformed frames
/// and control errors close the link and propagate.
void deprune_server_loop(ServerHalf& server, Link& link);

struct TrainHooks {
  /// Called after the StageChange for `stage` has been acknowledged and
  /// before its first epoch.
  std::function<void(std::size_t stage)> on_stage_begin;
  /// Called after the last epoch of `stage`.
  std::function<void(std::size_t stage)> on_stage_end;
  /// Evaluate before the first epoch of every non-initial stage.
  bool eval_at_stage_start = false;
};

struct TrainResult {
  StageState state;
  std::vector<double> epoch_accuracy;
  double final_accuracy = 0.0;
  ByteCounters counters;
  double wall_ms = 0.0;
};

/// Client-driven training over any exchange. Emits batch and
/// epoch rows and the summary row to `sink`. Shuffling uses plan.seed; a
/// trailing partial batch is dropped.
TrainResult run_client_schedule(ClientHalf& client, Exchange& exchange, const TrainPlan& plan, const Dataset& train,
                                const Dataset& test, const MetricsSink& sink, const TrainHooks& hooks = {});

/// Server loop on a worker thread, client schedule on the calling thread,
/// joined by a loopback link. A server-side failure is rethrown here.
TrainResult run_loopback(const SplitModel& model, SplitParams& params, const LossWeights& weights,
                         const TrainPlan& plan, PlanKind kind, const Dataset& train, const Dataset& test,
                         const MetricsSink& sink);

/// Accuracy of the split model at budget b, both halves in eval mode.
double evaluate(const SplitModel& model, SplitParams& params, int b, const Dataset& test, int batch_size = 100);
/// Same, with inference forwards routed through an exchange.
double evaluate(ClientHalf& client, Exchange& exchange, int b, std::uint32_t stage, const Dataset& test,
                int batch_size, std::uint64_t first_batch_id = 0);

/// Θ: checkpoints keyed by b.
struct TrainedSet {
  std::map<int, std::string> checkpoints;
  std::map<int, double> accuracy;
};

struct PruneResult {
  TrainedSet trained;
  TrainResult run;
};

/// Shrinking-budget training in one process. Stores θ_b under `checkpoint_dir` after each
/// stage and then resets saturated filter entries.
PruneResult prune_train(const SplitModel& model, SplitParams& params, const LossWeights& weights,
                        const TrainPlan& plan, const Dataset& train, const Dataset& test,
                        const std::string& checkpoint_dir, const MetricsSink& sink);

/// Local split training (fixed or staged) without a transport.
TrainResult train_local(const SplitModel& model, SplitParams& params, const LossWeights& weights,
                        const TrainPlan& plan, PlanKind kind, const Dataset& train, const Dataset& test,
                        const MetricsSink& sink, const TrainHooks& hooks = {});

/// Trains the plain layer list without any split for plan.total_epochs(),
/// with the same learning-rate schedule and batch order as split training.
TrainResult train_unsplit(const LayerList& layers, ParameterStore& params, const TrainPlan& plan,
                          const Dataset& train, const Dataset& test, const MetricsSink& sink);
double evaluate_unsplit(const LayerList& layers, ParameterStore& params, const Dataset& test, int batch_size = 100);

/// Deterministic per-epoch permutation of [0, n).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

}  // namespace splitstream

#include "splitstream/schedules.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <filesystem>
#include <numeric>
#include <random>
#include <thread>

#include "splitstream/errors.hpp"

namespace splitstream {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

bool is_spatial(const SplitModel& model) { return model.payload_sample.size() == 3; }

std::uint32_t payload_h(const SplitModel& m) {
  return is_spatial(m) ? static_cast<std::uint32_t>(m.payload_sample[1]) : 1u;
}
std::uint32_t payload_w(const SplitModel& m) {
  return is_spatial(m) ? static_cast<std::uint32_t>(m.payload_sample[2]) : 1u;
}

std::int64_t argmax_row(const Tensor& logits, std::int64_t n) {
  const auto k = logits.dim(1);
  const float* row = logits.raw() + n * k;
  return std::max_element(row, row + k) - row;
}

}  // namespace

// ---- plan ----

int TrainPlan::total_epochs() const {
  int e = 0;
  for (const auto& s : stages) e += s.epochs;
  return e;
}

void TrainPlan::validate(PlanKind kind, std::int64_t phi) const {
  if (stages.empty()) throw ValidationError("plan has no stages");
  if (batch_size < 1 || eval_batch_size < 1) throw ValidationError("batch sizes must be positive");
  if (!(base_lr > 0.0) || !(gamma_boost > 0.0) || weight_decay < 0.0) {
    throw ValidationError("learning rate, boost and weight decay must be positive");
  }
  if (l_k < 0) throw ValidationError("l_k must be non-negative");
  for (const auto& s : stages) {
    if (s.b < 1 || s.b > phi) {
      throw ValidationError("stage b=" + std::to_string(s.b) + " outside [1," + std::to_string(phi) + "]");
    }
    if (s.epochs < 1) throw ValidationError("every stage needs at least one epoch");
    if (!(s.budget_target > 0.0)) throw ValidationError("budget target must be positive");
  }
  for (std::size_t i = 1; i < stages.size(); ++i) {
    if (kind == PlanKind::Deprune && stages[i].b <= stages[i - 1].b) {
      throw ValidationError("deprune plans must strictly increase b");
    }
    if (kind == PlanKind::Prune && stages[i].b >= stages[i - 1].b) {
      throw ValidationError("prune plans must strictly decrease b");
    }
    if (l_k > stages[i].epochs) {
      throw ValidationError("l_k=" + std::to_string(l_k) + " exceeds the " + std::to_string(stages[i].epochs) +
                            " epochs of stage " + std::to_string(i));
    }
  }
  if (kind == PlanKind::Prune && stages.front().b != phi) {
    throw ValidationError("prune plans must start at b=phi=" + std::to_string(phi));
  }
  if (kind == PlanKind::Fixed && stages.size() != 1) throw ValidationError("fixed plans have exactly one stage");
}

StagePlan stage_for_target(double B, int epochs) { return {B, Budget::from_target(B).channels, epochs}; }

double select_lr(std::size_t stage_index, int epoch_in_stage, const TrainPlan& plan) {
  if (stage_index > 0 && epoch_in_stage < plan.l_k) return plan.base_lr * plan.gamma_boost;
  return plan.base_lr;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

const char* metrics_kind_name(MetricsRecord::Kind k) {
  switch (k) {
    case MetricsRecord::Kind::Batch: return "batch";
    case MetricsRecord::Kind::Epoch: return "epoch";
    case MetricsRecord::Kind::StageStart: return "stage_start";
    case MetricsRecord::Kind::Summary: return "summary";
  }
  return "?";
}

MetricsRecord::Kind parse_metrics_kind(const std::string& s) {
  for (auto k : {MetricsRecord::Kind::Batch, MetricsRecord::Kind::Epoch, MetricsRecord::Kind::StageStart,
                 MetricsRecord::Kind::Summary}) {
    if (s == metrics_kind_name(k)) return k;
  }
  throw FormatError("unknown metrics row kind '" + s + "'");
}

// ---- server half ----

ServerHalf::ServerHalf(const SplitModel& model, ParameterStore& params, LossWeights weights, TrainPlan plan)
    : model_(model), params_(params), weights_(weights), plan_(std::move(plan)) {
  weights_.validate();
}

double ServerHalf::current_lr() const {
  if (!stage_) throw StateError("no stage has started");
  return select_lr(*stage_, epoch_in_stage(), plan_);
}

void ServerHalf::apply_control(const wire::ControlMsg& msg) {
  using wire::ControlKind;
  switch (msg.kind) {
    case ControlKind::StageChange: {
      const std::size_t next = stage_ ? *stage_ + 1 : 0;
      if (msg.stage != next || next >= plan_.stages.size()) {
        throw ControlError("stage change to " + std::to_string(msg.stage) + " but the next stage is " +
                           std::to_string(next));
      }
      const auto& s = plan_.stages[next];
      if (msg.b != static_cast<std::uint32_t>(s.b) || msg.budget_target != static_cast<float>(s.budget_target)) {
        throw ControlError("stage " + std::to_string(next) + " budget mismatch: client B=" +
                           std::to_string(msg.budget_target) + " b=" + std::to_string(msg.b) + ", server B=" +
                           std::to_string(s.budget_target) + " b=" + std::to_string(s.b));
      }
      stage_ = next;
      epoch_ = static_cast<int>(msg.epoch);
      stage_start_epoch_ = epoch_;
      break;
    }
    case ControlKind::EndOfEpoch:
      if (!stage_ || msg.stage != *stage_) throw ControlError("end of epoch for a stage that is not running");
      if (static_cast<int>(msg.epoch) != epoch_ + 1) throw ControlError("epoch counter out of step");
      epoch_ = static_cast<int>(msg.epoch);
      break;
    case ControlKind::Shutdown:
      shutdown_ = true;
      break;
  }
}

void ServerHalf::check_message(const wire::ForwardMsg& msg) const {
  if (!stage_) throw ControlError("forward message before any stage change");
  if (msg.stage != *stage_) {
    throw ControlError("forward message for stage " + std::to_string(msg.stage) + " during stage " +
                       std::to_string(*stage_));
  }
  const int b = plan_.stages[*stage_].b;
  if (msg.b() != static_cast<std::uint32_t>(b)) {
    throw ControlError("client sent b=" + std::to_string(msg.b()) + " but stage " + std::to_string(*stage_) +
                       " uses b=" + std::to_string(b));
  }
  if (msg.phi != static_cast<std::uint32_t>(model_.phi()) || msg.height != payload_h(model_) ||
      msg.width != payload_w(model_)) {
    throw ProtocolError("forward message extents do not match the model");
  }
}

wire::BackwardMsg ServerHalf::train_step(const wire::ForwardMsg& msg) {
  check_message(msg);
  if (msg.inference) throw ProtocolError("inference message sent as a training step");
  const auto& stage = plan_.stages[*stage_];
  Tape tape;
  const Var payload = tape.leaf(wire::from_channel_major(msg.payload, msg.batch, msg.b(), msg.height, msg.width,
                                                         is_spatial(model_)));
  const Var f = tape.leaf(Tensor({static_cast<std::int64_t>(msg.phi)}, msg.f));
  const Var logits = server_forward(tape, payload, msg.indices, msg.f, model_, params_, ops::Mode::Train);
  const Var task = ops::softmax_cross_entropy(tape, logits, msg.labels);
  const Var prune = prune_loss(tape, f, stage.budget_target, weights_);
  const Var total = total_loss(tape, task, prune, weights_.epsilon);
  tape.backward(total);

  wire::BackwardMsg reply;
  reply.batch_id = msg.batch_id;
  reply.b = msg.b();
  reply.phi = msg.phi;
  reply.height = msg.height;
  reply.width = msg.width;
  reply.batch = msg.batch;
  reply.task_loss = tape.value(task).item();
  reply.prune_loss = tape.value(prune).item();
  reply.grad_payload = wire::to_channel_major(tape.grad(payload));
  reply.grad_f = tape.grad(f).storage();
  sgd_step(params_, static_cast<float>(current_lr()), static_cast<float>(plan_.weight_decay));
  return reply;
}

wire::AckMsg ServerHalf::infer(const wire::ForwardMsg& msg) {
  check_message(msg);
  Tape tape;
  const Var payload = tape.constant(wire::from_channel_major(msg.payload, msg.batch, msg.b(), msg.height,
                                                             msg.width, is_spatial(model_)));
  const Var logits = server_forward(tape, payload, msg.indices, msg.f, model_, params_, ops::Mode::Eval);
  const Tensor& out = tape.value(logits);
  wire::AckMsg ack;
  ack.predictions.reserve(msg.batch);
  for (std::int64_t n = 0; n < out.dim(0); ++n) ack.predictions.push_back(static_cast<std::int32_t>(argmax_row(out, n)));
  return ack;
}

// ---- client half ----

ClientHalf::ClientHalf(const SplitModel& model, ParameterStore& params) : model_(model), params_(params) {}

std::unique_ptr<ClientHalf::Pending> ClientHalf::forward(const Tensor& x, std::span<const std::int32_t> labels,
                                                         std::uint64_t batch_id, std::uint32_t stage, int b,
                                                         bool inference) {
  auto p = std::make_unique<Pending>();
  const Var input = p->tape.constant(x);
  const auto out = client_forward(p->tape, input, model_, params_, inference ? ops::Mode::Eval : ops::Mode::Train);
  const auto& fv = p->tape.value(out.f).storage();
  const auto indices = top_b_indices(fv, b);
  p->f = out.f;
  p->payload = ops::gather_channels(p->tape, out.l_c, indices);
  const Tensor& pv = p->tape.value(p->payload);
  p->payload_shape = pv.shape();
  p->sum_f = std::accumulate(fv.begin(), fv.end(), 0.0);

  auto& m = p->msg;
  m.batch_id = batch_id;
  m.stage = stage;
  m.phi = static_cast<std::uint32_t>(model_.phi());
  m.height = payload_h(model_);
  m.width = payload_w(model_);
  m.batch = static_cast<std::uint32_t>(x.dim(0));
  m.inference = inference;
  m.indices = indices;
  m.f = fv;
  if (!inference) m.labels.assign(labels.begin(), labels.end());
  m.payload = wire::to_channel_major(pv);
  return p;
}

void ClientHalf::apply(Pending& p, const wire::BackwardMsg& reply, double lr, double weight_decay) {
  const auto& m = p.msg;
  if (reply.batch_id != m.batch_id) {
    throw ProtocolError("gradient for batch " + std::to_string(reply.batch_id) + " while waiting for batch " +
                        std::to_string(m.batch_id));
  }
  if (reply.b != m.b() || reply.phi != m.phi || reply.height != m.height || reply.width != m.width ||
      reply.batch != m.batch || reply.grad_payload.size() != m.payload.size() || reply.grad_f.size() != m.f.size()) {
    throw ProtocolError("returned gradients do not match the shapes that were sent");
  }
  Tensor g_payload = wire::from_channel_major(reply.grad_payload, m.batch, m.b(), m.height, m.width,
                                              p.payload_shape.size() == 4);
  Tensor g_f({static_cast<std::int64_t>(m.phi)}, reply.grad_f);
  p.tape.backward({{p.payload, std::move(g_payload)}, {p.f, std::move(g_f)}});
  sgd_step(params_, static_cast<float>(lr), static_cast<float>(weight_decay));
}

// ---- exchanges ----

wire::BackwardMsg LinkExchange::train(const wire::ForwardMsg& msg) {
  link_.send(wire::encode(msg));
  return wire::decode_backward(link_.recv());
}

wire::AckMsg LinkExchange::infer(const wire::ForwardMsg& msg) {
  link_.send(wire::encode(msg));
  auto ack = wire::decode_ack(link_.recv());
  if (ack.predictions.size() != msg.batch) throw ProtocolError("prediction count does not match the batch");
  return ack;
}

void LinkExchange::control(const wire::ControlMsg& msg) {
  link_.send(wire::encode(msg));
  if (!wire::decode_ack(link_.recv()).predictions.empty()) throw ProtocolError("control ack carries predictions");
}

void DirectExchange::count(wire::MsgType type, std::uint64_t tx, std::uint64_t rx, wire::MsgType rx_type) {
  counters_.tx += tx;
  counters_.tx_by_type[static_cast<std::size_t>(type)] += tx;
  counters_.rx += rx;
  counters_.rx_by_type[static_cast<std::size_t>(rx_type)] += rx;
}

wire::BackwardMsg DirectExchange::train(const wire::ForwardMsg& msg) {
  auto reply = server_.train_step(msg);
  count(wire::MsgType::Forward, wire::forward_frame_size(msg.b(), msg.phi, msg.height, msg.width, msg.batch),
        wire::backward_frame_size(reply.b, reply.phi, reply.height, reply.width, reply.batch),
        wire::MsgType::Backward);
  return reply;
}

wire::AckMsg DirectExchange::infer(const wire::ForwardMsg& msg) {
  auto ack = server_.infer(msg);
  count(wire::MsgType::Forward, wire::forward_frame_size(msg.b(), msg.phi, msg.height, msg.width, msg.batch, true),
        wire::ack_frame_size(ack.predictions.size()), wire::MsgType::Ack);
  return ack;
}

void DirectExchange::control(const wire::ControlMsg& msg) {
  server_.apply_control(msg);
  count(wire::MsgType::Control, wire::control_frame_size(), wire::ack_frame_size(0), wire::MsgType::Ack);
}

void deprune_server_loop(ServerHalf& server, Link& link) {
  try {
    while (!server.shutdown()) {
      const auto frame = link.recv();
      const auto header = wire::decode_header(frame);
      switch (header.type) {
        case wire::MsgType::Forward: {
          const auto msg = wire::decode_forward(frame);
          if (msg.inference) {
            link.send(wire::encode(server.infer(msg)));
          } else {
            link.send(wire::encode(server.train_step(msg)));
          }
          break;
        }
        case wire::MsgType::Control:
          server.apply_control(wire::decode_control(frame));
          link.send(wire::encode(wire::AckMsg{}));
          break;
        default:
          throw ProtocolError(std::string("server does not accept ") + wire::msg_type_name(header.type) +
                              " frames");
      }
    }
  } catch (...) {
    link.close();
    throw;
  }
}

// ---- client schedule ----

double evaluate(ClientHalf& client, Exchange& exchange, int b, std::uint32_t stage, const Dataset& test,
                int batch_size, std::uint64_t first_batch_id) {
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  std::uint64_t id = first_batch_id;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(test.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto pending = client.forward(test.batch(idx), {}, id++, stage, b, true);
    const auto ack = exchange.infer(pending->msg);
    for (std::size_t i = 0; i < idx.size(); ++i) correct += ack.predictions[i] == test.labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

namespace {

[[noreturn]] void rethrow_with_progress(std::int64_t batches) {
  try {
    throw;
  } catch (const TimeoutError& e) {
    throw TimeoutError(e.what(), batches);
  } catch (const SessionError& e) {
    throw SessionError(e.what(), batches);
  }
}

}  // namespace

TrainResult run_client_schedule(ClientHalf& client, Exchange& exchange, const TrainPlan& plan, const Dataset& train,
                                const Dataset& test, const MetricsSink& sink, const TrainHooks& hooks) {
  train.validate();
  test.validate();
  const auto batch = static_cast<std::size_t>(plan.batch_size);
  const std::size_t batches_per_epoch = train.size() / batch;
  if (batches_per_epoch == 0) throw ValidationError("training set is smaller than one batch");

  TrainResult result;
  StageState& st = result.state;
  std::uint64_t next_id = 0;
  const auto t0 = Clock::now();
  auto emit = [&](MetricsRecord r) {
    r.wall_ms = ms_since(t0);
    if (sink) sink(r);
  };
  auto eval = [&](std::size_t stage_index) {
    const int b = plan.stages[stage_index].b;
    const double acc =
        evaluate(client, exchange, b, static_cast<std::uint32_t>(stage_index), test, plan.eval_batch_size, next_id);
    next_id += (test.size() + plan.eval_batch_size - 1) / plan.eval_batch_size;
    return acc;
  };

  std::vector<std::size_t> idx(batch);
  try {
    for (std::size_t s = 0; s < plan.stages.size(); ++s) {
      const auto& stage = plan.stages[s];
      st.stage = s;
      exchange.control({wire::ControlKind::StageChange, static_cast<std::uint32_t>(s),
                        static_cast<float>(stage.budget_target), static_cast<std::uint32_t>(stage.b),
                        static_cast<std::uint32_t>(st.global_epoch)});
      if (hooks.on_stage_begin) hooks.on_stage_begin(s);
      if (hooks.eval_at_stage_start && s > 0) {
        MetricsRecord r;
        r.kind = MetricsRecord::Kind::StageStart;
        r.epoch = st.global_epoch;
        r.stage = static_cast<int>(s);
        r.stage_b = stage.b;
        r.budget_target = stage.budget_target;
        r.test_accuracy = eval(s);
        r.cum_tx_bytes = st.cum_tx;
        r.cum_rx_bytes = st.cum_rx;
        emit(r);
      }
      for (int e = 0; e < stage.epochs; ++e) {
        st.epoch_in_stage = e;
        st.lr = select_lr(s, e, plan);
        const auto order = epoch_order(train.size(), plan.seed, st.global_epoch);
        const auto te = Clock::now();
        double sum_f = 0.0;
        for (std::size_t k = 0; k < batches_per_epoch; ++k) {
          std::copy_n(order.begin() + static_cast<std::ptrdiff_t>(k * batch), batch, idx.begin());
          const auto tb = Clock::now();
          const auto labels = train.batch_labels(idx);
          auto pending = client.forward(train.batch(idx), labels, next_id++, static_cast<std::uint32_t>(s), stage.b,
                                        false);
          const auto before = exchange.counters();
          const auto reply = exchange.train(pending->msg);
          const auto after = exchange.counters();
          client.apply(*pending, reply, st.lr, plan.weight_decay);
          st.cum_tx += after.tx - before.tx;
          st.cum_rx += after.rx - before.rx;
          ++st.batches_completed;
          sum_f = pending->sum_f;

          MetricsRecord r;
          r.kind = MetricsRecord::Kind::Batch;
          r.epoch = st.global_epoch;
          r.stage = static_cast<int>(s);
          r.stage_b = stage.b;
          r.budget_target = stage.budget_target;
          r.batch = static_cast<std::int64_t>(k);
          r.task_loss = reply.task_loss;
          r.prune_loss = reply.prune_loss;
          r.sum_f = pending->sum_f;
          r.cum_tx_bytes = st.cum_tx;
          r.cum_rx_bytes = st.cum_rx;
          r.samples_per_sec = static_cast<double>(batch) / std::max(1e-9, ms_since(tb) / 1000.0);
          emit(r);
        }
        const double train_ms = ms_since(te);
        ++st.global_epoch;
        exchange.control({wire::ControlKind::EndOfEpoch, static_cast<std::uint32_t>(s),
                          static_cast<float>(stage.budget_target), static_cast<std::uint32_t>(stage.b),
                          static_cast<std::uint32_t>(st.global_epoch)});
        const double acc = eval(s);
        result.epoch_accuracy.push_back(acc);

        MetricsRecord r;
        r.kind = MetricsRecord::Kind::Epoch;
        r.epoch = st.global_epoch - 1;
        r.stage = static_cast<int>(s);
        r.stage_b = stage.b;
        r.budget_target = stage.budget_target;
        r.sum_f = sum_f;
        r.test_accuracy = acc;
        r.cum_tx_bytes = st.cum_tx;
        r.cum_rx_bytes = st.cum_rx;
        r.samples_per_sec = static_cast<double>(batches_per_epoch * batch) / std::max(1e-9, train_ms / 1000.0);
        emit(r);
      }
      if (hooks.on_stage_end) hooks.on_stage_end(s);
    }
    exchange.control({wire::ControlKind::Shutdown, 0, 0.0f, 0, static_cast<std::uint32_t>(st.global_epoch)});
  } catch (const SessionError&) {
    rethrow_with_progress(st.batches_completed);
  }

  result.final_accuracy = result.epoch_accuracy.empty() ? 0.0 : result.epoch_accuracy.back();
  result.counters = exchange.counters();
  result.wall_ms = ms_since(t0);
  MetricsRecord r;
  r.kind = MetricsRecord::Kind::Summary;
  r.epoch = st.global_epoch;
  r.stage = static_cast<int>(st.stage);
  r.stage_b = plan.stages.back().b;
  r.budget_target = plan.stages.back().budget_target;
  r.test_accuracy = result.final_accuracy;
  r.cum_tx_bytes = result.counters.tx;
  r.cum_rx_bytes = result.counters.rx;
  r.samples_per_sec = static_cast<double>(st.batches_completed) * static_cast<double>(batch) /
                      std::max(1e-9, result.wall_ms / 1000.0);
  if (sink) {
    r.wall_ms = result.wall_ms;
    sink(r);
  }
  return result;
}

TrainResult run_loopback(const SplitModel& model, SplitParams& params, const LossWeights& weights,
                         const TrainPlan& plan, PlanKind kind, const Dataset& train, const Dataset& test,
                         const MetricsSink& sink) {
  plan.validate(kind, model.phi());
  auto [client_link, server_link] = loopback_link();
  ServerHalf server(model, params.server, weights, plan);
  std::exception_ptr server_error;
  std::thread worker([&, link = server_link.get()] {
    try {
      deprune_server_loop(server, *link);
    } catch (...) {
      server_error = std::current_exception();
    }
  });
  ClientHalf client(model, params.client);
  LinkExchange exchange(*client_link);
  TrainResult result;
  std::exception_ptr client_error;
  try {
    result = run_client_schedule(client, exchange, plan, train, test, sink);
  } catch (...) {
    client_error = std::current_exception();
    client_link->close();
  }
  worker.join();
  if (server_error) std::rethrow_exception(server_error);
  if (client_error) std::rethrow_exception(client_error);
  return result;
}

TrainResult train_local(const SplitModel& model, SplitParams& params, const LossWeights& weights,
                        const TrainPlan& plan, PlanKind kind, const Dataset& train, const Dataset& test,
                        const MetricsSink& sink, const TrainHooks& hooks) {
  plan.validate(kind, model.phi());
  ServerHalf server(model, params.server, weights, plan);
  ClientHalf client(model, params.client);
  DirectExchange exchange(server);
  return run_client_schedule(client, exchange, plan, train, test, sink, hooks);
}

double evaluate(const SplitModel& model, SplitParams& params, int b, const Dataset& test, int batch_size) {
  TrainPlan plan;
  plan.stages = {{static_cast<double>(b), b, 1}};
  ServerHalf server(model, params.server, LossWeights{}, plan);
  server.apply_control({wire::ControlKind::StageChange, 0, static_cast<float>(b), static_cast<std::uint32_t>(b), 0});
  ClientHalf client(model, params.client);
  DirectExchange exchange(server);
  return evaluate(client, exchange, b, 0, test, batch_size);
}

// ---- prune ----

PruneResult prune_train(const SplitModel& model, SplitParams& params, const LossWeights& weights,
                        const TrainPlan& plan, const Dataset& train, const Dataset& test,
                        const std::string& checkpoint_dir, const MetricsSink& sink) {
  if (train.size() == 0 || test.size() == 0) throw ValidationError("prune training needs data");
  plan.validate(PlanKind::Prune, model.phi());
  std::filesystem::create_directories(checkpoint_dir);
  PruneResult out;
  TrainHooks hooks;
  hooks.eval_at_stage_start = true;
  hooks.on_stage_end = [&](std::size_t s) {
    const int b = plan.stages[s].b;
    const auto path = (std::filesystem::path(checkpoint_dir) / ("theta_b" + std::to_string(b) + ".ckpt")).string();
    save_split_checkpoint(path, params);
    out.trained.checkpoints[b] = path;
    if (!model.compression.bypass) {
      auto& f_hat = params.client.get(names::kFilter);
      f_hat.value = reset_prune(f_hat.value, plan.reset_threshold, plan.seed + s);
    }
  };
  // Stage accuracy is the last epoch row of the stage, measured before reset.
  MetricsSink tap = [&](const MetricsRecord& r) {
    if (r.kind == MetricsRecord::Kind::Epoch) out.trained.accuracy[r.stage_b] = r.test_accuracy;
    if (sink) sink(r);
  };
  out.run = train_local(model, params, weights, plan, PlanKind::Prune, train, test, tap, hooks);
  return out;
}

// ---- unsplit ----

double evaluate_unsplit(const LayerList& layers, ParameterStore& params, const Dataset& test, int batch_size) {
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < test.size(); start += static_cast<std::size_t>(batch_size)) {
    const auto end = std::min(test.size(), start + static_cast<std::size_t>(batch_size));
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Tape tape;
    const Var x = tape.constant(test.batch(idx));
    const Var logits = forward_layers(tape, x, layers, 0, layers.size(), params, ops::Mode::Eval);
    const Tensor& out = tape.value(logits);
    for (std::size_t i = 0; i < idx.size(); ++i)
      correct += argmax_row(out, static_cast<std::int64_t>(i)) == test.labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

TrainResult train_unsplit(const LayerList& layers, ParameterStore& params, const TrainPlan& plan,
                          const Dataset& train, const Dataset& test, const MetricsSink& sink) {
  train.validate();
  test.validate();
  if (plan.stages.empty()) throw ValidationError("plan has no stages");
  const auto batch = static_cast<std::size_t>(plan.batch_size);
  const std::size_t batches_per_epoch = train.size() / batch;
  if (batches_per_epoch == 0) throw ValidationError("training set is smaller than one batch");
  TrainResult result;
  StageState& st = result.state;
  const auto t0 = Clock::now();
  std::vector<std::size_t> idx(batch);
  for (std::size_t s = 0; s < plan.stages.size(); ++s) {
    st.stage = s;
    for (int e = 0; e < plan.stages[s].epochs; ++e) {
      st.epoch_in_stage = e;
      st.lr = select_lr(s, e, plan);
      const auto order = epoch_order(train.size(), plan.seed, st.global_epoch);
      const auto te = Clock::now();
      for (std::size_t k = 0; k < batches_per_epoch; ++k) {
        std::copy_n(order.begin() + static_cast<std::ptrdiff_t>(k * batch), batch, idx.begin());
        const auto labels = train.batch_labels(idx);
        Tape tape;
        const Var x = tape.constant(train.batch(idx));
        const Var logits = forward_layers(tape, x, layers, 0, layers.size(), params, ops::Mode::Train);
        const Var loss = ops::softmax_cross_entropy(tape, logits, labels);
        tape.backward(loss);
        sgd_step(params, static_cast<float>(st.lr), static_cast<float>(plan.weight_decay));
        ++st.batches_completed;
        if (sink) {
          MetricsRecord r;
          r.kind = MetricsRecord::Kind::Batch;
          r.wall_ms = ms_since(t0);
          r.epoch = st.global_epoch;
          r.stage = static_cast<int>(s);
          r.batch = static_cast<std::int64_t>(k);
          r.task_loss = tape.value(loss).item();
          sink(r);
        }
      }
      const double train_ms = ms_since(te);
      const double acc = evaluate_unsplit(layers, params, test, plan.eval_batch_size);
      result.epoch_accuracy.push_back(acc);
      if (sink) {
        MetricsRecord r;
        r.kind = MetricsRecord::Kind::Epoch;
        r.wall_ms = ms_since(t0);
        r.epoch = st.global_epoch;
        r.stage = static_cast<int>(s);
        r.test_accuracy = acc;
        r.samples_per_sec = static_cast<double>(batches_per_epoch * batch) / std::max(1e-9, train_ms / 1000.0);
        sink(r);
      }
      ++st.global_epoch;
    }
  }
  result.final_accuracy = result.epoch_accuracy.back();
  result.wall_ms = ms_since(t0);
  if (sink) {
    MetricsRecord r;
    r.kind = MetricsRecord::Kind::Summary;
    r.wall_ms = result.wall_ms;
    r.epoch = st.global_epoch;
    r.stage = static_cast<int>(st.stage);
    r.test_accuracy = result.final_accuracy;
    r.samples_per_sec = static_cast<double>(st.batches_completed * batch) / std::max(1e-9, result.wall_ms / 1000.0);
    sink(r);
  }
  return result;
}

}  // namespace splitstream

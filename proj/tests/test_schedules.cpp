#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <thread>

#include "splitstream/compression.hpp"
#include "splitstream/data.hpp"
#include "splitstream/errors.hpp"
#include "splitstream/harness.hpp"
#include "splitstream/link.hpp"
#include "splitstream/model.hpp"
#include "splitstream/schedules.hpp"
#include "splitstream/wire.hpp"

using namespace splitstream;

namespace {

TrainPlan two_stage_plan() {
  TrainPlan p;
  p.stages = {{4, 4, 3}, {16, 16, 3}};
  p.l_k = 2;
  p.gamma_boost = 5.0;
  p.base_lr = 0.01;
  return p;
}

// Small MLP split on Gaussian blobs: fast enough for many end-to-end runs.
struct BlobSetup {
  DatasetSplit data;
  LayerList layers;
  SplitModel model;

  explicit BlobSetup(std::size_t n = 2, bool bypass = false, int per_class = 64) {
    data.train = synth_dataset(3, 8, per_class, 11);
    data.test = synth_dataset(3, 8, 20, 12);
    layers = build_mlp({8, 16, 12, 3});
    CompressionConfig cc;
    cc.bypass = bypass;
    model = split_at(layers, n, cc, {8});
  }
};

MetricsSink into(std::vector<MetricsRecord>& rows) {
  return [&rows](const MetricsRecord& r) { rows.push_back(r); };
}

std::vector<MetricsRecord> without_wall_clock(std::vector<MetricsRecord> rows) {
  for (auto& r : rows) {
    r.wall_ms = 0;
    r.samples_per_sec = 0;
  }
  return rows;
}

}  // namespace

// ---- plans and learning rate ----

TEST(SelectLr, BoostsOnlyEarlyEpochsOfLaterStages) {
  const auto p = two_stage_plan();
  EXPECT_EQ(select_lr(0, 0, p), 0.01);
  EXPECT_EQ(select_lr(0, 1, p), 0.01);
  EXPECT_EQ(select_lr(0, 2, p), 0.01);
  EXPECT_EQ(select_lr(1, 0, p), 0.05);
  EXPECT_EQ(select_lr(1, 1, p), 0.05);
  EXPECT_EQ(select_lr(1, 2, p), 0.01);
}

TEST(SelectLr, ZeroBoostWindow) {
  auto p = two_stage_plan();
  p.l_k = 0;
  EXPECT_EQ(select_lr(1, 0, p), p.base_lr);
}

TEST(TrainPlan, DepruneMustIncrease) {
  auto p = two_stage_plan();
  EXPECT_NO_THROW(p.validate(PlanKind::Deprune, 16));
  std::swap(p.stages[0], p.stages[1]);
  EXPECT_THROW(p.validate(PlanKind::Deprune, 16), ValidationError);
}

TEST(TrainPlan, PruneStartsAtPhiAndDecreases) {
  TrainPlan p;
  p.stages = {{16, 16, 3}, {4, 4, 2}};
  EXPECT_NO_THROW(p.validate(PlanKind::Prune, 16));
  p.stages[0] = {12, 12, 3};
  EXPECT_THROW(p.validate(PlanKind::Prune, 16), ValidationError);
}

TEST(TrainPlan, BudgetOutOfRange) {
  TrainPlan p;
  p.stages = {{32, 32, 1}};
  EXPECT_THROW(p.validate(PlanKind::Fixed, 16), ValidationError);
}

TEST(TrainPlan, BoostWindowLongerThanStage) {
  auto p = two_stage_plan();
  p.l_k = 4;
  EXPECT_THROW(p.validate(PlanKind::Deprune, 16), ValidationError);
}

TEST(TrainPlan, TotalEpochs) { EXPECT_EQ(two_stage_plan().total_epochs(), 6); }

TEST(StageForTarget, RoundsBudget) {
  EXPECT_EQ(stage_for_target(4.4, 2).b, 4);
  EXPECT_EQ(stage_for_target(4.6, 2).b, 5);
  EXPECT_EQ(stage_for_target(0.2, 2).b, 1);
}

// ---- filter reset ----

TEST(ResetPrune, RedrawsExactlyTheSaturatedChannels) {
  // sigmoid(x) > 0.5 iff x > 0.
  Tensor f_hat({6}, std::vector<float>{-2.0f, 3.0f, -0.1f, 0.4f, 0.0f, 5.0f});
  const auto out = reset_prune(f_hat, 0.5, 99);
  for (std::size_t k = 0; k < 6; ++k) {
    if (f_hat[k] > 0.0f)
      EXPECT_NE(out[k], f_hat[k]) << k;
    else
      EXPECT_EQ(out[k], f_hat[k]) << k;
  }
}

TEST(ResetPrune, SeedDeterministic) {
  std::mt19937_64 rng(3);
  Tensor f_hat({32});
  std::normal_distribution<float> d(0.0f, 2.0f);
  for (auto& v : f_hat.data()) v = d(rng);
  const auto a = reset_prune(f_hat, 0.5, 7);
  const auto b = reset_prune(f_hat, 0.5, 7);
  const auto c = reset_prune(f_hat, 0.5, 8);
  EXPECT_EQ(a.storage(), b.storage());
  EXPECT_NE(a.storage(), c.storage());
}

TEST(ResetPrune, HighThresholdKeepsEverything) {
  Tensor f_hat({4}, std::vector<float>{1.0f, 2.0f, 3.0f, 4.0f});
  EXPECT_EQ(reset_prune(f_hat, 1.0, 1).storage(), f_hat.storage());
}

// ---- epoch order ----

TEST(EpochOrder, PermutationAndDeterminism) {
  const auto a = epoch_order(100, 5, 0);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
  EXPECT_EQ(a, epoch_order(100, 5, 0));
  EXPECT_NE(a, epoch_order(100, 5, 1));
  EXPECT_NE(a, epoch_order(100, 6, 0));
}

// ---- server and client halves ----

TEST(ServerHalf, RejectsWrongStageChange) {
  BlobSetup s;
  auto params = init_split_params(s.model, 1);
  TrainPlan plan;
  plan.stages = {{4, 4, 1}, {12, 12, 1}};
  ServerHalf server(s.model, params.server, {}, plan);
  using wire::ControlKind;
  EXPECT_THROW(server.apply_control({ControlKind::StageChange, 1, 12.0f, 12, 0}), ControlError);
  EXPECT_THROW(server.apply_control({ControlKind::StageChange, 0, 4.0f, 5, 0}), ControlError);
  EXPECT_THROW(server.apply_control({ControlKind::StageChange, 0, 4.5f, 4, 0}), ControlError);
  EXPECT_NO_THROW(server.apply_control({ControlKind::StageChange, 0, 4.0f, 4, 0}));
  EXPECT_THROW(server.apply_control({ControlKind::EndOfEpoch, 0, 4.0f, 4, 2}), ControlError);
  EXPECT_NO_THROW(server.apply_control({ControlKind::EndOfEpoch, 0, 4.0f, 4, 1}));
}

TEST(ServerHalf, RejectsForwardWithWrongBudget) {
  BlobSetup s;
  auto params = init_split_params(s.model, 1);
  TrainPlan plan;
  plan.stages = {{4, 4, 1}};
  ServerHalf server(s.model, params.server, {}, plan);
  ClientHalf client(s.model, params.client);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto labels = s.data.train.batch_labels(idx);
  auto p = client.forward(s.data.train.batch(idx), labels, 0, 0, 4, false);
  EXPECT_THROW(server.train_step(p->msg), ControlError);  // no stage yet
  server.apply_control({wire::ControlKind::StageChange, 0, 4.0f, 4, 0});
  auto wrong = client.forward(s.data.train.batch(idx), labels, 1, 0, 5, false);
  EXPECT_THROW(server.train_step(wrong->msg), ControlError);
  EXPECT_NO_THROW(server.train_step(p->msg));
}

TEST(ClientHalf, RejectsMismatchedBatchId) {
  BlobSetup s;
  auto params = init_split_params(s.model, 1);
  TrainPlan plan;
  plan.stages = {{4, 4, 1}};
  ServerHalf server(s.model, params.server, {}, plan);
  server.apply_control({wire::ControlKind::StageChange, 0, 4.0f, 4, 0});
  ClientHalf client(s.model, params.client);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  const auto labels = s.data.train.batch_labels(idx);
  auto p = client.forward(s.data.train.batch(idx), labels, 7, 0, 4, false);
  auto reply = server.train_step(p->msg);
  reply.batch_id = 8;
  EXPECT_THROW(client.apply(*p, reply, 0.01, 0.0), ProtocolError);
  reply.batch_id = 7;
  reply.grad_payload.pop_back();
  EXPECT_THROW(client.apply(*p, reply, 0.01, 0.0), ProtocolError);
}

TEST(ClientHalf, SendsTopBChannelsOfF) {
  BlobSetup s;
  auto params = init_split_params(s.model, 4);
  ClientHalf client(s.model, params.client);
  const std::vector<std::size_t> idx{0, 1};
  auto p = client.forward(s.data.train.batch(idx), s.data.train.batch_labels(idx), 0, 0, 3, false);
  EXPECT_EQ(p->msg.indices, top_b_indices(p->msg.f, 3));
  EXPECT_EQ(p->msg.payload.size(), 3u * 2u);
  EXPECT_EQ(p->msg.labels.size(), 2u);
  auto q = client.forward(s.data.train.batch(idx), {}, 1, 0, 3, true);
  EXPECT_TRUE(q->msg.labels.empty());
}

// ---- losses reported per batch ----

TEST(Training, LoggedPruneLossMatchesLoggedSumF) {
  BlobSetup s;
  auto params = init_split_params(s.model, 2);
  TrainPlan plan;
  plan.stages = {{3, 3, 1}};
  plan.base_lr = 0.05;
  LossWeights w{0.5, 0.5, 0.1};
  std::vector<MetricsRecord> rows;
  train_local(s.model, params, w, plan, PlanKind::Fixed, s.data.train, s.data.test, into(rows));
  int checked = 0;
  for (const auto& r : rows) {
    if (r.kind != MetricsRecord::Kind::Batch) continue;
    const std::vector<float> one{static_cast<float>(r.sum_f)};
    const double expect = prune_loss_value(one, r.budget_target, w);
    EXPECT_NEAR(r.prune_loss, expect, 1e-4 * std::max(1.0, expect));
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

TEST(Training, ZeroEpsilonIgnoresPruneLoss) {
  // With epsilon 0 the budget target has no effect on any update.
  BlobSetup s;
  TrainPlan a;
  a.stages = {{3, 3, 1}};
  a.base_lr = 0.05;
  TrainPlan b = a;
  b.stages[0].budget_target = 3.4;
  LossWeights w{1.0, 0.5, 0.0};
  auto pa = init_split_params(s.model, 3);
  auto pb = init_split_params(s.model, 3);
  train_local(s.model, pa, w, a, PlanKind::Fixed, s.data.train, s.data.test, {});
  train_local(s.model, pb, w, b, PlanKind::Fixed, s.data.train, s.data.test, {});
  for (auto* p : pa.client.all()) EXPECT_EQ(p->value.storage(), pb.client.get(p->name).value.storage()) << p->name;
  for (auto* p : pa.server.all()) EXPECT_EQ(p->value.storage(), pb.server.get(p->name).value.storage()) << p->name;
}

// ---- byte accounting ----

TEST(Training, FixedBudgetBytesFollowFrameSizes) {
  BlobSetup s;
  auto params = init_split_params(s.model, 5);
  TrainPlan plan;
  const int phi = static_cast<int>(s.model.phi());
  plan.stages = {{static_cast<double>(phi), phi, 2}};
  plan.batch_size = 16;
  std::vector<MetricsRecord> rows;
  const auto res = run_loopback(s.model, params, {}, plan, PlanKind::Fixed, s.data.train, s.data.test, into(rows));
  const std::uint64_t batches = s.data.train.size() / 16;
  const auto fwd = wire::forward_frame_size(phi, phi, 1, 1, 16);
  const auto bwd = wire::backward_frame_size(phi, phi, 1, 1, 16);
  std::vector<MetricsRecord> epochs;
  for (const auto& r : rows)
    if (r.kind == MetricsRecord::Kind::Epoch) epochs.push_back(r);
  ASSERT_EQ(epochs.size(), 2u);
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    EXPECT_EQ(epochs[e].cum_tx_bytes, (e + 1) * batches * fwd);
    EXPECT_EQ(epochs[e].cum_rx_bytes, (e + 1) * batches * bwd);
  }
  // The summary carries the link totals, which add control and evaluation frames.
  const auto& summary = rows.back();
  ASSERT_EQ(summary.kind, MetricsRecord::Kind::Summary);
  EXPECT_EQ(summary.cum_tx_bytes, res.counters.tx);
  EXPECT_EQ(summary.cum_rx_bytes, res.counters.rx);
  EXPECT_GT(res.counters.tx, 2 * batches * fwd);
}

TEST(Training, CumulativeBytesNondecreasing) {
  BlobSetup s;
  auto params = init_split_params(s.model, 5);
  TrainPlan plan;
  plan.stages = {{3, 3, 1}, {12, 12, 1}};
  plan.l_k = 1;
  std::vector<MetricsRecord> rows;
  run_loopback(s.model, params, {}, plan, PlanKind::Deprune, s.data.train, s.data.test, into(rows));
  std::uint64_t tx = 0, rx = 0;
  for (const auto& r : rows) {
    EXPECT_GE(r.cum_tx_bytes, tx);
    EXPECT_GE(r.cum_rx_bytes, rx);
    tx = r.cum_tx_bytes;
    rx = r.cum_rx_bytes;
  }
}

TEST(Training, DirectAndLoopbackAgree) {
  BlobSetup s;
  TrainPlan plan;
  plan.stages = {{3, 3, 1}, {12, 12, 1}};
  plan.l_k = 1;
  auto pa = init_split_params(s.model, 8);
  auto pb = init_split_params(s.model, 8);
  std::vector<MetricsRecord> ra, rb;
  const auto a = run_loopback(s.model, pa, {}, plan, PlanKind::Deprune, s.data.train, s.data.test, into(ra));
  const auto b = train_local(s.model, pb, {}, plan, PlanKind::Deprune, s.data.train, s.data.test, into(rb));
  EXPECT_EQ(without_wall_clock(ra), without_wall_clock(rb));
  EXPECT_EQ(a.counters.tx, b.counters.tx);
  EXPECT_EQ(a.counters.rx, b.counters.rx);
}

// ---- end-to-end oracles ----

TEST(Training, SplitMatchesUnsplitWhenModuleIsBypassed) {
  BlobSetup s(2, /*bypass=*/true);
  const int phi = static_cast<int>(s.model.phi());
  TrainPlan plan;
  plan.stages = {{static_cast<double>(phi), phi, 1}};
  plan.base_lr = 0.05;
  plan.batch_size = 16;
  auto split = init_split_params(s.model, 21);
  ParameterStore whole;
  std::mt19937_64 rng(21);
  init_layer_params(s.layers, 0, s.layers.size(), whole, rng);
  const ParameterStore start = whole;
  run_loopback(s.model, split, {1.0, 0.5, 0.1}, plan, PlanKind::Fixed, s.data.train, s.data.test, {});
  train_unsplit(s.layers, whole, plan, s.data.train, s.data.test, {});
  double worst = 0.0;
  std::size_t compared = 0;
  for (auto* p : whole.all()) {
    const Parameter* q = split.client.find(p->name);
    if (!q) q = split.server.find(p->name);
    ASSERT_NE(q, nullptr) << p->name;
    const auto& init = start.get(p->name).value;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      // Compare the updates, not just the end points.
      worst = std::max(worst, std::abs(double(p->value[i] - init[i]) - double(q->value[i] - init[i])));
    }
    ++compared;
  }
  EXPECT_EQ(compared, whole.size());
  EXPECT_LE(worst, 1e-4);
}

TEST(Training, UntrainedModelNearChance) {
  BlobSetup s;
  auto params = init_split_params(s.model, 30);
  const double acc = evaluate(s.model, params, static_cast<int>(s.model.phi()), s.data.test);
  EXPECT_LT(acc, 0.75);
}

TEST(Training, LearnsBlobs) {
  BlobSetup s(2, false, 150);
  auto params = init_split_params(s.model, 31);
  TrainPlan plan;
  plan.stages = {{3, 3, 3}, {12, 12, 3}};
  plan.base_lr = 0.05;
  plan.batch_size = 16;
  const auto res = train_local(s.model, params, {1.0, 0.5, 0.1}, plan, PlanKind::Deprune, s.data.train, s.data.test,
                               {});
  EXPECT_GT(res.final_accuracy, 0.85);
}

TEST(Training, EvaluateMatchesPerBudgetForwarding) {
  BlobSetup s;
  auto params = init_split_params(s.model, 9);
  const int phi = static_cast<int>(s.model.phi());
  TrainPlan plan;
  plan.stages = {{static_cast<double>(phi), phi, 1}};
  ServerHalf server(s.model, params.server, {}, plan);
  server.apply_control({wire::ControlKind::StageChange, 0, static_cast<float>(phi), static_cast<std::uint32_t>(phi), 0});
  ClientHalf client(s.model, params.client);
  auto [cl, sl] = loopback_link();
  std::thread worker([&, link = sl.get()] {
    // A fresh server session for the inference-only stream.
    ServerHalf srv(s.model, params.server, {}, plan);
    deprune_server_loop(srv, *link);
  });
  LinkExchange ex(*cl);
  ex.control({wire::ControlKind::StageChange, 0, static_cast<float>(phi), static_cast<std::uint32_t>(phi), 0});
  const double over_link = evaluate(client, ex, phi, 0, s.data.test, 7);
  ex.control({wire::ControlKind::Shutdown, 0, 0.0f, 0, 0});
  worker.join();
  EXPECT_EQ(over_link, evaluate(s.model, params, phi, s.data.test, 100));
}

TEST(Training, LoopbackIsDeterministic) {
  BlobSetup s;
  TrainPlan plan;
  plan.stages = {{3, 3, 2}, {12, 12, 2}};
  std::vector<MetricsRecord> ra, rb;
  auto pa = init_split_params(s.model, 40);
  auto pb = init_split_params(s.model, 40);
  run_loopback(s.model, pa, {1.0, 0.5, 0.1}, plan, PlanKind::Deprune, s.data.train, s.data.test, into(ra));
  run_loopback(s.model, pb, {1.0, 0.5, 0.1}, plan, PlanKind::Deprune, s.data.train, s.data.test, into(rb));
  EXPECT_EQ(without_wall_clock(ra), without_wall_clock(rb));
}

TEST(Training, TcpMatchesLoopback) {
  BlobSetup s;
  TrainPlan plan;
  plan.stages = {{3, 3, 1}, {12, 12, 1}};
  plan.l_k = 1;
  const LossWeights w{1.0, 0.5, 0.1};
  std::vector<MetricsRecord> loop_rows, tcp_rows;
  auto pl = init_split_params(s.model, 50);
  const auto loop = run_loopback(s.model, pl, w, plan, PlanKind::Deprune, s.data.train, s.data.test, into(loop_rows));

  auto pt = init_split_params(s.model, 50);
  Listener listener({"127.0.0.1", 0});
  std::exception_ptr server_error;
  std::thread worker([&] {
    try {
      auto link = listener.accept();
      ServerHalf server(s.model, pt.server, w, plan);
      deprune_server_loop(server, *link);
    } catch (...) {
      server_error = std::current_exception();
    }
  });
  auto link = link_connect({"127.0.0.1", listener.port()});
  ClientHalf client(s.model, pt.client);
  LinkExchange ex(*link);
  const auto tcp = run_client_schedule(client, ex, plan, s.data.train, s.data.test, into(tcp_rows));
  worker.join();
  ASSERT_FALSE(server_error);
  EXPECT_EQ(without_wall_clock(loop_rows), without_wall_clock(tcp_rows));
  EXPECT_EQ(loop.counters.tx, tcp.counters.tx);
  EXPECT_EQ(loop.counters.rx, tcp.counters.rx);
}

TEST(Training, ServerDisconnectIsSessionError) {
  BlobSetup s;
  auto params = init_split_params(s.model, 60);
  TrainPlan plan;
  plan.stages = {{3, 3, 2}};
  auto [cl, sl] = loopback_link();
  std::thread worker([&, link = sl.get()] {
    ServerHalf server(s.model, params.server, {}, plan);
    try {
      server.apply_control(wire::decode_control(link->recv()));
      link->send(wire::encode(wire::AckMsg{}));
      for (int i = 0; i < 3; ++i) link->send(wire::encode(server.train_step(wire::decode_forward(link->recv()))));
    } catch (...) {
    }
    link->close();
  });
  ClientHalf client(s.model, params.client);
  LinkExchange ex(*cl);
  try {
    run_client_schedule(client, ex, plan, s.data.train, s.data.test, {});
    ADD_FAILURE() << "expected a session error";
  } catch (const SessionError& e) {
    EXPECT_EQ(e.batches_completed(), 3);
  }
  worker.join();
}

// ---- prune ----

TEST(Prune, CheckpointsReproduceStageAccuracy) {
  BlobSetup s(2, false, 100);
  const auto dir = std::filesystem::temp_directory_path() / "splitstream_prune_test";
  std::filesystem::remove_all(dir);
  auto params = init_split_params(s.model, 70);
  TrainPlan plan;
  const int phi = static_cast<int>(s.model.phi());
  plan.stages = {{static_cast<double>(phi), phi, 2}, {6, 6, 2}, {2, 2, 2}};
  plan.base_lr = 0.05;
  plan.batch_size = 16;
  std::vector<MetricsRecord> rows;
  const auto res = prune_train(s.model, params, {1.0, 0.5, 0.1}, plan, s.data.train, s.data.test, dir.string(),
                               into(rows));
  ASSERT_EQ(res.trained.checkpoints.size(), 3u);
  for (const auto& [b, path] : res.trained.checkpoints) {
    auto loaded = load_split_checkpoint(path);
    EXPECT_DOUBLE_EQ(evaluate(s.model, loaded, b, s.data.test, plan.eval_batch_size), res.trained.accuracy.at(b))
        << "b=" << b;
  }
  int stage_starts = 0;
  for (const auto& r : rows) stage_starts += r.kind == MetricsRecord::Kind::StageStart;
  EXPECT_EQ(stage_starts, 2);
  std::filesystem::remove_all(dir);
}

TEST(Prune, ResetsSaturatedFilterAfterEachStage) {
  BlobSetup s;
  const auto dir = std::filesystem::temp_directory_path() / "splitstream_prune_reset";
  std::filesystem::remove_all(dir);
  auto params = init_split_params(s.model, 71);
  TrainPlan plan;
  const int phi = static_cast<int>(s.model.phi());
  plan.stages = {{static_cast<double>(phi), phi, 1}, {4, 4, 1}};
  plan.l_k = 1;
  const auto res = prune_train(s.model, params, {}, plan, s.data.train, s.data.test, dir.string(), {});
  // Checkpoints hold the filter before the reset; the live store holds it after.
  const auto last = load_split_checkpoint(res.trained.checkpoints.at(4));
  const auto& saved = last.client.get(names::kFilter).value;
  const auto expect = reset_prune(saved, plan.reset_threshold, plan.seed + 1);
  EXPECT_EQ(params.client.get(names::kFilter).value.storage(), expect.storage());
  std::filesystem::remove_all(dir);
}

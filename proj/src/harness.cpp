#include "splitstream/harness.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "splitstream/errors.hpp"

namespace splitstream {

namespace pt = boost::property_tree;

// ---- names ----

const char* arm_name(Arm a) {
  switch (a) {
    case Arm::NoCompression: return "no-compression";
    case Arm::HighCompression: return "high-compression";
    case Arm::Deprune: return "deprune";
    case Arm::Prune: return "prune";
    case Arm::FromScratch: return "from-scratch";
    case Arm::Unsplit: return "unsplit";
  }
  return "?";
}

Arm parse_arm(const std::string& s) {
  for (auto a : {Arm::NoCompression, Arm::HighCompression, Arm::Deprune, Arm::Prune, Arm::FromScratch, Arm::Unsplit})
    if (s == arm_name(a)) return a;
  throw ValidationError("unknown arm '" + s + "'");
}

const char* transport_name(Transport t) {
  switch (t) {
    case Transport::Loopback: return "loopback";
    case Transport::Tcp: return "tcp";
    case Transport::Local: return "local";
  }
  return "?";
}

Transport parse_transport(const std::string& s) {
  for (auto t : {Transport::Loopback, Transport::Tcp, Transport::Local})
    if (s == transport_name(t)) return t;
  throw ValidationError("unknown transport '" + s + "'");
}

Role parse_role(const std::string& s) {
  if (s == "loopback") return Role::Loopback;
  if (s == "client") return Role::Client;
  if (s == "server") return Role::Server;
  throw ValidationError("unknown role '" + s + "'");
}

// ---- config ----

ExperimentConfig::ExperimentConfig() {
  dataset.kind = DatasetKind::SyntheticImages;
  dataset.train_per_class = 500;
  dataset.test_per_class = 250;
  dataset.noise = 0.2;
  plan.stages = {{4, 4, 6}, {kBudgetPhi, 0, 4}};
  plan.base_lr = 0.02;
  plan.batch_size = 8;
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v, const std::function<std::string(const T&)>& f) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + f(x);
  return s;
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ValidationError(key + ": '" + v + "' is not a number");
  }
}

long long parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const long long i = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return i;
  } catch (const std::exception&) {
    throw ValidationError(key + ": '" + v + "' is not an integer");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError(key + ": '" + v + "' is not a boolean");
}

const std::map<std::string, std::set<std::string>> kKeys = {
    {"model", {"kind", "width_scale", "batch_norm", "hidden"}},
    {"dataset",
     {"kind", "path", "subset", "classes", "dims", "train_per_class", "test_per_class", "seed", "noise"}},
    {"split", {"n", "r", "phi", "bypass"}},
    {"loss", {"delta", "lambda", "epsilon"}},
    {"plan",
     {"budgets", "epochs", "l_k", "gamma_boost", "base_lr", "weight_decay", "batch_size", "eval_batch_size",
      "reset_threshold"}},
    {"run", {"arm", "transport", "listen", "connect", "seed", "scratch_budget", "checkpoint_dir", "out"}},
};

}  // namespace

ExperimentConfig parse_config(const std::string& ini_text) {
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  std::vector<double> budgets;
  std::vector<int> epochs;
  for (const auto& [section, body] : tree) {
    const auto allowed = kKeys.find(section);
    if (allowed == kKeys.end()) throw ValidationError("config: unknown section [" + section + "]");
    for (const auto& [key, node] : body) {
      if (!allowed->second.count(key)) throw ValidationError("config: unknown key " + section + "." + key);
      const std::string v = node.get_value<std::string>();
      const std::string k = section + "." + key;
      if (section == "model") {
        if (key == "kind") c.model.kind = v;
        if (key == "width_scale") c.model.width_scale = parse_double(k, v);
        if (key == "batch_norm") c.model.batch_norm = parse_bool(k, v);
        if (key == "hidden") {
          c.model.hidden.clear();
          for (const auto& h : split_list(v)) c.model.hidden.push_back(static_cast<int>(parse_int(k, h)));
        }
      } else if (section == "dataset") {
        if (key == "kind") c.dataset.kind = parse_dataset_kind(v);
        if (key == "path") c.dataset.path = v;
        if (key == "subset") {
          c.dataset.subset.clear();
          for (const auto& s : split_list(v)) c.dataset.subset.push_back(static_cast<int>(parse_int(k, s)));
        }
        if (key == "classes") c.dataset.classes = static_cast<int>(parse_int(k, v));
        if (key == "dims") c.dataset.dims = static_cast<int>(parse_int(k, v));
        if (key == "train_per_class") c.dataset.train_per_class = static_cast<int>(parse_int(k, v));
        if (key == "test_per_class") c.dataset.test_per_class = static_cast<int>(parse_int(k, v));
        if (key == "seed") c.dataset.seed = static_cast<std::uint64_t>(parse_int(k, v));
        if (key == "noise") c.dataset.noise = parse_double(k, v);
      } else if (section == "split") {
        if (key == "n") c.split_index = static_cast<std::size_t>(parse_int(k, v));
        if (key == "r") c.r = static_cast<int>(parse_int(k, v));
        if (key == "phi") c.phi = parse_int(k, v);
        if (key == "bypass") c.bypass = parse_bool(k, v);
      } else if (section == "loss") {
        if (key == "delta") c.loss.delta = parse_double(k, v);
        if (key == "lambda") c.loss.lambda = parse_double(k, v);
        if (key == "epsilon") c.loss.epsilon = parse_double(k, v);
      } else if (section == "plan") {
        if (key == "budgets") {
          for (const auto& b : split_list(v)) budgets.push_back(b == "phi" ? kBudgetPhi : parse_double(k, b));
        }
        if (key == "epochs")
          for (const auto& e : split_list(v)) epochs.push_back(static_cast<int>(parse_int(k, e)));
        if (key == "l_k") c.plan.l_k = static_cast<int>(parse_int(k, v));
        if (key == "gamma_boost") c.plan.gamma_boost = parse_double(k, v);
        if (key == "base_lr") c.plan.base_lr = parse_double(k, v);
        if (key == "weight_decay") c.plan.weight_decay = parse_double(k, v);
        if (key == "batch_size") c.plan.batch_size = static_cast<int>(parse_int(k, v));
        if (key == "eval_batch_size") c.plan.eval_batch_size = static_cast<int>(parse_int(k, v));
        if (key == "reset_threshold") c.plan.reset_threshold = parse_double(k, v);
      } else if (section == "run") {
        if (key == "arm") c.arm = parse_arm(v);
        if (key == "transport") c.transport = parse_transport(v);
        if (key == "listen") c.listen = v;
        if (key == "connect") c.connect = v;
        if (key == "seed") c.plan.seed = static_cast<std::uint64_t>(parse_int(k, v));
        if (key == "scratch_budget") c.scratch_budget = v == "phi" ? kBudgetPhi : parse_double(k, v);
        if (key == "checkpoint_dir") c.checkpoint_dir = v;
        if (key == "out") c.out = v;
      }
    }
  }
  if (!budgets.empty() || !epochs.empty()) {
    if (budgets.size() != epochs.size()) throw ValidationError("config: plan.budgets and plan.epochs differ in length");
    c.plan.stages.clear();
    for (std::size_t i = 0; i < budgets.size(); ++i) {
      c.plan.stages.push_back(budgets[i] == kBudgetPhi ? StagePlan{kBudgetPhi, 0, epochs[i]}
                                                       : stage_for_target(budgets[i], epochs[i]));
    }
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_ini(const ExperimentConfig& c) {
  auto budget = [](double B) { return B == kBudgetPhi ? std::string("phi") : fmt_double(B); };
  std::ostringstream o;
  o << "[model]\n"
    << "kind = " << c.model.kind << "\n"
    << "width_scale = " << fmt_double(c.model.width_scale) << "\n"
    << "batch_norm = " << (c.model.batch_norm ? "true" : "false") << "\n"
    << "hidden = " << join<int>(c.model.hidden, [](const int& h) { return std::to_string(h); }) << "\n"
    << "[dataset]\n"
    << "kind = " << dataset_kind_name(c.dataset.kind) << "\n"
    << "path = " << c.dataset.path << "\n"
    << "subset = " << join<int>(c.dataset.subset, [](const int& s) { return std::to_string(s); }) << "\n"
    << "classes = " << c.dataset.classes << "\n"
    << "dims = " << c.dataset.dims << "\n"
    << "train_per_class = " << c.dataset.train_per_class << "\n"
    << "test_per_class = " << c.dataset.test_per_class << "\n"
    << "seed = " << c.dataset.seed << "\n"
    << "noise = " << fmt_double(c.dataset.noise) << "\n"
    << "[split]\n"
    << "n = " << c.split_index << "\n"
    << "r = " << c.r << "\n"
    << "phi = " << c.phi << "\n"
    << "bypass = " << (c.bypass ? "true" : "false") << "\n"
    << "[loss]\n"
    << "delta = " << fmt_double(c.loss.delta) << "\n"
    << "lambda = " << fmt_double(c.loss.lambda) << "\n"
    << "epsilon = " << fmt_double(c.loss.epsilon) << "\n"
    << "[plan]\n"
    << "budgets = " << join<StagePlan>(c.plan.stages, [&](const StagePlan& s) { return budget(s.budget_target); })
    << "\n"
    << "epochs = " << join<StagePlan>(c.plan.stages, [](const StagePlan& s) { return std::to_string(s.epochs); })
    << "\n"
    << "l_k = " << c.plan.l_k << "\n"
    << "gamma_boost = " << fmt_double(c.plan.gamma_boost) << "\n"
    << "base_lr = " << fmt_double(c.plan.base_lr) << "\n"
    << "weight_decay = " << fmt_double(c.plan.weight_decay) << "\n"
    << "batch_size = " << c.plan.batch_size << "\n"
    << "eval_batch_size = " << c.plan.eval_batch_size << "\n"
    << "reset_threshold = " << fmt_double(c.plan.reset_threshold) << "\n"
    << "[run]\n"
    << "arm = " << arm_name(c.arm) << "\n"
    << "transport = " << transport_name(c.transport) << "\n"
    << "listen = " << c.listen << "\n"
    << "connect = " << c.connect << "\n"
    << "seed = " << c.plan.seed << "\n"
    << "scratch_budget = " << budget(c.scratch_budget) << "\n"
    << "checkpoint_dir = " << c.checkpoint_dir << "\n"
    << "out = " << c.out << "\n";
  return o.str();
}

ResolvedExperiment resolve(const ExperimentConfig& cfg, const Shape& sample_shape, int num_classes) {
  ResolvedExperiment r;
  r.config = cfg;
  if (cfg.model.kind == "vgg11-like") {
    if (sample_shape != Shape{3, 32, 32}) throw ValidationError("vgg11-like needs [3,32,32] inputs");
    r.layers = build_vgg11_like(num_classes, cfg.model.width_scale, cfg.model.batch_norm);
  } else if (cfg.model.kind == "mlp") {
    std::vector<int> widths{static_cast<int>(shape_numel(sample_shape))};
    widths.insert(widths.end(), cfg.model.hidden.begin(), cfg.model.hidden.end());
    widths.push_back(num_classes);
    r.layers = build_mlp(widths);
    if (sample_shape.size() > 1) r.layers.insert(r.layers.begin(), LayerSpec::flatten());
  } else {
    throw ValidationError("unknown model kind '" + cfg.model.kind + "'");
  }

  CompressionConfig cc;
  cc.r = cfg.r;
  cc.phi = cfg.phi;
  cc.bypass = cfg.bypass;
  r.model = split_at(r.layers, cfg.split_index, cc, sample_shape);
  const auto phi = static_cast<double>(r.model.phi());

  auto& plan = r.config.plan;
  for (auto& s : plan.stages)
    if (s.budget_target == kBudgetPhi) s = stage_for_target(phi, s.epochs);
  if (r.config.scratch_budget == kBudgetPhi) r.config.scratch_budget = phi;
  if (plan.stages.empty()) throw ValidationError("plan has no stages");
  const int total = plan.total_epochs();
  switch (cfg.arm) {
    case Arm::NoCompression:
    case Arm::Unsplit:
      plan.stages = {stage_for_target(phi, total)};
      break;
    case Arm::HighCompression: {
      const auto smallest = std::min_element(plan.stages.begin(), plan.stages.end(), [](auto& a, auto& b) {
        return a.budget_target < b.budget_target;
      });
      plan.stages = {stage_for_target(smallest->budget_target, total)};
      if (plan.stages[0].b >= r.model.phi()) throw ValidationError("high-compression needs b < phi");
      break;
    }
    case Arm::FromScratch: {
      const auto it = std::find_if(plan.stages.begin(), plan.stages.end(),
                                   [&](auto& s) { return s.budget_target == r.config.scratch_budget; });
      const int epochs = it == plan.stages.end() ? total : it->epochs;
      plan.stages = {stage_for_target(r.config.scratch_budget, epochs)};
      break;
    }
    case Arm::Deprune:
    case Arm::Prune:
      break;
  }
  r.kind = cfg.arm == Arm::Deprune ? PlanKind::Deprune : cfg.arm == Arm::Prune ? PlanKind::Prune : PlanKind::Fixed;
  if (cfg.arm == Arm::Deprune && plan.stages.size() < 2) throw ValidationError("deprune needs at least two stages");
  plan.validate(r.kind, r.model.phi());
  return r;
}

// ---- metrics ----

std::string format_metrics_row(const MetricsRecord& r) {
  std::ostringstream o;
  o << metrics_kind_name(r.kind) << ',' << fmt_double(r.wall_ms) << ',' << r.epoch << ',' << r.stage << ','
    << r.stage_b << ',' << fmt_double(r.budget_target) << ',' << r.batch << ',' << fmt_double(r.task_loss) << ','
    << fmt_double(r.prune_loss) << ',' << fmt_double(r.sum_f) << ',' << fmt_double(r.test_accuracy) << ','
    << r.cum_tx_bytes << ',' << r.cum_rx_bytes << ',' << fmt_double(r.samples_per_sec);
  return o.str();
}

MetricsRecord parse_metrics_row(const std::string& line) {
  std::vector<std::string> f;
  std::stringstream ss(line);
  std::string item;
  while (std::getline(ss, item, ',')) f.push_back(item);
  if (!line.empty() && line.back() == ',') f.emplace_back();
  if (f.size() != 14) throw FormatError("metrics row has " + std::to_string(f.size()) + " columns, expected 14");
  auto num = [&](std::size_t i) {
    try {
      std::size_t used = 0;
      const double v = std::stod(f[i], &used);
      if (used != f[i].size()) throw std::invalid_argument(f[i]);
      return v;
    } catch (const std::exception&) {
      throw FormatError("metrics column " + std::to_string(i) + ": '" + f[i] + "'");
    }
  };
  auto integer = [&](std::size_t i) {
    try {
      std::size_t used = 0;
      const long long v = std::stoll(f[i], &used);
      if (used != f[i].size()) throw std::invalid_argument(f[i]);
      return v;
    } catch (const std::exception&) {
      throw FormatError("metrics column " + std::to_string(i) + ": '" + f[i] + "'");
    }
  };
  auto count = [&](std::size_t i) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(f[i], &used);
      if (used != f[i].size() || f[i].front() == '-') throw std::invalid_argument(f[i]);
      return static_cast<std::uint64_t>(v);
    } catch (const std::exception&) {
      throw FormatError("metrics column " + std::to_string(i) + ": '" + f[i] + "'");
    }
  };
  MetricsRecord r;
  r.kind = parse_metrics_kind(f[0]);
  r.wall_ms = num(1);
  r.epoch = static_cast<int>(integer(2));
  r.stage = static_cast<int>(integer(3));
  r.stage_b = static_cast<int>(integer(4));
  r.budget_target = num(5);
  r.batch = integer(6);
  r.task_loss = num(7);
  r.prune_loss = num(8);
  r.sum_f = num(9);
  r.test_accuracy = num(10);
  r.cum_tx_bytes = count(11);
  r.cum_rx_bytes = count(12);
  r.samples_per_sec = num(13);
  return r;
}

MetricsWriter::MetricsWriter(const std::string& path, const std::string& config_ini) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  out_ = std::make_shared<std::ofstream>(path);
  if (!*out_) throw ValidationError("cannot write metrics to " + path);
  std::istringstream lines(config_ini);
  std::string line;
  while (std::getline(lines, line)) *out_ << "# " << line << "\n";
  *out_ << kMetricsHeader << "\n";
  out_->flush();
}

void MetricsWriter::write(const MetricsRecord& r) {
  *out_ << format_metrics_row(r) << "\n";
  out_->flush();
}

MetricsSink MetricsWriter::sink() {
  auto out = out_;
  return [out](const MetricsRecord& r) {
    *out << format_metrics_row(r) << "\n";
    out->flush();
  };
}

MetricsFile read_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot read " + path);
  MetricsFile m;
  std::string line;
  bool header = false;
  while (std::getline(in, line)) {
    if (line.rfind("# ", 0) == 0) {
      m.config_ini += line.substr(2) + "\n";
    } else if (!header) {
      if (line != kMetricsHeader) throw FormatError(path + ": unexpected header '" + line + "'");
      header = true;
    } else if (!line.empty()) {
      m.rows.push_back(parse_metrics_row(line));
    }
  }
  if (!header) throw FormatError(path + ": no header row");
  return m;
}

std::string strip_wall_clock(const std::string& csv_text) {
  std::istringstream in(csv_text);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind('#', 0) == 0) {
      out << line << "\n";
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string item;
    while (std::getline(ss, item, ',')) f.push_back(item);
    std::string kept;
    for (std::size_t i = 0; i < f.size(); ++i) {
      if (i == 1 || i == 13) continue;
      kept += (kept.empty() ? "" : ",") + f[i];
    }
    out << kept << "\n";
  }
  return out.str();
}

// ---- experiments ----

namespace {

std::unique_ptr<Link> connect_with_retry(const Endpoint& ep) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(30);
  for (;;) {
    try {
      return link_connect(ep);
    } catch (const SessionError&) {
      if (std::chrono::steady_clock::now() > deadline) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(200));
    }
  }
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, Role role) {
  return run_experiment(cfg, load_dataset(cfg.dataset), role);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const DatasetSplit& data, Role role) {
  const auto res = resolve(cfg, data.train.sample_shape, data.train.num_classes);
  const auto& c = res.config;
  const auto& plan = c.plan;
  ExperimentResult out;

  if (c.transport == Transport::Tcp && role == Role::Server) {
    auto params = init_split_params(res.model, plan.seed);
    Listener listener(parse_endpoint(c.listen));
    auto link = listener.accept();
    ServerHalf server(res.model, params.server, c.loss, plan);
    deprune_server_loop(server, *link);
    out.counters = link->counters();
    return out;
  }

  out.csv_path = c.out;
  MetricsWriter writer(c.out, to_ini(c));
  const auto sink = writer.sink();
  TrainResult run;
  if (c.arm == Arm::Unsplit) {
    ParameterStore params;
    std::mt19937_64 rng(plan.seed);
    init_layer_params(res.layers, 0, res.layers.size(), params, rng);
    run = train_unsplit(res.layers, params, plan, data.train, data.test, sink);
  } else if (c.arm == Arm::Prune) {
    auto params = init_split_params(res.model, plan.seed);
    auto pr = prune_train(res.model, params, c.loss, plan, data.train, data.test, c.checkpoint_dir, sink);
    out.trained = pr.trained;
    run = pr.run;
  } else {
    auto params = init_split_params(res.model, plan.seed);
    switch (c.transport) {
      case Transport::Loopback:
        run = run_loopback(res.model, params, c.loss, plan, res.kind, data.train, data.test, sink);
        break;
      case Transport::Local:
        run = train_local(res.model, params, c.loss, plan, res.kind, data.train, data.test, sink);
        break;
      case Transport::Tcp: {
        auto link = connect_with_retry(parse_endpoint(c.connect));
        ClientHalf client(res.model, params.client);
        LinkExchange exchange(*link);
        run = run_client_schedule(client, exchange, plan, data.train, data.test, sink);
        break;
      }
    }
  }
  out.final_accuracy = run.final_accuracy;
  out.epoch_accuracy = run.epoch_accuracy;
  out.counters = run.counters;
  return out;
}

// ---- comparison ----

namespace {

std::vector<MetricsRecord> epoch_rows(const MetricsFile& m) {
  std::vector<MetricsRecord> rows;
  for (const auto& r : m.rows)
    if (r.kind == MetricsRecord::Kind::Epoch) rows.push_back(r);
  if (rows.empty()) throw FormatError("metrics file has no epoch rows");
  return rows;
}

double summary_throughput(const MetricsFile& m) {
  for (auto it = m.rows.rbegin(); it != m.rows.rend(); ++it)
    if (it->kind == MetricsRecord::Kind::Summary) return it->samples_per_sec;
  return 0.0;
}

}  // namespace

CompareReport compare_runs(const MetricsFile& a, const MetricsFile& b, double tolerance) {
  const auto ea = epoch_rows(a);
  const auto eb = epoch_rows(b);
  CompareReport r;
  r.tolerance = tolerance;
  r.final_accuracy_a = ea.back().test_accuracy;
  r.final_accuracy_b = eb.back().test_accuracy;
  r.threshold = r.final_accuracy_b - tolerance;
  // A tiny slack keeps identical accuracies from failing on rounding.
  const double slack = 1e-12;
  for (std::size_t i = 0; i < ea.size(); ++i) {
    if (ea[i].test_accuracy + slack >= r.threshold) {
      r.match_epoch_a = static_cast<int>(i);
      break;
    }
  }
  for (std::size_t i = 0; i < eb.size(); ++i) {
    if (eb[i].test_accuracy + slack >= r.threshold) {
      r.threshold_epoch_b = static_cast<int>(i);
      break;
    }
  }
  r.bytes_b = eb.back().cum_tx_bytes + eb.back().cum_rx_bytes;
  const double tb = summary_throughput(b);
  r.throughput_ratio = tb > 0.0 ? summary_throughput(a) / tb : 0.0;
  r.reached = r.match_epoch_a >= 0;
  if (r.reached) {
    const auto& row = ea[static_cast<std::size_t>(r.match_epoch_a)];
    r.bytes_a = row.cum_tx_bytes + row.cum_rx_bytes;
    r.byte_ratio = r.bytes_b ? static_cast<double>(r.bytes_a) / static_cast<double>(r.bytes_b) : 0.0;
    r.epoch_speedup = static_cast<double>(r.threshold_epoch_b + 1) / static_cast<double>(r.match_epoch_a + 1);
  }
  return r;
}

CompareReport compare_runs(const std::string& csv_a, const std::string& csv_b, double tolerance) {
  return compare_runs(read_metrics(csv_a), read_metrics(csv_b), tolerance);
}

std::string format_report(const CompareReport& r) {
  std::ostringstream o;
  o << "final_accuracy_a " << fmt_double(r.final_accuracy_a) << "\n"
    << "final_accuracy_b " << fmt_double(r.final_accuracy_b) << "\n"
    << "threshold " << fmt_double(r.threshold) << " (tolerance " << fmt_double(r.tolerance) << ")\n";
  if (!r.reached) {
    o << "byte_ratio not reached\n"
      << "epoch_speedup not reached\n";
  } else {
    o << "match_epoch_a " << r.match_epoch_a << "\n"
      << "bytes_a " << r.bytes_a << "\n"
      << "bytes_b " << r.bytes_b << "\n"
      << "byte_ratio " << fmt_double(r.byte_ratio) << "\n"
      << "epoch_speedup " << fmt_double(r.epoch_speedup) << "\n";
  }
  o << "throughput_ratio " << fmt_double(r.throughput_ratio) << "\n";
  return o.str();
}

}  // namespace splitstream

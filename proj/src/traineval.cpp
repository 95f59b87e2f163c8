#include "musefuse/traineval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace musefuse {

void TrainConfig::validate() const {
  const auto check = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::ConfigInvalid, what);
  };
  check(max_epochs >= 1, "max_epochs must be at least 1");
  check(patience >= 1 && patience < max_epochs, "patience must be in [1, max_epochs)");
  check(batch_size >= 1, "batch_size must be at least 1");
  check(lr > 0.0 && std::isfinite(lr), "lr must be positive");
  check(weight_decay >= 0.0, "weight_decay must be non-negative");
  check(task_loss_weights.hand >= 0.0 && task_loss_weights.wrist >= 0.0 &&
            task_loss_weights.hand + task_loss_weights.wrist > 0.0,
        "task loss weights must be non-negative and not both zero");
}

bool EarlyStopping::update(double val_loss) {
  ++epoch_;
  if (epoch_ == 1 || val_loss < best_) {
    best_ = val_loss;
    best_epoch_ = epoch_;
    since_best_ = 0;
    return true;
  }
  ++since_best_;
  return false;
}

namespace {

template <typename S>
struct Snapshot {
  std::vector<nn::Buffer<S>> values;

  static Snapshot take(const Model<S>& m) {
    Snapshot s;
    for (const auto& p : m.parameters()) s.values.push_back(p.tensor.value());
    for (const auto& b : m.buffers()) s.values.push_back(b.tensor.value());
    return s;
  }

  void restore(Model<S>& m) const {
    std::size_t i = 0;
    for (auto& p : m.parameters()) p.tensor.value() = values[i++];
    for (auto& b : m.buffers()) b.tensor.value() = values[i++];
  }
};

// Activation buffers are a few MB each and are freed every batch. Keeping
// them on the heap instead of fresh mmap pages halves the step time.
void keep_large_blocks_on_heap() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
  }();
  (void)done;
#endif
}

template <typename Fn>
void for_each_batch(const EntryRefs& entries, int batch_size, Fn&& fn) {
  const std::size_t bs = static_cast<std::size_t>(batch_size);
  for (std::size_t i = 0; i < entries.size(); i += bs) {
    const std::size_t n = std::min(bs, entries.size() - i);
    fn(std::span<const DatasetEntry* const>(entries.data() + i, n));
  }
}

}  // namespace

template <typename S>
double partition_loss(Model<S>& model, const EntryRefs& entries, const TrainConfig& cfg) {
  if (entries.empty()) throw Error(ErrorCode::EmptyPartition, "validation partition is empty");
  nn::NoGradGuard no_grad;
  CounterRng unused(0);
  double sse_hand = 0.0, sse_wrist = 0.0;
  for_each_batch(entries, 256, [&](std::span<const DatasetEntry* const> chunk) {
    const auto b = make_batch<S>(chunk);
    const auto out = model.forward(b.inputs, nn::Mode::Eval, unused);
    sse_hand += (out.hand.value() - b.targets.hand.value()).template cast<double>().square().sum();
    sse_wrist += (out.wrist.value() - b.targets.wrist.value()).template cast<double>().square().sum();
  });
  const double n = static_cast<double>(entries.size());
  return cfg.task_loss_weights.hand * sse_hand / (n * kHandDofs) +
         cfg.task_loss_weights.wrist * sse_wrist / (n * kWristDofs);
}

template <typename S>
TrainHistory train(Model<S>& model, const EntryRefs& train_set, const EntryRefs& val_set, const TrainConfig& cfg) {
  cfg.validate();
  keep_large_blocks_on_heap();
  if (train_set.empty()) throw Error(ErrorCode::EmptyPartition, "training partition is empty");
  if (val_set.empty()) throw Error(ErrorCode::EmptyPartition, "validation partition is empty");

  auto params = model.trainable();
  nn::AdamConfig ac;
  ac.lr = cfg.lr;
  ac.weight_decay = cfg.weight_decay;
  ac.decoupled_weight_decay = cfg.decoupled_weight_decay;
  nn::AdamState<S> adam(ac);
  const CounterRng root(cfg.seed);
  const S wh = static_cast<S>(cfg.task_loss_weights.hand), ww = static_cast<S>(cfg.task_loss_weights.wrist);

  TrainHistory hist;
  EarlyStopping stop(cfg.patience);
  Snapshot<S> best = Snapshot<S>::take(model);
  EntryRefs order = train_set;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    CounterRng shuffle = root.fork(2 * static_cast<std::uint64_t>(epoch));
    CounterRng noise = root.fork(2 * static_cast<std::uint64_t>(epoch) + 1);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

    double loss_sum = 0.0;
    for_each_batch(order, cfg.batch_size, [&](std::span<const DatasetEntry* const> chunk) {
      const auto b = make_batch<S>(chunk);
      const auto out = model.forward(b.inputs, nn::Mode::Train, noise);
      auto loss = nn::add(nn::scale(nn::mse_loss(out.hand, b.targets.hand), wh),
                          nn::scale(nn::mse_loss(out.wrist, b.targets.wrist), ww));
      const double l = static_cast<double>(loss.item());
      if (!std::isfinite(l)) {
        throw Error(ErrorCode::DivergedLoss, "non-finite training loss at epoch " + std::to_string(epoch));
      }
      for (auto& p : params) p.zero_grad();
      loss.backward();
      nn::adam_step(std::span<nn::Tensor<S>>(params), adam);
      loss_sum += l * static_cast<double>(chunk.size());
    });

    const double val = partition_loss(model, val_set, cfg);
    if (!std::isfinite(val)) throw Error(ErrorCode::DivergedLoss, "non-finite validation loss at epoch " + std::to_string(epoch));
    const bool improved = stop.update(val);
    if (improved) best = Snapshot<S>::take(model);
    hist.epochs.push_back({epoch, loss_sum / static_cast<double>(order.size()), val, improved});
    if (stop.should_stop()) {
      hist.stopped_early = epoch < cfg.max_epochs;
      break;
    }
  }
  for (auto& p : params) p.zero_grad();
  best.restore(model);
  hist.best_epoch = stop.best_epoch();
  hist.best_val_loss = stop.best_loss();
  return hist;
}

template <typename S>
Eigen::MatrixXd predict(Model<S>& model, const EntryRefs& entries, int batch_size) {
  nn::NoGradGuard no_grad;
  CounterRng unused(0);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(entries.size()), kJoints);
  Eigen::Index row = 0;
  for_each_batch(entries, batch_size, [&](std::span<const DatasetEntry* const> chunk) {
    const auto b = make_batch<S>(chunk);
    const auto y = model.forward(b.inputs, nn::Mode::Eval, unused);
    const auto n = static_cast<Eigen::Index>(chunk.size());
    using Rm = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    out.block(row, 0, n, kHandDofs) = Eigen::Map<const Rm>(y.hand.data(), n, kHandDofs).template cast<double>();
    out.block(row, kHandDofs, n, kWristDofs) = Eigen::Map<const Rm>(y.wrist.data(), n, kWristDofs).template cast<double>();
    row += n;
  });
  return out;
}

Eigen::MatrixXd labels_of(const EntryRefs& entries) {
  Eigen::MatrixXd y(static_cast<Eigen::Index>(entries.size()), kJoints);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    y.row(static_cast<Eigen::Index>(i)) = entries[i]->label.cast<double>().transpose();
  }
  return y;
}

MetricsReport compute_metrics(const Eigen::MatrixXd& labels, const Eigen::MatrixXd& predictions,
                              R2Aggregation aggregation) {
  if (labels.rows() == 0) throw Error(ErrorCode::EmptyPartition, "no test entries");
  if (labels.rows() != predictions.rows() || labels.cols() != kJoints || predictions.cols() != kJoints) {
    throw Error(ErrorCode::ShapeMismatch, "labels and predictions must both be n x 23");
  }
  MetricsReport r;
  r.n_test_entries = static_cast<std::size_t>(labels.rows());
  const double n = static_cast<double>(labels.rows());
  std::array<double, kJoints> ss_res{}, ss_tot{};
  for (int j = 0; j < kJoints; ++j) {
    const auto e = (predictions.col(j) - labels.col(j)).array();
    r.mae[j] = e.abs().sum() / n;
    ss_res[j] = e.square().sum();
    r.rmse[j] = std::sqrt(ss_res[j] / n);
    ss_tot[j] = (labels.col(j).array() - labels.col(j).mean()).square().sum();
    if (std::sqrt(ss_tot[j] / n) > 1e-9) r.r2[j] = 1.0 - ss_res[j] / ss_tot[j];
  }
  const auto group = [&](int lo, int hi) {
    MetricSet m;
    double r2_sum = 0.0, res = 0.0, tot = 0.0;
    int r2_n = 0;
    for (int j = lo; j < hi; ++j) {
      m.mae += r.mae[j];
      m.rmse += r.rmse[j];
      if (r.r2[j]) {
        r2_sum += *r.r2[j];
        res += ss_res[j];
        tot += ss_tot[j];
        ++r2_n;
      }
    }
    m.mae /= hi - lo;
    m.rmse /= hi - lo;
    if (r2_n == 0) {
      m.r2 = std::numeric_limits<double>::quiet_NaN();
    } else {
      m.r2 = aggregation == R2Aggregation::PerJoint ? r2_sum / r2_n : 1.0 - res / tot;
    }
    return m;
  };
  r.hand = group(0, kHandDofs);
  r.wrist = group(kHandDofs, kJoints);
  r.overall = group(0, kJoints);
  return r;
}

template <typename S>
MetricsReport evaluate(Model<S>& model, const EntryRefs& test_set, R2Aggregation aggregation) {
  if (test_set.empty()) throw Error(ErrorCode::EmptyPartition, "test partition is empty");
  return compute_metrics(labels_of(test_set), predict(model, test_set), aggregation);
}

Eigen::MatrixXd median_smooth(const Eigen::MatrixXd& series, int window) {
  if (window < 1 || window % 2 == 0) throw Error(ErrorCode::ConfigInvalid, "median window must be odd and positive");
  const Eigen::Index n = series.rows(), half = window / 2;
  Eigen::MatrixXd out(n, series.cols());
  std::vector<double> buf;
  for (Eigen::Index c = 0; c < series.cols(); ++c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index h = std::min({half, i, n - 1 - i});
      buf.assign(series.col(c).data() + i - h, series.col(c).data() + i + h + 1);
      std::nth_element(buf.begin(), buf.begin() + h, buf.end());
      out(i, c) = buf[static_cast<std::size_t>(h)];
    }
  }
  return out;
}

int median_window_entries(double window_ms, double stride_ms) {
  if (!(window_ms > 0.0) || !(stride_ms > 0.0)) throw Error(ErrorCode::ConfigInvalid, "median window must be positive");
  int w = std::max(1, static_cast<int>(std::lround(window_ms / stride_ms)));
  if (w % 2 == 0) ++w;
  return w;
}

template <typename S>
Model<S> build_model(const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.modality) {
    case Modality::Emg: return build_emg_net<S>(spec.emg, seed);
    case Modality::Us: return build_us_net<S>(spec.us, seed);
    case Modality::Fusion: return build_fusion_net<S>(spec.fusion, seed);
  }
  throw Error(ErrorCode::ConfigInvalid, "unknown modality");
}

int fold_count(Scheme s) { return s == Scheme::Aggregated ? kSetsPerSession : kSessions; }

SplitSpec make_split(Scheme s, int fold) {
  return s == Scheme::Aggregated ? split_aggregated(fold) : split_intersession(fold);
}

ProtocolSummary summarize(const std::vector<MetricsReport>& reports) {
  const auto stat = [&](auto get) {
    MeanStd m;
    if (reports.empty()) return m;
    for (const auto& r : reports) m.mean += get(r);
    m.mean /= static_cast<double>(reports.size());
    for (const auto& r : reports) m.std += (get(r) - m.mean) * (get(r) - m.mean);
    m.std = std::sqrt(m.std / static_cast<double>(reports.size()));
    return m;
  };
  return {stat([](const MetricsReport& r) { return r.overall.mae; }),
          stat([](const MetricsReport& r) { return r.overall.rmse; }),
          stat([](const MetricsReport& r) { return r.overall.r2; })};
}

int threads_from_env() {
  const char* v = std::getenv("MUSEFUSE_THREADS");
  if (!v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  return (end != v && *end == '\0' && n >= 1) ? static_cast<int>(std::min<long>(n, 256)) : 1;
}

ProtocolResult run_protocol(Scheme scheme, const Entries& entries, const ModelSpec& spec, const TrainConfig& cfg,
                            const ProtocolOptions& opts) {
  cfg.validate();
  std::vector<int> folds = opts.only_folds;
  if (folds.empty()) {
    folds.resize(static_cast<std::size_t>(fold_count(scheme)));
    std::iota(folds.begin(), folds.end(), 0);
  }
  for (int f : folds) {
    if (f < 0 || f >= fold_count(scheme)) throw Error(ErrorCode::FoldOutOfRange, "fold " + std::to_string(f));
  }

  ProtocolResult res;
  res.scheme = scheme;
  res.modality = spec.modality;
  res.folds.resize(folds.size());
  std::vector<std::exception_ptr> errors(folds.size());

  const auto run_one = [&](std::size_t k) {
    try {
      const int fold = folds[k];
      FoldResult fr;
      fr.split = make_split(scheme, fold);
      fr.seed = cfg.seed + static_cast<std::uint64_t>(fold);
      const Partition part = select(entries, fr.split);
      TrainConfig fc = cfg;
      fc.seed = fr.seed;
      Model<float> model = build_model<float>(spec, fr.seed);
      fr.history = train(model, part.train, part.val, fc);
      fr.report = evaluate(model, part.test, opts.aggregation);
      fr.report.split = std::string(to_string(scheme)) + "/fold" + std::to_string(fold);
      fr.checkpoint = model.state();
      res.folds[k] = std::move(fr);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };

  const int threads = std::min<int>(opts.threads > 0 ? opts.threads : threads_from_env(), static_cast<int>(folds.size()));
  if (threads <= 1) {
    for (std::size_t k = 0; k < folds.size(); ++k) run_one(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < folds.size(); k = next++) run_one(k);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::vector<MetricsReport> reports;
  for (const auto& f : res.folds) reports.push_back(f.report);
  res.summary = summarize(reports);
  return res;
}

std::string metrics_csv_header() { return "scheme,fold,joint,mae_deg,rmse_deg,r2\n"; }

std::string metrics_csv_rows(Scheme scheme, int fold, const MetricsReport& r) {
  std::ostringstream os;
  os << std::setprecision(9);
  const auto row = [&](std::string_view joint, double mae, double rmse, std::optional<double> r2) {
    os << to_string(scheme) << ',' << fold << ',' << joint << ',' << mae << ',' << rmse << ',';
    if (r2 && std::isfinite(*r2)) {
      os << *r2;
    } else {
      os << "NA";
    }
    os << '\n';
  };
  for (int j = 0; j < kJoints; ++j) row(joint_names()[static_cast<std::size_t>(j)], r.mae[j], r.rmse[j], r.r2[j]);
  row("mean_hand", r.hand.mae, r.hand.rmse, r.hand.r2);
  row("mean_wrist", r.wrist.mae, r.wrist.rmse, r.wrist.r2);
  row("mean_all", r.overall.mae, r.overall.rmse, r.overall.r2);
  return os.str();
}

std::string format_table(const std::string& title, const std::vector<TableColumn>& columns) {
  const auto cell = [](const MeanStd& m, bool degrees) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(degrees ? 1 : 2) << m.mean << (degrees ? "°" : "") << " ± " << m.std
       << (degrees ? "°" : "");
    return os.str();
  };
  // Pads to a display width, counting UTF-8 code points rather than bytes.
  const auto pad = [](const std::string& s, std::size_t width) {
    const auto cols = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char ch) {
      return (static_cast<unsigned char>(ch) & 0xC0) != 0x80;
    }));
    return s + std::string(cols < width ? width - cols : 1, ' ');
  };
  std::ostringstream os;
  os << title << "\n" << pad("Metric", 8);
  for (const auto& c : columns) os << pad(c.name, 20);
  os << "\n";
  const auto line = [&](const char* name, auto get, bool degrees) {
    os << pad(name, 8);
    for (const auto& c : columns) os << pad(cell(get(c.summary), degrees), 20);
    os << "\n";
  };
  line("MAE", [](const ProtocolSummary& s) { return s.mae; }, true);
  line("RMSE", [](const ProtocolSummary& s) { return s.rmse; }, true);
  line("R²", [](const ProtocolSummary& s) { return s.r2; }, false);
  return os.str();
}

#define MUSEFUSE_INSTANTIATE(S)                                                                           \
  template double partition_loss<S>(Model<S>&, const EntryRefs&, const TrainConfig&);                     \
  template TrainHistory train<S>(Model<S>&, const EntryRefs&, const EntryRefs&, const TrainConfig&);      \
  template Eigen::MatrixXd predict<S>(Model<S>&, const EntryRefs&, int);                                  \
  template MetricsReport evaluate<S>(Model<S>&, const EntryRefs&, R2Aggregation);                         \
  template Model<S> build_model<S>(const ModelSpec&, std::uint64_t);

MUSEFUSE_INSTANTIATE(float)
MUSEFUSE_INSTANTIATE(double)

}  // namespace musefuse

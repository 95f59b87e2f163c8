#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "musefuse/dataset.hpp"
#include "musefuse/models.hpp"
#include "musefuse/nn/adam.hpp"

namespace musefuse {

struct TrainConfig {
  int max_epochs = 25;
  int patience = 5;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  bool decoupled_weight_decay = false;
  int batch_size = 64;
  std::uint64_t seed = 0;
  TaskPair<double> task_loss_weights{1.0, 1.0};

  /// Throws ConfigInvalid.
  void validate() const;
};

/// Patience-based stopping on a validation loss. Epochs are 1-based.
class EarlyStopping {
 public:
  explicit EarlyStopping(int patience) : patience_(patience) {}

  /// Records one epoch's loss; returns true when it is a new best.
  bool update(double val_loss);
  bool should_stop() const { return since_best_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  int epochs_seen() const { return epoch_; }

 private:
  int patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  int since_best_ = 0;
  double best_ = 0.0;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  bool improved = false;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

/// Weighted multi-task loss over a whole partition in eval mode (no graph).
template <typename S>
double partition_loss(Model<S>& model, const EntryRefs& entries, const TrainConfig& cfg);

/// Adam on w_hand MSE(hand) + w_wrist MSE(wrist); batches reshuffled each
/// epoch from the seed. Restores the best-validation parameters before
/// returning. Throws EmptyPartition, DivergedLoss.
template <typename S>
TrainHistory train(Model<S>& model, const EntryRefs& train_set, const EntryRefs& val_set, const TrainConfig& cfg);

/// Eval-mode predictions, one row per entry, 23 columns (hand then wrist).
template <typename S>
Eigen::MatrixXd predict(Model<S>& model, const EntryRefs& entries, int batch_size = 256);

Eigen::MatrixXd labels_of(const EntryRefs& entries);

struct MetricSet {
  double mae = 0.0;
  double rmse = 0.0;
  double r2 = 0.0;  // NaN when no joint in the group has a defined R2
};

enum class R2Aggregation { PerJoint, Pooled };

struct MetricsReport {
  std::string split;  // e.g. "aggregated/fold2"
  std::size_t n_test_entries = 0;
  std::array<double, kJoints> mae{};
  std::array<double, kJoints> rmse{};
  std::array<std::optional<double>, kJoints> r2{};  // empty: constant ground truth
  MetricSet hand, wrist, overall;
};

/// Per-joint MAE/RMSE/R2 (R2 about the test-set mean of each joint) and
/// unweighted means over joints. Joints with constant labels get no R2 and
/// are left out of the R2 means. Throws EmptyPartition.
MetricsReport compute_metrics(const Eigen::MatrixXd& labels, const Eigen::MatrixXd& predictions,
                              R2Aggregation aggregation = R2Aggregation::PerJoint);

template <typename S>
MetricsReport evaluate(Model<S>& model, const EntryRefs& test_set, R2Aggregation aggregation = R2Aggregation::PerJoint);

/// Centered running median per column. Near the ends the window shrinks
/// symmetrically, so it stays centered. `window` must be odd and positive.
Eigen::MatrixXd median_smooth(const Eigen::MatrixXd& series, int window);

/// Odd window length in entries for a duration at the given entry stride.
int median_window_entries(double window_ms, double stride_ms = 4000.0 / 30.0);

struct ModelSpec {
  Modality modality = Modality::Fusion;
  ModelConfig emg = ModelConfig::emg_default();
  ModelConfig us = ModelConfig::us_default();
  FusionConfig fusion = FusionConfig::defaults();
};

template <typename S>
Model<S> build_model(const ModelSpec& spec, std::uint64_t seed);

struct ProtocolOptions {
  /// Fold workers; 0 reads MUSEFUSE_THREADS (default 1).
  int threads = 0;
  /// Restrict to these folds/rotations; empty runs all.
  std::vector<int> only_folds;
  R2Aggregation aggregation = R2Aggregation::PerJoint;
};

struct FoldResult {
  SplitSpec split;
  MetricsReport report;
  TrainHistory history;
  std::vector<nn::NamedTensor> checkpoint;
  std::uint64_t seed = 0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct ProtocolSummary {
  MeanStd mae, rmse, r2;
};

struct ProtocolResult {
  Scheme scheme = Scheme::Aggregated;
  Modality modality = Modality::Fusion;
  std::vector<FoldResult> folds;
  ProtocolSummary summary;
};

int fold_count(Scheme s);
SplitSpec make_split(Scheme s, int fold);
ProtocolSummary summarize(const std::vector<MetricsReport>& reports);

/// Trains and evaluates one model per fold (aggregated: 5, intersession: 3),
/// fold seed = cfg.seed + fold. Folds may run on worker threads; results are
/// ordered by fold regardless.
ProtocolResult run_protocol(Scheme scheme, const Entries& entries, const ModelSpec& spec, const TrainConfig& cfg,
                            const ProtocolOptions& opts = {});

int threads_from_env();

/// Rows `scheme,fold,joint,mae_deg,rmse_deg,r2` for each joint and the
/// hand/wrist/overall means.
std::string metrics_csv_header();
std::string metrics_csv_rows(Scheme scheme, int fold, const MetricsReport& r);

/// Metric rows x modality columns, "mean ± std" cells.
struct TableColumn {
  std::string name;
  ProtocolSummary summary;
};
std::string format_table(const std::string& title, const std::vector<TableColumn>& columns);

extern template TrainHistory train<float>(Model<float>&, const EntryRefs&, const EntryRefs&, const TrainConfig&);
extern template TrainHistory train<double>(Model<double>&, const EntryRefs&, const EntryRefs&, const TrainConfig&);

}  // namespace musefuse

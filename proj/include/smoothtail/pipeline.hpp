#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "smoothtail/dataset.hpp"
#include "smoothtail/detector.hpp"
#include "smoothtail/eval.hpp"
#include "smoothtail/losses.hpp"
#include "smoothtail/replay.hpp"

namespace smoothtail {

enum class StageKind { kPretrain, kFinetune, kTransfer };

const char* stage_name(StageKind kind);

// Failure inside a training stage; what() starts with "[<stage>]".
class StageError : public std::runtime_error {
 public:
  StageError(std::string_view stage, const std::string& message)
      : std::runtime_error("[" + std::string(stage) + "] " + message) {}
};

struct StageConfig {
  StageKind kind = StageKind::kPretrain;
  int epochs = 1;
  double lr = 2e-4;
  // Learning rate is multiplied by decay_factor once decay_epoch epochs have
  // completed; 0 keeps it constant.
  int decay_epoch = 0;
  double decay_factor = 0.1;
  TrainableSet trainable = TrainableSet::kAll;
  bool distill = false;
  std::optional<double> rfs_threshold;  // nullopt: every image once per epoch
  int batch_size = 4;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;
  std::uint64_t seed = 0;

  double lr_at(int epoch) const;  // epoch is 0-based
};

void validate(const StageConfig& config);

// A dataset together with its rendered pixels.
class RenderedDataset {
 public:
  explicit RenderedDataset(DetectionDataset dataset);

  const DetectionDataset& dataset() const { return dataset_; }
  const std::vector<Image>& images() const { return images_; }
  const Image& image(ImageId id) const;

 private:
  DetectionDataset dataset_;
  std::vector<Image> images_;
  std::unordered_map<ImageId, std::size_t> index_;
};

struct LossLogEntry {
  int epoch = 0;
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;  // batch mean; total == hungarian + weighted terms exactly
};

struct StageLog {
  std::string name;
  std::vector<LossLogEntry> entries;
};

/// Every annotation valid, every image once.
ReplaySubset full_subset(const DetectionDataset& ds);

/// Training targets of one image: its annotations that the subset marks valid.
std::vector<Target> valid_targets(const DetectionDataset& ds, const ReplaySubset& subset,
                                  ImageId image);

DetectorModel pretrain(const RenderedDataset& data, const DetectorConfig& detector,
                       const StageConfig& config, StageLog* log = nullptr,
                       const LossWeights& weights = {});

/// Trains a copy of `model` on D_head with only the class-specific partition
/// updated. Throws StageError if the class-agnostic parameters moved.
DetectorModel finetune_head_expert(const DetectorModel& model, const RenderedDataset& data,
                                   const ReplaySubset& d_head, const StageConfig& config,
                                   StageLog* log = nullptr, const LossWeights& weights = {});

/// Student starts as a copy of the expert and is trained on D_tail with the
/// full objective; the expert is the fixed teacher.
DetectorModel knowledge_transfer(const DetectorModel& expert, const RenderedDataset& data,
                                 const ReplaySubset& d_tail,
                                 const std::set<CategoryId>& head_categories,
                                 const StageConfig& config, StageLog* log = nullptr,
                                 const LossWeights& weights = {});

// ---- full run ------------------------------------------------------------------

struct RunConfig {
  std::string preset = "toy-default";
  std::uint64_t seed = 0;
  // Training split. The validation split shares everything except its size
  // and exponent, and draws from a different seed.
  ShapeWorldConfig data;
  int val_images = 800;
  double val_zipf_exponent = 0.0;
  DetectorConfig detector;
  StageConfig pretrain;
  StageConfig finetune;
  StageConfig transfer;
  // Head/tail thresholds M. One value gives the two-step method; several give
  // a chain of finetune+transfer rounds, largest threshold first.
  std::vector<int> divisions{kDefaultHeadThreshold};
  ReplayBudget head_budget = head_dominant_budget();
  ReplayBudget tail_budget = tail_dominant_budget();
  FrequencyThresholds frequency;
  LossWeights loss;
};

std::vector<std::string> preset_names();
/// "paper-full", "toy-default" or "smoke". Data, model and stage seeds are
/// not stored; they are derived from RunConfig::seed where used.
RunConfig preset_config(std::string_view name, std::uint64_t seed = 0);

/// Flat `key = value` overrides; unknown keys and bad values throw.
void apply_override(RunConfig& config, const std::string& key, const std::string& value);
/// Reads a config file: an optional `preset = name` line first selects the
/// base, remaining lines override it. '#' starts a comment.
RunConfig load_run_config(const std::filesystem::path& path,
                          std::optional<std::string> preset = std::nullopt,
                          std::optional<std::uint64_t> seed = std::nullopt);
std::string config_to_text(const RunConfig& config);
RunConfig config_from_text(const std::string& text);
std::uint64_t config_fingerprint(const RunConfig& config);
void validate(const RunConfig& config);

struct GroupMetrics {
  MetricsTable table;
  std::optional<double> ap_head;
  std::optional<double> ap_tail;
};

GroupMetrics evaluate_groups(const DetectorModel& model, const RenderedDataset& val,
                             const FrequencyGroups& groups, const CategoryPartition& partition);

struct RunReport {
  std::vector<StageLog> stages;
  // "baseline" (pretrained), "finetune" (last head expert), "unified".
  std::map<std::string, GroupMetrics> metrics;
  std::uint64_t fingerprint = 0;
  double wall_seconds = 0.0;
};

std::string metrics_to_json(const RunReport& report);
std::string report_to_json(const RunReport& report);
std::map<std::string, GroupMetrics> metrics_from_json(const std::string& text);

struct RunResult {
  DetectorModel model;
  RunReport report;
};

/// pretrain -> score -> replay subsets -> finetune -> transfer -> evaluate.
/// With a run directory every intermediate artifact is written there.
RunResult run_stepwise(const RunConfig& config,
                       const std::optional<std::filesystem::path>& run_dir = std::nullopt);

// Shared helpers for step-by-step drivers.
DetectionDataset make_train_data(const RunConfig& config);
DetectionDataset make_val_data(const RunConfig& config);
DetectorConfig detector_for(const RunConfig& config, const DetectionDataset& train);
/// Partition used for head/tail reporting: the smallest division threshold.
CategoryPartition reporting_partition(const RunConfig& config, const DetectionDataset& train);
StageConfig stage_config(const RunConfig& config, StageKind kind);
/// Sets the subset's repeat factors for a stage; nullopt resets them to 1.
void apply_rfs(ReplaySubset& subset, const DetectionDataset& ds, std::optional<double> threshold);

/// Division thresholds in execution order (largest first).
std::vector<int> division_schedule(const RunConfig& config);

struct ReplayStep {
  CategoryPartition partition;
  ReplaySubset d_head;  // repeat factors already set for the finetune stage
  ReplaySubset d_tail;  // repeat factors already set for the transfer stage
};

// One stage of the chain at division step k, exactly as run_stepwise executes it;
// the step-by-step commands call these so both routes produce identical artifacts.
ReplayStep build_replay_step(const RunConfig& config, const DetectionDataset& train,
                             const std::vector<ScoredInstance>& scores, int step);
DetectorModel finetune_step(const RunConfig& config, const DetectorModel& base,
                            const RenderedDataset& train, const ReplaySubset& d_head, int step,
                            StageLog* log);
DetectorModel transfer_step(const RunConfig& config, const DetectorModel& expert,
                            const RenderedDataset& train, const ReplaySubset& d_tail, int step,
                            StageLog* log);
/// Metrics with frequency groups from the training split and the reporting partition.
GroupMetrics evaluate_for_run(const RunConfig& config, const DetectionDataset& train,
                              const DetectorModel& model, const RenderedDataset& val);

std::string stage_log_to_json(const StageLog& log);
StageLog stage_log_from_json(const std::string& text);

// File names inside a run directory. Division step k counts from 0.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.txt"; }
  std::filesystem::path train_data() const { return root / "data" / "train.json"; }
  std::filesystem::path val_data() const { return root / "data" / "val.json"; }
  std::filesystem::path pretrain() const { return root / "checkpoints" / "pretrain.ckpt"; }
  std::filesystem::path scores() const { return root / "scores.jsonl"; }
  std::filesystem::path d_head(int step) const;
  std::filesystem::path d_tail(int step) const;
  std::filesystem::path expert(int step) const;
  std::filesystem::path unified(int step) const;
  std::filesystem::path stage_log(const std::string& stage) const;
  std::filesystem::path logs() const { return root / "logs"; }
  std::filesystem::path metrics() const { return root / "metrics.json"; }
  std::filesystem::path report() const { return root / "report.json"; }
  std::filesystem::path plots() const { return root / "plots"; }
};

std::string finetune_stage_name(int step);
std::string transfer_stage_name(int step);

}  // namespace smoothtail

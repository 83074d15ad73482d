#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmkd/losses.hpp"
#include "vlmkd/models.hpp"
#include "vlmkd/optim.hpp"
#include "vlmkd/text_embedding.hpp"

namespace vlmkd {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double base_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 1;
  LossConfig loss;
  ScheduleKind schedule = ScheduleKind::Cosine;
  /// Evaluate on the validation split every this many epochs (0: only at the end).
  std::size_t eval_every = 0;
  bool hflip = true;
  /// Architecture template; num_classes, cache_dim, adaptor_count and
  /// kd_teacher_dim are filled in from the data, caches and teacher.
  ModelConfig model;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct LogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_total = 0.0;
  double loss_cls = 0.0;
  double loss_scl = 0.0;
  double loss_text = 0.0;
  double loss_kd = 0.0;
  double tau = 0.0;  // 0 when the model has no temperature
};
nlohmann::json to_json(const LogEntry& e);
void write_log(const std::string& path, const std::vector<LogEntry>& log);

struct EvalReport {
  double top1_overall = 0.0;
  std::optional<double> top1_many;
  std::optional<double> top1_medium;
  std::optional<double> top1_few;
  std::vector<double> per_class;
  std::vector<std::size_t> per_class_count;
  std::uint64_t seed = 0;
  nlohmann::json config;

  bool operator==(const EvalReport& other) const;
};
nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);

/// Recomputes overall and split accuracies from the per-class vector and
/// raises ContractError when the stored values disagree.
void check_report_consistency(const EvalReport& report, const std::vector<Split>& split_of_class);

/// Accuracy tally from predictions; split aggregates are per-class averages
/// within each split, overall is per sample. Splits without classes are absent.
EvalReport tally(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                 const std::vector<Split>& split_of_class);

/// Eval-mode predictions on `images`; never mutates the bundle.
EvalReport evaluate(const ModelBundle& bundle, const std::vector<SyntheticImage>& images,
                    const std::vector<Split>& split_of_class);

/// Frozen teacher outputs for every training image, for the plain and the
/// mirrored view (row i belongs to dataset.images[i]).
struct TeacherOutputs {
  Tensor logits;
  Tensor features;
  Tensor logits_flipped;
  Tensor features_flipped;
  std::size_t feature_dim() const { return features.dim(1); }
};
TeacherOutputs teacher_outputs(const ModelBundle& teacher, const SyntheticDataset& dataset);

struct TrainResult {
  ModelBundle bundle;  // full training checkpoint (adaptors, temperature, projection)
  std::vector<LogEntry> log;
  EvalReport report;
  std::vector<std::pair<std::size_t, EvalReport>> periodic;  // (epoch, report) when eval_every > 0
};

/// Runs epochs x batches of loss_total -> forward_backward -> sgd_step.
/// `caches` are id-aligned with the training split; `teacher` is required
/// when KD-Image is enabled. Raises WiringError on cache/dataset mismatch and
/// NumericError (naming step and term) on a non-finite loss.
TrainResult train(const SyntheticDataset& dataset, const std::vector<EmbeddingCache>& caches,
                  const TrainConfig& config, const TeacherOutputs* teacher = nullptr);

struct TeacherResult {
  ModelBundle bundle;
  EvalReport report;
  double majority_baseline = 0.0;
  bool weak = false;  // accuracy not above the majority-class baseline
};
/// Wider backbone (2x channels, 2x d_img) trained with L_cls only.
TeacherResult make_teacher(const SyntheticDataset& dataset, const TrainConfig& student_config);
TrainConfig teacher_config(const TrainConfig& student_config);

/// image_embeddings.csv plus text_embeddings_<k>.csv per cache.
std::vector<std::string> export_embeddings(const ModelBundle& bundle, const SyntheticDataset& dataset,
                                           const std::vector<EmbeddingCache>& caches, const std::string& dir);

}  // namespace vlmkd

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vlmkd/autograd.hpp"
#include "vlmkd/models.hpp"

namespace vlmkd {

enum class TextMode { Off, Single, Shared, Separate, Concat };
enum class Reduction { Mean, Sum };

std::string_view to_string(TextMode mode);
TextMode text_mode_from_string(std::string_view s);
std::string_view to_string(Reduction r);
Reduction reduction_from_string(std::string_view s);

struct LossConfig {
  bool use_cls = true;
  bool use_scl = false;
  TextMode text_mode = TextMode::Off;
  double alpha = 1.0;
  double scl_temperature = 0.07;
  Reduction text_reduction = Reduction::Mean;
  bool kd_image = false;
  bool symmetric_text_loss = false;
};

nlohmann::json to_json(const LossConfig& config);
LossConfig loss_config_from_json(const nlohmann::json& j);

/// Logit-adjusted cross-entropy: mean of -log_softmax(Z + log pi)[y].
/// Raises DomainError when any prior is not strictly positive.
Var loss_cls(Var logits, const std::vector<std::size_t>& labels, const std::vector<double>& priors);

/// Supervised contrastive loss on l2-normalized rows. Anchors without a
/// positive contribute nothing; a batch without any positive pair gives 0.
Var loss_scl(Var embeddings, const std::vector<std::size_t>& labels, double temperature);

/// Image-to-text contrastive loss between adapted features F (B, D) and cached
/// text features G (B, D); both are l2-normalized here and G is a constant.
/// Row i's target is column i, logits are S * inv_tau. The symmetric variant
/// averages the image-to-text and text-to-image directions. With fewer than
/// `min_rows` rows the batch is skipped (warning, returns 0).
Var loss_text(Var features, const Tensor& text, Var inv_tau, Reduction reduction = Reduction::Mean,
              bool symmetric = false, std::size_t min_rows = 2);

/// (1/B) sum_i KL(softmax(qS_i) || softmax(qT_i)) + (1/B) sum_i ||fS_i - fT_i||^2.
/// Teacher tensors are constants.
Var loss_kd_image(Var student_logits, const Tensor& teacher_logits, Var student_features,
                  const Tensor& teacher_features);

/// Everything one optimization step needs, all rows aligned with `labels`.
struct Batch {
  Tensor images;  // (B, H, W, 3)
  std::vector<std::size_t> labels;
  /// One (B, cache_dim) block per text cache; rows of flagged (zero-caption)
  /// ids are listed in `text_excluded` and left out of that cache's term.
  std::vector<Tensor> text;
  std::vector<std::vector<std::size_t>> text_excluded;
  std::optional<Tensor> teacher_logits;
  std::optional<Tensor> teacher_features;
};

struct LossTerms {
  Var total;
  double cls = 0.0;
  double scl = 0.0;
  double text = 0.0;
  double kd = 0.0;
};

/// Text term of the objective over all caches: shared (one adaptor for every
/// cache), separate (adaptor k for cache k), single/concat (one cache, one
/// adaptor), off (0).
Var loss_text_aggregate(Graph& g, const ModelConfig& model, const LossConfig& config, Var embeddings,
                        const Batch& batch);

/// L = L_cls + L_scl + alpha * sum_k L_text + L_kd over the enabled terms.
/// Disabled terms are not built, so they contribute no gradient.
LossTerms loss_total(Graph& g, const ModelConfig& model, const LossConfig& config, const Batch& batch,
                     const std::vector<double>& priors);

/// Checks that the configured mode fits the number of caches and their
/// provenance (concat needs one cache built from at least two prompts).
void validate_text_wiring(const LossConfig& config, std::size_t cache_count,
                          const std::vector<std::size_t>& sources_per_cache);

}  // namespace vlmkd

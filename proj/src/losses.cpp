#include "vlmkd/losses.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <nlohmann/json.hpp>

#include "vlmkd/error.hpp"

namespace vlmkd {

std::string_view to_string(TextMode mode) {
  switch (mode) {
    case TextMode::Off:
      return "off";
    case TextMode::Single:
      return "single";
    case TextMode::Shared:
      return "shared";
    case TextMode::Separate:
      return "separate";
    case TextMode::Concat:
      return "concat";
  }
  return "off";
}

TextMode text_mode_from_string(std::string_view s) {
  for (auto m : {TextMode::Off, TextMode::Single, TextMode::Shared, TextMode::Separate, TextMode::Concat}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown text mode '" + std::string(s) + "' (expected off|single|shared|separate|concat)");
}

std::string_view to_string(Reduction r) { return r == Reduction::Mean ? "mean" : "sum"; }

Reduction reduction_from_string(std::string_view s) {
  if (s == "mean") return Reduction::Mean;
  if (s == "sum") return Reduction::Sum;
  throw ConfigError("unknown text reduction '" + std::string(s) + "' (expected mean|sum)");
}

nlohmann::json to_json(const LossConfig& c) {
  return {{"use_cls", c.use_cls},
          {"use_scl", c.use_scl},
          {"text_mode", to_string(c.text_mode)},
          {"alpha", c.alpha},
          {"scl_temperature", c.scl_temperature},
          {"text_reduction", to_string(c.text_reduction)},
          {"kd_image", c.kd_image},
          {"symmetric_text_loss", c.symmetric_text_loss}};
}

LossConfig loss_config_from_json(const nlohmann::json& j) {
  LossConfig c;
  c.use_cls = j.value("use_cls", c.use_cls);
  c.use_scl = j.value("use_scl", c.use_scl);
  c.text_mode = text_mode_from_string(j.value("text_mode", std::string(to_string(c.text_mode))));
  c.alpha = j.value("alpha", c.alpha);
  c.scl_temperature = j.value("scl_temperature", c.scl_temperature);
  c.text_reduction = reduction_from_string(j.value("text_reduction", std::string(to_string(c.text_reduction))));
  c.kd_image = j.value("kd_image", c.kd_image);
  c.symmetric_text_loss = j.value("symmetric_text_loss", c.symmetric_text_loss);
  return c;
}

Var loss_cls(Var logits, const std::vector<std::size_t>& labels, const std::vector<double>& priors) {
  if (logits.shape().size() != 2 || logits.shape()[1] != priors.size()) {
    throw ContractError("loss_cls: logits " + shape_string(logits.shape()) + " do not match " +
                        std::to_string(priors.size()) + " priors");
  }
  Tensor log_prior(Shape{priors.size()});
  for (std::size_t c = 0; c < priors.size(); ++c) {
    if (!(priors[c] > 0.0)) throw DomainError("class prior " + std::to_string(c) + " is not strictly positive");
    log_prior[c] = std::log(priors[c]);
  }
  Graph& g = *logits.graph();
  Var adjusted = add_bias(logits, g.constant(std::move(log_prior)));
  return neg(mean(pick(log_softmax_rows(adjusted), labels)));
}

Var loss_scl(Var embeddings, const std::vector<std::size_t>& labels, double temperature) {
  const std::size_t b = embeddings.shape()[0];
  if (labels.size() != b) throw ContractError("loss_scl: labels do not match the batch");
  if (!(temperature > 0.0)) throw ConfigError("loss_scl: temperature must be positive");
  Graph& g = *embeddings.graph();

  std::vector<std::size_t> positives(b, 0);
  std::size_t anchors = 0;
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) positives[i] += (i != j && labels[i] == labels[j]);
    anchors += positives[i] > 0;
  }
  if (anchors == 0) return g.constant(Tensor::scalar(0.0));

  Tensor mask(Shape{b, b});
  Tensor weight(Shape{b, b});
  for (std::size_t i = 0; i < b; ++i) {
    mask.at(i, i) = -1e9;
    for (std::size_t j = 0; j < b; ++j) {
      if (i != j && labels[i] == labels[j]) {
        weight.at(i, j) = 1.0 / (static_cast<double>(positives[i]) * static_cast<double>(anchors));
      }
    }
  }
  Var z = l2_normalize_rows(embeddings);
  Var logits = add(scale(matmul_nt(z, z), 1.0 / temperature), g.constant(std::move(mask)));
  return neg(sum(mul(log_softmax_rows(logits), g.constant(std::move(weight)))));
}

Var loss_text(Var features, const Tensor& text, Var inv_tau, Reduction reduction, bool symmetric,
              std::size_t min_rows) {
  Graph& g = *features.graph();
  const std::size_t b = features.shape()[0];
  if (text.rank() != 2 || text.dim(0) != b || text.dim(1) != features.shape()[1]) {
    throw ContractError("loss_text: features " + shape_string(features.shape()) + " and text " +
                        shape_string(text.shape()) + " are not aligned");
  }
  if (b < min_rows) {
    spdlog::warn("text loss skipped: {} usable rows in batch (need {})", b, min_rows);
    return g.constant(Tensor::scalar(0.0));
  }
  std::vector<std::size_t> diag(b);
  for (std::size_t i = 0; i < b; ++i) diag[i] = i;

  Var f = l2_normalize_rows(features);
  Var t = g.constant(l2_normalize(text, 1));
  auto direction = [&](Var rows, Var cols) {
    Var picked = pick(log_softmax_rows(mul_scalar(matmul_nt(rows, cols), inv_tau)), diag);
    return reduction == Reduction::Mean ? neg(mean(picked)) : neg(sum(picked));
  };
  Var loss = direction(f, t);
  if (symmetric) loss = scale(add(loss, direction(t, f)), 0.5);
  return loss;
}

Var loss_kd_image(Var student_logits, const Tensor& teacher_logits, Var student_features,
                  const Tensor& teacher_features) {
  Graph& g = *student_logits.graph();
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ContractError("loss_kd_image: student logits " + shape_string(student_logits.shape()) +
                        " vs teacher logits " + shape_string(teacher_logits.shape()));
  }
  if (student_features.shape() != teacher_features.shape()) {
    throw ContractError("loss_kd_image: student features " + shape_string(student_features.shape()) +
                        " vs teacher features " + shape_string(teacher_features.shape()) +
                        " (projection missing?)");
  }
  const double inv_b = 1.0 / static_cast<double>(student_logits.shape()[0]);

  Graph scratch;
  const Tensor log_pt = log_softmax_rows(scratch.constant(teacher_logits)).value();
  Var log_ps = log_softmax_rows(student_logits);
  Var kl = sum(mul(exp(log_ps), sub(log_ps, g.constant(log_pt))));
  Var feat = sum(square(sub(student_features, g.constant(teacher_features))));
  return scale(add(kl, feat), inv_b);
}

void validate_text_wiring(const LossConfig& config, std::size_t cache_count,
                          const std::vector<std::size_t>& sources_per_cache) {
  const std::string mode(to_string(config.text_mode));
  switch (config.text_mode) {
    case TextMode::Off:
      return;
    case TextMode::Single:
      if (cache_count != 1) {
        throw ConfigError("text mode single needs exactly one cache, got " + std::to_string(cache_count));
      }
      return;
    case TextMode::Shared:
    case TextMode::Separate:
      if (cache_count == 0) throw ConfigError("text mode " + mode + " needs at least one cache");
      return;
    case TextMode::Concat:
      if (cache_count != 1) {
        throw ConfigError("text mode concat needs exactly one cache built from concatenated captions, got " +
                          std::to_string(cache_count));
      }
      if (sources_per_cache.empty() || sources_per_cache[0] < 2) {
        throw ConfigError("text mode concat needs a cache encoded from at least two prompts (encode --concat)");
      }
      return;
  }
}

namespace {

std::vector<std::size_t> kept_rows(std::size_t b, const std::vector<std::size_t>& excluded) {
  std::vector<bool> drop(b, false);
  for (std::size_t r : excluded) {
    if (r < b) drop[r] = true;
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < b; ++i) {
    if (!drop[i]) rows.push_back(i);
  }
  return rows;
}

Tensor take_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t cols = t.dim(1);
  Tensor out(Shape{rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::copy(t.ptr() + rows[r] * cols, t.ptr() + (rows[r] + 1) * cols, out.ptr() + r * cols);
  }
  return out;
}

Var text_term(Var adapted, const Tensor& text, const std::vector<std::size_t>& excluded, Var inv_tau,
              const LossConfig& config) {
  const std::size_t b = adapted.shape()[0];
  if (excluded.empty()) return loss_text(adapted, text, inv_tau, config.text_reduction, config.symmetric_text_loss);
  const auto rows = kept_rows(b, excluded);
  return loss_text(select_rows(adapted, rows), take_rows(text, rows), inv_tau, config.text_reduction,
                   config.symmetric_text_loss);
}

}  // namespace

Var loss_text_aggregate(Graph& g, const ModelConfig& model, const LossConfig& config, Var embeddings,
                        const Batch& batch) {
  if (config.text_mode == TextMode::Off) return g.constant(Tensor::scalar(0.0));
  const std::size_t q = batch.text.size();
  if (q == 0) throw ConfigError("text mode " + std::string(to_string(config.text_mode)) + " needs text caches");
  const bool separate = config.text_mode == TextMode::Separate;
  if (config.text_mode == TextMode::Single || config.text_mode == TextMode::Concat) {
    if (q != 1) throw ConfigError("text mode " + std::string(to_string(config.text_mode)) + " takes one cache");
  }
  const std::size_t needed = separate ? q : 1;
  if (model.adaptor_count < needed) {
    throw WiringError("model has " + std::to_string(model.adaptor_count) + " text adaptors, mode needs " +
                      std::to_string(needed));
  }
  Var inv_tau = inverse_temperature(g);
  std::optional<Var> shared;
  Var total;
  for (std::size_t k = 0; k < q; ++k) {
    Var adapted;
    if (separate) {
      adapted = adapt(g, model, k, embeddings, Mode::Train);
    } else {
      if (!shared) shared = adapt(g, model, 0, embeddings, Mode::Train);
      adapted = *shared;
    }
    if (adapted.shape()[1] != batch.text[k].dim(1)) {
      throw WiringError("adaptor output dim " + std::to_string(adapted.shape()[1]) + " != cache dim " +
                        std::to_string(batch.text[k].dim(1)));
    }
    static const std::vector<std::size_t> none;
    const auto& excluded = k < batch.text_excluded.size() ? batch.text_excluded[k] : none;
    Var term = text_term(adapted, batch.text[k], excluded, inv_tau, config);
    total = k == 0 ? term : add(total, term);
  }
  return total;
}

LossTerms loss_total(Graph& g, const ModelConfig& model, const LossConfig& config, const Batch& batch,
                     const std::vector<double>& priors) {
  LossTerms terms;
  Var emb = backbone_forward(g, model, g.constant(batch.images));
  std::optional<Var> total;
  auto accumulate = [&](Var v) { total = total ? add(*total, v) : v; };
  std::optional<Var> logits;
  auto get_logits = [&]() {
    if (!logits) logits = classify(g, model, emb);
    return *logits;
  };

  if (config.use_cls) {
    Var v = loss_cls(get_logits(), batch.labels, priors);
    terms.cls = v.value().item();
    accumulate(v);
  }
  if (config.use_scl) {
    Var v = loss_scl(emb, batch.labels, config.scl_temperature);
    terms.scl = v.value().item();
    accumulate(v);
  }
  if (config.text_mode != TextMode::Off) {
    Var v = loss_text_aggregate(g, model, config, emb, batch);
    terms.text = v.value().item();
    accumulate(scale(v, config.alpha));
  }
  if (config.kd_image) {
    if (!batch.teacher_logits || !batch.teacher_features) {
      throw ConfigError("KD-Image is enabled but the batch carries no teacher outputs");
    }
    // Features are compared on the unit sphere the cosine head works on.
    Var v = loss_kd_image(get_logits(), *batch.teacher_logits, l2_normalize_rows(kd_project(g, model, emb)),
                          l2_normalize(*batch.teacher_features, 1));
    terms.kd = v.value().item();
    accumulate(v);
  }
  if (!total) throw ConfigError("every loss term is disabled");
  terms.total = *total;
  return terms;
}

}  // namespace vlmkd

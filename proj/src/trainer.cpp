#include "vlmkd/trainer.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "vlmkd/binio.hpp"
#include "vlmkd/error.hpp"
#include "vlmkd/rng.hpp"

namespace vlmkd {

namespace {

constexpr std::uint64_t kFlipStream = 0xF11F0000ULL;

const char* schedule_name(ScheduleKind k) { return k == ScheduleKind::Cosine ? "cosine" : "constant"; }

nlohmann::json optional_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

bool same_optional(const std::optional<double>& a, const std::optional<double>& b) {
  return a.has_value() == b.has_value() && (!a || *a == *b);
}

bool text_enabled(const LossConfig& c) { return c.text_mode != TextMode::Off; }

// Rows of `cache` in training-image order plus the rows to leave out of the
// contrastive term (zero-caption entries).
struct TextTable {
  Tensor rows;
  std::vector<bool> excluded;
};

TextTable text_table(const EmbeddingCache& cache, const SyntheticDataset& dataset) {
  std::vector<std::string> missing;
  for (const auto& im : dataset.images) {
    if (!cache.entries.count(im.id)) missing.push_back(im.id);
  }
  if (!missing.empty()) {
    std::string list;
    for (std::size_t i = 0; i < std::min<std::size_t>(missing.size(), 5); ++i) list += (i ? ", " : "") + missing[i];
    throw WiringError("embedding cache (" + (cache.sources.empty() ? std::string("?") : cache.sources.front()) +
                      ") is missing " + std::to_string(missing.size()) + " training ids: " + list +
                      (missing.size() > 5 ? ", ..." : ""));
  }
  TextTable t;
  t.rows = Tensor(Shape{dataset.images.size(), cache.dim});
  t.excluded.assign(dataset.images.size(), false);
  std::size_t excluded = 0;
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const auto& v = cache.at(dataset.images[i].id);
    double sq = 0.0;
    for (std::size_t j = 0; j < cache.dim; ++j) {
      t.rows.at(i, j) = v[j];
      sq += static_cast<double>(v[j]) * v[j];
    }
    if (sq == 0.0 || cache.flagged.count(dataset.images[i].id)) {
      t.excluded[i] = true;
      ++excluded;
    }
  }
  if (excluded > 0) spdlog::info("{} zero-caption ids excluded from the text loss", excluded);
  return t;
}

Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& idx) {
  const std::size_t cols = table.dim(1);
  Tensor out(Shape{idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::copy(table.ptr() + idx[r] * cols, table.ptr() + (idx[r] + 1) * cols, out.ptr() + r * cols);
  }
  return out;
}

Tensor gather_rows_flip(const Tensor& plain, const Tensor& flipped, const std::vector<std::size_t>& idx,
                        const std::vector<bool>& flip) {
  const std::size_t cols = plain.dim(1);
  Tensor out(Shape{idx.size(), cols});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const Tensor& src = flip.empty() || !flip[r] ? plain : flipped;
    std::copy(src.ptr() + idx[r] * cols, src.ptr() + (idx[r] + 1) * cols, out.ptr() + r * cols);
  }
  return out;
}

void validate(const SyntheticDataset& dataset, const std::vector<EmbeddingCache>& caches, const TrainConfig& c,
              const TeacherOutputs* teacher) {
  if (dataset.images.empty()) throw ConfigError("training split is empty");
  if (c.batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(c.base_lr > 0.0)) throw ConfigError("learning rate must be positive");
  if ((c.loss.use_scl || text_enabled(c.loss)) && c.batch_size < 2) {
    throw ConfigError("contrastive terms need a batch size of at least 2");
  }
  if (c.loss.kd_image && !teacher) throw ConfigError("KD-Image needs teacher weights (--teacher)");
  if (teacher && teacher->logits.dim(0) != dataset.images.size()) {
    throw WiringError("teacher outputs cover " + std::to_string(teacher->logits.dim(0)) + " images, dataset has " +
                      std::to_string(dataset.images.size()));
  }
  if (teacher && teacher->logits.dim(1) != dataset.num_classes()) {
    throw WiringError("teacher predicts " + std::to_string(teacher->logits.dim(1)) + " classes, dataset has " +
                      std::to_string(dataset.num_classes()));
  }
  if (text_enabled(c.loss)) {
    std::vector<std::size_t> sources;
    for (const auto& cache : caches) sources.push_back(cache.sources.size());
    validate_text_wiring(c.loss, caches.size(), sources);
    for (const auto& cache : caches) {
      if (cache.dim != caches.front().dim) {
        throw ConfigError("text caches disagree on dim (" + std::to_string(cache.dim) + " vs " +
                          std::to_string(caches.front().dim) + ")");
      }
    }
  }
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                    std::size_t epoch) {
  auto batches = batch_iter(n, batch_size, seed, epoch);
  // A trailing singleton batch cannot feed batch normalization or in-batch
  // negatives; fold it into the previous batch.
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"base_lr", c.base_lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"loss", to_json(c.loss)},
          {"schedule", schedule_name(c.schedule)},
          {"eval_every", c.eval_every},
          {"hflip", c.hflip},
          {"model", to_json(c.model)}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss")) c.loss = loss_config_from_json(j.at("loss"));
    const std::string sched = j.value("schedule", std::string("cosine"));
    if (sched != "cosine" && sched != "constant") throw ConfigError("unknown schedule '" + sched + "'");
    c.schedule = sched == "cosine" ? ScheduleKind::Cosine : ScheduleKind::Constant;
    c.eval_every = j.value("eval_every", c.eval_every);
    c.hflip = j.value("hflip", c.hflip);
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed training config: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const LogEntry& e) {
  return {{"step", e.step},         {"lr", e.lr},           {"loss_total", e.loss_total},
          {"loss_cls", e.loss_cls}, {"loss_scl", e.loss_scl}, {"loss_text", e.loss_text},
          {"loss_kd", e.loss_kd},   {"tau", e.tau}};
}

void write_log(const std::string& path, const std::vector<LogEntry>& log) {
  std::string text;
  for (const auto& e : log) text += to_json(e).dump() + "\n";
  binio::write_text(path, text);
}

bool EvalReport::operator==(const EvalReport& o) const {
  return top1_overall == o.top1_overall && same_optional(top1_many, o.top1_many) &&
         same_optional(top1_medium, o.top1_medium) && same_optional(top1_few, o.top1_few) &&
         per_class == o.per_class && per_class_count == o.per_class_count && seed == o.seed && config == o.config;
}

nlohmann::json to_json(const EvalReport& r) {
  return {{"top1_overall", r.top1_overall},
          {"top1_many", optional_json(r.top1_many)},
          {"top1_medium", optional_json(r.top1_medium)},
          {"top1_few", optional_json(r.top1_few)},
          {"per_class", r.per_class},
          {"per_class_count", r.per_class_count},
          {"seed", r.seed},
          {"config", r.config}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
  EvalReport r;
  try {
    r.top1_overall = j.at("top1_overall");
    r.top1_many = optional_from(j, "top1_many");
    r.top1_medium = optional_from(j, "top1_medium");
    r.top1_few = optional_from(j, "top1_few");
    r.per_class = j.at("per_class").get<std::vector<double>>();
    r.per_class_count = j.at("per_class_count").get<std::vector<std::size_t>>();
    r.seed = j.value("seed", std::uint64_t{0});
    r.config = j.value("config", nlohmann::json());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed eval report: ") + e.what());
  }
  return r;
}

EvalReport tally(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels,
                 const std::vector<Split>& split_of_class) {
  if (predictions.size() != labels.size()) throw ContractError("tally: predictions and labels differ in length");
  const std::size_t c = split_of_class.size();
  std::vector<std::size_t> correct(c, 0), count(c, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= c) throw ContractError("tally: label out of range");
    ++count[labels[i]];
    correct[labels[i]] += predictions[i] == labels[i];
  }
  EvalReport r;
  r.per_class.assign(c, 0.0);
  r.per_class_count = count;
  std::size_t total_correct = 0;
  std::array<double, 3> split_sum{};
  std::array<std::size_t, 3> split_n{};
  for (std::size_t k = 0; k < c; ++k) {
    total_correct += correct[k];
    if (count[k] == 0) continue;
    r.per_class[k] = static_cast<double>(correct[k]) / static_cast<double>(count[k]);
    const auto s = static_cast<std::size_t>(split_of_class[k]);
    split_sum[s] += r.per_class[k];
    ++split_n[s];
  }
  r.top1_overall = labels.empty() ? 0.0 : static_cast<double>(total_correct) / static_cast<double>(labels.size());
  auto split_value = [&](Split s) -> std::optional<double> {
    const auto i = static_cast<std::size_t>(s);
    if (split_n[i] == 0) return std::nullopt;
    return split_sum[i] / static_cast<double>(split_n[i]);
  };
  r.top1_many = split_value(Split::Many);
  r.top1_medium = split_value(Split::Medium);
  r.top1_few = split_value(Split::Few);
  return r;
}

void check_report_consistency(const EvalReport& r, const std::vector<Split>& split_of_class) {
  if (r.per_class.size() != split_of_class.size() || r.per_class_count.size() != split_of_class.size()) {
    throw ContractError("eval report has the wrong number of classes");
  }
  double weighted = 0.0;
  std::size_t total = 0;
  std::array<double, 3> split_sum{};
  std::array<std::size_t, 3> split_n{};
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    if (r.per_class_count[k] == 0) continue;
    weighted += r.per_class[k] * static_cast<double>(r.per_class_count[k]);
    total += r.per_class_count[k];
    const auto s = static_cast<std::size_t>(split_of_class[k]);
    split_sum[s] += r.per_class[k];
    ++split_n[s];
  }
  auto close = [](double a, double b) { return std::abs(a - b) <= 1e-12; };
  if (total > 0 && !close(weighted / static_cast<double>(total), r.top1_overall)) {
    throw ContractError("overall accuracy disagrees with the per-class vector");
  }
  const std::array<const std::optional<double>*, 3> fields{&r.top1_many, &r.top1_medium, &r.top1_few};
  for (std::size_t s = 0; s < 3; ++s) {
    if (split_n[s] == 0) {
      if (fields[s]->has_value()) throw ContractError("split accuracy present for an empty split");
    } else if (!fields[s]->has_value() || !close(**fields[s], split_sum[s] / static_cast<double>(split_n[s]))) {
      throw ContractError("split accuracy disagrees with the per-class vector");
    }
  }
}

EvalReport evaluate(const ModelBundle& bundle, const std::vector<SyntheticImage>& images,
                    const std::vector<Split>& split_of_class) {
  if (split_of_class.size() != bundle.config.num_classes) {
    throw WiringError("model has " + std::to_string(bundle.config.num_classes) + " classes, dataset has " +
                      std::to_string(split_of_class.size()));
  }
  std::vector<const SyntheticImage*> ptrs;
  std::vector<std::size_t> labels;
  for (const auto& im : images) {
    ptrs.push_back(&im);
    labels.push_back(im.label);
  }
  const auto out = predict(bundle, ptrs);
  const std::size_t c = bundle.config.num_classes;
  std::vector<std::size_t> pred(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double* row = out.logits.ptr() + i * c;
    pred[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  EvalReport r = tally(pred, labels, split_of_class);
  check_report_consistency(r, split_of_class);
  return r;
}

TeacherOutputs teacher_outputs(const ModelBundle& teacher, const SyntheticDataset& dataset) {
  std::vector<const SyntheticImage*> plain;
  std::vector<SyntheticImage> mirrored(dataset.images.size());
  std::vector<const SyntheticImage*> flipped;
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    plain.push_back(&dataset.images[i]);
    mirrored[i].id = dataset.images[i].id;
    mirrored[i].pixels = flip_horizontal(dataset.images[i].pixels, dataset.image_size());
    flipped.push_back(&mirrored[i]);
  }
  TeacherOutputs t;
  auto a = predict(teacher, plain);
  auto b = predict(teacher, flipped);
  t.logits = std::move(a.logits);
  t.features = std::move(a.embeddings);
  t.logits_flipped = std::move(b.logits);
  t.features_flipped = std::move(b.embeddings);
  return t;
}

TrainResult train(const SyntheticDataset& dataset, const std::vector<EmbeddingCache>& caches,
                  const TrainConfig& config, const TeacherOutputs* teacher) {
  validate(dataset, caches, config, teacher);
  const LossConfig& lc = config.loss;

  ModelConfig mc = config.model;
  mc.num_classes = dataset.num_classes();
  mc.image_size = dataset.image_size();
  mc.adaptor_count = 0;
  if (text_enabled(lc)) {
    mc.cache_dim = caches.front().dim;
    mc.adaptor_count = lc.text_mode == TextMode::Separate ? caches.size() : 1;
  }
  mc.kd_teacher_dim = lc.kd_image ? teacher->feature_dim() : 0;

  TrainResult result;
  result.bundle = init_model(mc, config.seed);
  ParamStore& params = result.bundle.params;

  std::vector<TextTable> tables;
  if (text_enabled(lc)) {
    for (const auto& cache : caches) tables.push_back(text_table(cache, dataset));
  }

  const std::size_t n = dataset.images.size();
  const std::size_t batches_per_epoch = epoch_batches(n, config.batch_size, config.seed, 0).size();
  LrSchedule schedule{config.base_lr, std::max<std::size_t>(1, config.epochs * batches_per_epoch), config.schedule};
  const bool has_tau = params.contains("tau.log_inv_tau");

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& idx : epoch_batches(n, config.batch_size, config.seed, epoch)) {
      Batch batch;
      std::vector<const SyntheticImage*> ptrs;
      std::vector<bool> flip;
      Rng flip_rng(mix_seed(config.seed, kFlipStream + step));
      for (std::size_t i : idx) {
        ptrs.push_back(&dataset.images[i]);
        batch.labels.push_back(dataset.images[i].label);
        flip.push_back(config.hflip && flip_rng.uniform() < 0.5);
      }
      batch.images = images_tensor(ptrs, mc.image_size, flip);
      for (const auto& t : tables) {
        batch.text.push_back(gather_rows(t.rows, idx));
        std::vector<std::size_t> excluded;
        for (std::size_t r = 0; r < idx.size(); ++r) {
          if (t.excluded[idx[r]]) excluded.push_back(r);
        }
        batch.text_excluded.push_back(std::move(excluded));
      }
      if (lc.kd_image) {
        batch.teacher_logits = gather_rows_flip(teacher->logits, teacher->logits_flipped, idx, flip);
        batch.teacher_features = gather_rows_flip(teacher->features, teacher->features_flipped, idx, flip);
      }

      const double lr = lr_at(schedule, step);
      LossTerms terms;
      const double total = forward_backward(
          [&](Graph& g) {
            terms = loss_total(g, mc, lc, batch, dataset.priors);
            const std::pair<const char*, double> parts[] = {
                {"loss_cls", terms.cls}, {"loss_scl", terms.scl}, {"loss_text", terms.text}, {"loss_kd", terms.kd}};
            for (const auto& [name, v] : parts) {
              if (!std::isfinite(v)) {
                throw NumericError("non-finite " + std::string(name) + " at step " + std::to_string(step));
              }
            }
            return terms.total;
          },
          params);
      sgd_step(params, lr, config.momentum, config.weight_decay);

      LogEntry e;
      e.step = step;
      e.lr = lr;
      e.loss_total = total;
      e.loss_cls = terms.cls;
      e.loss_scl = terms.scl;
      e.loss_text = terms.text;
      e.loss_kd = terms.kd;
      e.tau = has_tau ? temperature(params) : 0.0;
      result.log.push_back(e);
      ++step;
    }
    if (config.eval_every > 0 && (epoch + 1) % config.eval_every == 0 && epoch + 1 < config.epochs) {
      result.periodic.emplace_back(epoch + 1, evaluate(result.bundle, dataset.val_images, dataset.split_of_class));
    }
  }

  result.report = evaluate(result.bundle, dataset.val_images, dataset.split_of_class);
  result.report.seed = config.seed;
  TrainConfig echo = config;
  echo.model = mc;
  result.report.config = to_json(echo);
  return result;
}

TrainConfig teacher_config(const TrainConfig& student) {
  TrainConfig t = student;
  t.loss = LossConfig{};
  for (auto& ch : t.model.channels) ch *= 2;
  t.model.d_img = student.model.d_img * 2;
  t.epochs = student.epochs + student.epochs / 2;
  return t;
}

TeacherResult make_teacher(const SyntheticDataset& dataset, const TrainConfig& student_config) {
  const TrainConfig tc = teacher_config(student_config);
  TrainResult run = train(dataset, {}, tc);
  TeacherResult r;
  r.bundle = inference_bundle(run.bundle);
  r.report = run.report;
  r.majority_baseline = 1.0 / static_cast<double>(dataset.num_classes());
  r.weak = !(r.report.top1_overall > r.majority_baseline);
  if (r.weak) {
    spdlog::warn("teacher accuracy {:.3f} is not above the majority-class baseline {:.3f}", r.report.top1_overall,
                 r.majority_baseline);
  }
  return r;
}

std::vector<std::string> export_embeddings(const ModelBundle& bundle, const SyntheticDataset& dataset,
                                           const std::vector<EmbeddingCache>& caches, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::vector<const SyntheticImage*> ptrs;
  for (const auto& im : dataset.images) ptrs.push_back(&im);
  const auto out = predict(bundle, ptrs);
  std::vector<std::string> paths;

  {
    std::string text = "id,label";
    for (std::size_t j = 0; j < bundle.config.d_img; ++j) text += ",e" + std::to_string(j);
    text += "\n";
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      text += ptrs[i]->id + "," + std::to_string(ptrs[i]->label);
      for (std::size_t j = 0; j < bundle.config.d_img; ++j) text += "," + csv_number(out.embeddings.at(i, j));
      text += "\n";
    }
    paths.push_back((std::filesystem::path(dir) / "image_embeddings.csv").string());
    binio::write_text(paths.back(), text);
  }
  for (std::size_t k = 0; k < caches.size(); ++k) {
    const auto& cache = caches[k];
    std::string text = "id,label";
    for (std::size_t j = 0; j < cache.dim; ++j) text += ",t" + std::to_string(j);
    text += "\n";
    for (const auto* im : ptrs) {
      const auto& v = cache.at(im->id);
      text += im->id + "," + std::to_string(im->label);
      for (float x : v) text += "," + csv_number(x);
      text += "\n";
    }
    paths.push_back((std::filesystem::path(dir) / ("text_embeddings_" + std::to_string(k) + ".csv")).string());
    binio::write_text(paths.back(), text);
  }
  return paths;
}

}  // namespace vlmkd

// vlmkd: command-line front end for the data -> captions -> caches -> train
// -> eval pipeline. Every subcommand writes into its own --out directory and
// leaves a manifest.json describing the run.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <nlohmann/json.hpp>

#include "vlmkd/binio.hpp"
#include "vlmkd/captions.hpp"
#include "vlmkd/error.hpp"
#include "vlmkd/grid.hpp"
#include "vlmkd/remote.hpp"
#include "vlmkd/text_embedding.hpp"
#include "vlmkd/trainer.hpp"

using namespace vlmkd;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Manifest {
  explicit Manifest(std::string cmd) : command(std::move(cmd)) {}

  std::string command;
  json config = json::object();
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> artifacts;
  std::string started = timestamp();

  void write(const std::string& out) const {
    json j = {{"command", command}, {"config", config},     {"seeds", seeds},
              {"artifacts", artifacts}, {"tool_version", kVersion}, {"started", started},
              {"finished", timestamp()}};
    binio::write_text((fs::path(out) / "manifest.json").string(), j.dump(2) + "\n");
  }
};

// Output directories must be fresh unless --force is given.
void prepare_out(const std::string& out, bool force) {
  if (out.empty()) throw ConfigError("--out is required");
  if (fs::exists(out) && !fs::is_directory(out)) throw PathError("--out '" + out + "' exists and is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    if (!force) throw ConfigError("output directory '" + out + "' is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
}

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

Endpoint endpoint_from(const std::string& url, const std::string& model, int attempts, double backoff) {
  if (url.empty()) throw ConfigError("remote source needs --endpoint");
  if (attempts < 1) throw RangeError("--attempts must be at least 1");
  Endpoint e;
  e.url = url;
  e.model = model;
  e.attempts = attempts;
  e.backoff_seconds = backoff;
  e.api_key = api_key_from_env();
  if (e.api_key.empty()) spdlog::info("{} is not set; sending requests without a key", kApiKeyEnv);
  return e;
}

std::vector<EmbeddingCache> load_caches(const std::vector<std::string>& paths) {
  std::vector<EmbeddingCache> caches;
  for (const auto& p : paths) caches.push_back(load_cache(p));
  return caches;
}

ModelBundle load_model(const std::string& path) {
  if (!fs::exists(path)) {
    throw PathError("model '" + path + "' does not exist (train one with `vlmkd train` or `vlmkd teach`)");
  }
  return load_bundle(path);
}

// Training echo kept next to the bundle so `eval` can reproduce the report.
void write_training_echo(const std::string& bundle_path, const EvalReport& report) {
  const std::string side = bundle_path + ".json";
  json j = json::parse(binio::read_file(side));
  j["training"] = {{"seed", report.seed}, {"config", report.config}};
  binio::write_text(side, j.dump(2) + "\n");
}

void print_report(const EvalReport& r) {
  auto pct = [](std::optional<double> v) { return v ? fmt::format("{:6.2f}", 100.0 * *v) : std::string("     -"); };
  std::cout << "top-1  all " << pct(r.top1_overall) << "  many " << pct(r.top1_many) << "  medium "
            << pct(r.top1_medium) << "  few " << pct(r.top1_few) << "\n";
}

// --- gen-data ---------------------------------------------------------------

struct GenDataArgs {
  DataConfig data;
  std::string out;
  bool force = false;
};

void cmd_gen_data(const GenDataArgs& a) {
  prepare_out(a.out, a.force);
  Manifest m{"gen-data"};
  m.config = to_json(a.data);
  m.seeds = {a.data.seed};
  const SyntheticDataset ds = generate(a.data);
  save_dataset(a.out, ds);
  m.artifacts = {"meta.json", "index.json", "pixels.bin"};
  m.write(a.out);
  std::cout << "classes " << ds.num_classes() << ", train " << ds.images.size() << ", val " << ds.val_images.size()
            << "\n";
  for (std::size_t c = 0; c < ds.num_classes(); ++c) {
    std::cout << "  " << ds.classnames[c] << ": " << ds.class_counts[c] << " (" << to_string(ds.split_of_class[c])
              << ")\n";
  }
}

// --- caption ----------------------------------------------------------------

struct CaptionArgs {
  std::string data, prompt, source = "toy", endpoint, model, out;
  int attempts = 3;
  double backoff = 0.5;
  bool resume = false, force = false;
  std::size_t workers = 4;
};

int cmd_caption(const CaptionArgs& a) {
  const PromptTemplate& prompt = find_prompt(a.prompt);
  if (a.source != "toy" && a.source != "remote") throw ConfigError("--source must be toy or remote");
  std::optional<Endpoint> endpoint;
  if (a.source == "remote") endpoint = endpoint_from(a.endpoint, a.model, a.attempts, a.backoff);
  const SyntheticDataset ds = load_dataset(a.data);
  if (a.resume) {
    fs::create_directories(a.out);
  } else {
    prepare_out(a.out, a.force);
  }

  Manifest m{"caption"};
  m.config = {{"data", a.data}, {"prompt", prompt.id}, {"source", a.source}, {"resume", a.resume}, {"workers", a.workers}};
  if (endpoint) m.config["endpoint"] = describe(*endpoint);
  const std::string file = prompt.id + ".jsonl";
  const Captioner captioner = endpoint ? remote_captioner(*endpoint, ds.image_size()) : toy_captioner(ds.classnames);
  CaptionBuildOptions opts;
  opts.resume = a.resume;
  opts.workers = a.workers;
  const auto r = build_caption_set(ds, prompt, captioner, path_in(a.out, file), opts);
  m.artifacts = {file};
  if (!r.missing.empty()) m.artifacts.push_back(file + ".missing.json");
  m.write(a.out);
  std::cout << "captions: " << r.set.records.size() << " written, " << r.fetched << " fetched, " << r.reused
            << " reused, " << r.missing.size() << " missing\n";
  if (!r.missing.empty()) {
    throw PartialFailureError(std::to_string(r.missing.size()) + " captions failed; listed in " +
                              path_in(a.out, file + ".missing.json") + " (re-run with --resume)");
  }
  return 0;
}

// --- encode -----------------------------------------------------------------

struct EncodeArgs {
  std::vector<std::string> captions;
  std::string encoder = "hashed", endpoint, model, out;
  int attempts = 3;
  double backoff = 0.5;
  std::size_t dim = 64;
  bool concat = false, force = false;
};

void cmd_encode(const EncodeArgs& a) {
  if (a.encoder != "hashed" && a.encoder != "remote") throw ConfigError("--encoder must be hashed or remote");
  if (a.encoder == "hashed" && a.dim < 8) throw ConfigError("--dim must be at least 8");
  if (a.concat && a.captions.size() < 2) throw ConfigError("--concat needs at least two --captions files");
  std::optional<Endpoint> endpoint;
  if (a.encoder == "remote") endpoint = endpoint_from(a.endpoint, a.model, a.attempts, a.backoff);

  std::vector<CaptionSet> sets;
  for (const auto& path : a.captions) {
    if (!fs::exists(path)) throw PathError("caption file '" + path + "' does not exist (run `vlmkd caption`)");
    CaptionSet s = read_caption_file(path, fs::path(path).stem().string());
    if (s.records.empty()) throw ConfigError("caption file '" + path + "' is empty");
    sets.push_back(std::move(s));
  }
  prepare_out(a.out, a.force);
  Manifest m{"encode"};
  m.config = {{"captions", a.captions}, {"encoder", a.encoder}, {"dim", a.dim}, {"concat", a.concat}};
  if (endpoint) m.config["endpoint"] = describe(*endpoint);

  auto encode_one = [&](const CaptionSet& s) {
    return endpoint ? encode_caption_set_remote(s, *endpoint) : encode_caption_set_hashed(s, a.dim);
  };
  std::vector<std::pair<std::string, EmbeddingCache>> outputs;
  if (a.concat) {
    if (endpoint) {
      CaptionSet joined;
      for (const auto& s : sets) joined.prompt_id += (joined.prompt_id.empty() ? "" : "+") + s.prompt_id;
      joined.records = concatenate_captions(sets);
      EmbeddingCache c = encode_one(joined);
      c.sources.clear();
      for (const auto& s : sets) c.sources.push_back(s.prompt_id);
      outputs.emplace_back("concat.vkd", std::move(c));
    } else {
      outputs.emplace_back("concat.vkd", encode_concatenated_hashed(sets, a.dim));
    }
  } else {
    for (const auto& s : sets) outputs.emplace_back(s.prompt_id + ".vkd", encode_one(s));
  }
  for (const auto& [name, cache] : outputs) {
    if (cache.dim != outputs.front().second.dim) {
      throw ConfigError("caches disagree on dim (" + std::to_string(cache.dim) + " vs " +
                        std::to_string(outputs.front().second.dim) + ")");
    }
  }
  for (const auto& [name, cache] : outputs) {
    save_cache(path_in(a.out, name), cache);
    m.artifacts.push_back(name);
    m.artifacts.push_back(name + ".json");
    std::cout << name << ": " << cache.entries.size() << " vectors of dim " << cache.dim << ", " << cache.flagged.size()
              << " flagged\n";
  }
  m.write(a.out);
}

// --- train ------------------------------------------------------------------

struct TrainArgs {
  std::string data, config, mode = "off", teacher, reduction = "mean", out;
  std::vector<std::string> caches;
  std::optional<double> alpha, lr, wd, momentum;
  std::optional<std::size_t> epochs, batch, depth, eval_every;
  std::uint64_t seed = 1;
  bool kd_image = false, scl = false, symmetric = false, no_hflip = false, force = false;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig c;
  if (!a.config.empty()) {
    if (!fs::exists(a.config)) throw PathError("config file '" + a.config + "' does not exist");
    try {
      c = train_config_from_json(json::parse(binio::read_file(a.config)));
    } catch (const json::parse_error& e) {
      throw FormatError("config file '" + a.config + "' is not valid JSON: " + e.what());
    }
  }
  c.seed = a.seed;
  c.loss.text_mode = text_mode_from_string(a.mode);
  c.loss.text_reduction = reduction_from_string(a.reduction);
  if (a.alpha) c.loss.alpha = *a.alpha;
  if (a.lr) c.base_lr = *a.lr;
  if (a.wd) c.weight_decay = *a.wd;
  if (a.momentum) c.momentum = *a.momentum;
  if (a.epochs) c.epochs = *a.epochs;
  if (a.batch) c.batch_size = *a.batch;
  if (a.depth) c.model.adaptor_depth = *a.depth;
  if (a.eval_every) c.eval_every = *a.eval_every;
  if (a.kd_image) c.loss.kd_image = true;
  if (a.scl) c.loss.use_scl = true;
  if (a.symmetric) c.loss.symmetric_text_loss = true;
  if (a.no_hflip) c.hflip = false;
  return c;
}

void cmd_train(const TrainArgs& a) {
  const TrainConfig config = resolve_train_config(a);
  if (config.loss.text_mode != TextMode::Off && a.caches.empty()) {
    throw ConfigError("--mode " + a.mode + " needs at least one --caches file");
  }
  if (config.loss.kd_image && a.teacher.empty()) throw ConfigError("--kd-image needs teacher weights (--teacher)");
  const SyntheticDataset ds = load_dataset(a.data);
  const auto caches = config.loss.text_mode == TextMode::Off ? std::vector<EmbeddingCache>{} : load_caches(a.caches);
  std::optional<TeacherOutputs> teacher;
  if (config.loss.kd_image) teacher = teacher_outputs(load_model(a.teacher), ds);
  prepare_out(a.out, a.force);

  Manifest m{"train"};
  m.config = to_json(config);
  m.config["data"] = a.data;
  m.config["caches"] = a.caches;
  if (!a.teacher.empty()) m.config["teacher"] = a.teacher;
  m.seeds = {config.seed};

  const TrainResult r = train(ds, caches, config, teacher ? &*teacher : nullptr);
  save_bundle(path_in(a.out, "model.bin"), inference_bundle(r.bundle));
  write_training_echo(path_in(a.out, "model.bin"), r.report);
  save_bundle(path_in(a.out, "checkpoint.bin"), r.bundle);
  write_log(path_in(a.out, "log.jsonl"), r.log);
  binio::write_text(path_in(a.out, "report.json"), to_json(r.report).dump(2) + "\n");
  m.artifacts = {"model.bin", "model.bin.json", "checkpoint.bin", "checkpoint.bin.json", "log.jsonl", "report.json"};
  if (!r.periodic.empty()) {
    json periodic = json::array();
    for (const auto& [epoch, rep] : r.periodic) periodic.push_back({{"epoch", epoch}, {"report", to_json(rep)}});
    binio::write_text(path_in(a.out, "periodic.json"), periodic.dump(2) + "\n");
    m.artifacts.push_back("periodic.json");
  }
  m.write(a.out);
  print_report(r.report);
}

// --- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string data, model, out;
  bool force = false;
};

void cmd_eval(const EvalArgs& a) {
  const ModelBundle bundle = load_model(a.model);
  const SyntheticDataset ds = load_dataset(a.data);
  prepare_out(a.out, a.force);
  EvalReport r = evaluate(bundle, ds.val_images, ds.split_of_class);
  const json side = json::parse(binio::read_file(a.model + ".json"));
  if (side.contains("training")) {
    r.seed = side["training"].value("seed", std::uint64_t{0});
    r.config = side["training"].value("config", json());
  }
  binio::write_text(path_in(a.out, "report.json"), to_json(r).dump(2) + "\n");
  Manifest m{"eval"};
  m.config = {{"data", a.data}, {"model", a.model}};
  m.seeds = {r.seed};
  m.artifacts = {"report.json"};
  m.write(a.out);
  print_report(r);
}

// --- export -----------------------------------------------------------------

struct ExportArgs {
  std::string data, model, out;
  std::vector<std::string> caches;
  bool force = false;
};

void cmd_export(const ExportArgs& a) {
  const ModelBundle bundle = load_model(a.model);
  const SyntheticDataset ds = load_dataset(a.data);
  const auto caches = load_caches(a.caches);
  prepare_out(a.out, a.force);
  Manifest m{"export"};
  m.config = {{"data", a.data}, {"model", a.model}, {"caches", a.caches}};
  for (const auto& p : export_embeddings(bundle, ds, caches, a.out)) m.artifacts.push_back(fs::path(p).filename());
  m.write(a.out);
  for (const auto& f : m.artifacts) std::cout << path_in(a.out, f) << "\n";
}

// --- grid -------------------------------------------------------------------

struct GridArgs {
  std::string spec, out;
  std::optional<std::size_t> workers;
  std::optional<std::string> seeds;
  bool force = false;
};

int cmd_grid(const GridArgs& a) {
  if (!fs::exists(a.spec)) throw PathError("grid spec '" + a.spec + "' does not exist (see configs/)");
  GridSpec spec = load_grid_spec(a.spec);
  if (a.workers) spec.workers = *a.workers;
  prepare_out(a.out, a.force);
  Manifest m{"grid"};
  m.config = to_json(spec);
  m.config["spec_file"] = a.spec;
  m.seeds = spec.seeds;
  const GridResult g = run_experiment_grid(spec);
  binio::write_text(path_in(a.out, "grid.json"), to_json(g).dump(2) + "\n");
  const std::string md = grid_markdown(g);
  binio::write_text(path_in(a.out, "grid.md"), md);
  m.artifacts = {"grid.json", "grid.md"};
  m.write(a.out);
  std::cout << md;
  for (const auto& row : g.rows) {
    if (row.failed) return 2;
  }
  return 0;
}

// --- teach ------------------------------------------------------------------

struct TeachArgs {
  std::string data, config, out;
  std::optional<std::size_t> epochs, batch;
  std::optional<double> lr;
  std::uint64_t seed = 1;
  bool force = false;
};

void cmd_teach(const TeachArgs& a) {
  TrainArgs base;
  base.config = a.config;
  base.seed = a.seed;
  base.epochs = a.epochs;
  base.batch = a.batch;
  base.lr = a.lr;
  const TrainConfig student = resolve_train_config(base);
  const SyntheticDataset ds = load_dataset(a.data);
  prepare_out(a.out, a.force);
  Manifest m{"teach"};
  m.config = to_json(teacher_config(student));
  m.config["data"] = a.data;
  m.seeds = {a.seed};
  const TeacherResult t = make_teacher(ds, student);
  save_bundle(path_in(a.out, "teacher.bin"), t.bundle);
  write_training_echo(path_in(a.out, "teacher.bin"), t.report);
  binio::write_text(path_in(a.out, "report.json"), to_json(t.report).dump(2) + "\n");
  m.config["majority_baseline"] = t.majority_baseline;
  m.config["weak"] = t.weak;
  m.artifacts = {"teacher.bin", "teacher.bin.json", "report.json"};
  m.write(a.out);
  print_report(t.report);
  if (t.weak) std::cout << "warning: teacher is not better than the majority-class baseline\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Long-tail image classification with text supervision distilled from captions"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  app.fallthrough();
  bool verbose = false, quiet = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic long-tail dataset");
  gen->add_option("--classes", gd.data.num_classes, "Number of classes")->capture_default_str();
  gen->add_option("--n-max", gd.data.n_max, "Images in the largest class")->capture_default_str();
  gen->add_option("--n-min", gd.data.n_min, "Minimum images per class")->capture_default_str();
  gen->add_option("--gamma", gd.data.gamma, "Power-law decay")->capture_default_str();
  gen->add_option("--size", gd.data.image_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--seed", gd.data.seed, "Generator seed")->capture_default_str();
  gen->add_option("--val-per-class", gd.data.val_per_class, "Validation images per class")->capture_default_str();
  gen->add_option("--noise", gd.data.noise_sigma, "Pixel noise standard deviation")->capture_default_str();
  gen->add_option("--out", gd.out, "Output directory")->required();
  gen->add_flag("--force", gd.force, "Overwrite a non-empty output directory");

  CaptionArgs ca;
  auto* cap = app.add_subcommand("caption", "Caption every training image with one prompt");
  cap->add_option("--data", ca.data, "Dataset directory")->required();
  cap->add_option("--prompt", ca.prompt, "Prompt id")->required();
  cap->add_option("--source", ca.source, "toy or remote")->capture_default_str();
  cap->add_option("--endpoint", ca.endpoint, "Chat-completions URL (key from VLMKD_API_KEY)");
  cap->add_option("--model", ca.model, "Model name sent to the endpoint");
  cap->add_option("--workers", ca.workers, "Parallel requests")->capture_default_str();
  cap->add_option("--attempts", ca.attempts, "Tries per request")->capture_default_str();
  cap->add_option("--backoff", ca.backoff, "Seconds before the first retry, doubled after each")->capture_default_str();
  cap->add_flag("--resume", ca.resume, "Keep existing captions and fetch only missing ids");
  cap->add_option("--out", ca.out, "Output directory")->required();
  cap->add_flag("--force", ca.force, "Overwrite a non-empty output directory");

  EncodeArgs ea;
  auto* enc = app.add_subcommand("encode", "Encode caption files into embedding caches");
  enc->add_option("--captions", ea.captions, "Caption files (JSON lines)")->required();
  enc->add_option("--encoder", ea.encoder, "hashed or remote")->capture_default_str();
  enc->add_option("--dim", ea.dim, "Hashed encoder dimension")->capture_default_str();
  enc->add_option("--endpoint", ea.endpoint, "Embeddings URL (key from VLMKD_API_KEY)");
  enc->add_option("--model", ea.model, "Model name sent to the endpoint");
  enc->add_option("--attempts", ea.attempts, "Tries per request")->capture_default_str();
  enc->add_option("--backoff", ea.backoff, "Seconds before the first retry, doubled after each")->capture_default_str();
  enc->add_flag("--concat", ea.concat, "One cache from the concatenated captions of all files");
  enc->add_option("--out", ea.out, "Output directory")->required();
  enc->add_flag("--force", ea.force, "Overwrite a non-empty output directory");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train a student classifier");
  tr->add_option("--data", ta.data, "Dataset directory")->required();
  tr->add_option("--caches", ta.caches, "Embedding caches, one per prompt");
  tr->add_option("--config", ta.config, "Training config JSON; flags override it");
  tr->add_option("--mode", ta.mode, "off|single|shared|separate|concat")->capture_default_str();
  tr->add_option("--alpha", ta.alpha, "Text loss weight");
  tr->add_option("--epochs", ta.epochs, "Epochs");
  tr->add_option("--batch", ta.batch, "Batch size");
  tr->add_option("--lr", ta.lr, "Base learning rate");
  tr->add_option("--wd", ta.wd, "Weight decay");
  tr->add_option("--momentum", ta.momentum, "SGD momentum");
  tr->add_option("--adaptor-depth", ta.depth, "Hidden blocks per text adaptor (0-2)");
  tr->add_option("--eval-every", ta.eval_every, "Validation every N epochs");
  tr->add_option("--seed", ta.seed, "Seed")->capture_default_str();
  tr->add_option("--teacher", ta.teacher, "Teacher weights from `vlmkd teach`");
  tr->add_flag("--kd-image", ta.kd_image, "Add the KD-Image loss");
  tr->add_flag("--scl", ta.scl, "Add the supervised contrastive loss");
  tr->add_flag("--symmetric", ta.symmetric, "Symmetric image/text contrastive loss");
  tr->add_option("--text-reduction", ta.reduction, "mean or sum")->capture_default_str();
  tr->add_flag("--no-hflip", ta.no_hflip, "Disable horizontal flips");
  tr->add_option("--out", ta.out, "Output directory")->required();
  tr->add_flag("--force", ta.force, "Overwrite a non-empty output directory");

  EvalArgs va;
  auto* ev = app.add_subcommand("eval", "Evaluate a saved model on the validation split");
  ev->add_option("--data", va.data, "Dataset directory")->required();
  ev->add_option("--model", va.model, "Model bundle")->required();
  ev->add_option("--out", va.out, "Output directory")->required();
  ev->add_flag("--force", va.force, "Overwrite a non-empty output directory");

  ExportArgs xa;
  auto* ex = app.add_subcommand("export", "Write image and text embeddings as CSV");
  ex->add_option("--data", xa.data, "Dataset directory")->required();
  ex->add_option("--model", xa.model, "Model bundle")->required();
  ex->add_option("--caches", xa.caches, "Embedding caches");
  ex->add_option("--out", xa.out, "Output directory")->required();
  ex->add_flag("--force", xa.force, "Overwrite a non-empty output directory");

  GridArgs ga;
  auto* gr = app.add_subcommand("grid", "Run an experiment grid over seeds");
  gr->add_option("--spec", ga.spec, "Grid spec JSON")->required();
  gr->add_option("--workers", ga.workers, "Parallel training runs");
  gr->add_option("--out", ga.out, "Output directory")->required();
  gr->add_flag("--force", ga.force, "Overwrite a non-empty output directory");

  TeachArgs te;
  auto* tc = app.add_subcommand("teach", "Train the wider KD-Image teacher");
  tc->add_option("--data", te.data, "Dataset directory")->required();
  tc->add_option("--config", te.config, "Student training config JSON");
  tc->add_option("--epochs", te.epochs, "Student epochs (teacher runs 1.5x)");
  tc->add_option("--batch", te.batch, "Batch size");
  tc->add_option("--lr", te.lr, "Base learning rate");
  tc->add_option("--seed", te.seed, "Seed")->capture_default_str();
  tc->add_option("--out", te.out, "Output directory")->required();
  tc->add_flag("--force", te.force, "Overwrite a non-empty output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    if (*gen) cmd_gen_data(gd);
    if (*cap) return cmd_caption(ca);
    if (*enc) cmd_encode(ea);
    if (*tr) cmd_train(ta);
    if (*ev) cmd_eval(va);
    if (*ex) cmd_export(xa);
    if (*gr) return cmd_grid(ga);
    if (*tc) cmd_teach(te);
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return e.exit_code();
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}

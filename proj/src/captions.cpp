#include "vlmkd/captions.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "vlmkd/binio.hpp"
#include "vlmkd/error.hpp"

namespace vlmkd {

namespace {

std::size_t count_occurrences(const std::string& text, std::string_view needle) {
  std::size_t n = 0;
  for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + needle.size())) ++n;
  return n;
}

std::string texture_prefix(TextureKind t) {
  switch (t) {
    case TextureKind::Plain:
      return "";
    case TextureKind::Striped:
      return " striped";
    case TextureKind::Dotted:
      return " dotted";
  }
  return "";
}

std::string shard_path(const std::string& out_path, std::size_t worker) {
  return out_path + ".shard" + std::to_string(worker);
}

void read_records_into(const std::string& path, std::map<std::string, std::string>& records) {
  std::ifstream in(path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      records[rec.at("id").get<std::string>()] = rec.at("caption").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("caption file '" + path + "' line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

}  // namespace

void validate_prompt(const PromptTemplate& prompt) {
  const std::size_t n = count_occurrences(prompt.text, kClassPlaceholder);
  if (prompt.kind == PromptKind::Targeted && n != 1) {
    throw ConfigError("targeted prompt '" + prompt.id + "' must contain {classname} exactly once");
  }
  if (prompt.kind == PromptKind::General && n != 0) {
    throw ConfigError("general prompt '" + prompt.id + "' must not contain {classname}");
  }
}

std::vector<PromptTemplate> builtin_prompts() {
  return {
      {"general-short", PromptKind::General, "Please describe the image in one sentence."},
      {"general-long", PromptKind::General, "Please describe the image in detail."},
      {"keyword-short", PromptKind::General, "Please describe the image with three keywords."},
      {"keyword-long", PromptKind::General, "Please describe the image with ten keywords."},
      {"targeted-1", PromptKind::Targeted, "Please describe the {classname} in the image in one sentence."},
      {"targeted-2", PromptKind::Targeted, "Please describe the {classname} in the image in detail."},
      {"targeted-3", PromptKind::Targeted, "What visual features distinguish the {classname} in this image?"},
      {"targeted-4", PromptKind::Targeted, "List three keywords describing the {classname} in this image."},
  };
}

const PromptTemplate& find_prompt(const std::string& id) {
  static const std::vector<PromptTemplate> prompts = builtin_prompts();
  for (const auto& p : prompts) {
    if (p.id == id) return p;
  }
  std::string known;
  for (const auto& p : prompts) known += (known.empty() ? "" : ", ") + p.id;
  throw ConfigError("unknown prompt id '" + id + "'; builtin ids: " + known);
}

std::string render_prompt(const PromptTemplate& prompt, const std::string& classname) {
  validate_prompt(prompt);
  if (prompt.kind == PromptKind::General) return prompt.text;
  std::string out = prompt.text;
  out.replace(out.find(kClassPlaceholder), kClassPlaceholder.size(), classname);
  return out;
}

std::string toy_caption(const SyntheticImage& image, const PromptTemplate& prompt,
                        const std::vector<std::string>& classnames) {
  validate_prompt(prompt);
  const auto& a = image.attributes;
  const std::string size(to_string(a.size));
  const std::string color(to_string(a.color));
  const std::string shape(to_string(a.shape));
  const std::string texture(to_string(a.texture));
  const std::string name = image.label < classnames.size() ? classnames[image.label] : default_classname(image.label);

  std::ostringstream out;
  const std::string& id = prompt.id;
  if (id == "general-long") {
    out << "The image shows a " << size << ' ' << color << ' ' << shape << " with a " << texture
        << " texture near the center of a plain gray background, with no other objects in view.";
  } else if (id == "keyword-short") {
    out << color << ", " << shape << ", " << size;
  } else if (id == "keyword-long") {
    out << color << ", " << shape << ", " << size << ", " << texture
        << ", object, single, centered, gray, background, synthetic";
  } else if (id == "targeted-2") {
    out << "The image shows a " << name << ": a " << size << ' ' << color << ' ' << shape << " with a " << texture
        << " texture near the center of a plain gray background.";
  } else if (id == "targeted-3") {
    out << "The " << name << " is distinguished by its " << color << " color and " << shape << " shape.";
  } else if (id == "targeted-4") {
    out << name << ", " << color << ", " << shape;
  } else if (prompt.kind == PromptKind::Targeted) {  // targeted-1 and custom targeted prompts
    out << "a photo of a " << name << ", a " << size << ' ' << color << texture_prefix(a.texture) << ' ' << shape
        << " on a plain background";
  } else {  // general-short and custom general prompts
    out << "a " << size << ' ' << color << texture_prefix(a.texture) << ' ' << shape << " on a plain background";
  }
  return out.str();
}

void write_caption_file(const std::string& path, const CaptionSet& set) {
  std::string text;
  for (const auto& [id, caption] : set.records) {
    text += nlohmann::json{{"id", id}, {"caption", caption}}.dump() + "\n";
  }
  binio::write_text(path, text);
}

CaptionSet read_caption_file(const std::string& path, const std::string& prompt_id) {
  if (!std::filesystem::exists(path)) throw PathError("caption file '" + path + "' does not exist");
  CaptionSet set;
  set.prompt_id = prompt_id.empty() ? std::filesystem::path(path).stem().string() : prompt_id;
  read_records_into(path, set.records);
  return set;
}

Captioner toy_captioner(const std::vector<std::string>& classnames) {
  return [classnames](const SyntheticImage& image, const PromptTemplate& prompt, const std::string&) {
    return toy_caption(image, prompt, classnames);
  };
}

CaptionSet toy_caption_set(const SyntheticDataset& dataset, const PromptTemplate& prompt) {
  CaptionSet set;
  set.prompt_id = prompt.id;
  for (const auto& im : dataset.images) set.records[im.id] = toy_caption(im, prompt, dataset.classnames);
  return set;
}

CaptionBuildResult build_caption_set(const SyntheticDataset& dataset, const PromptTemplate& prompt,
                                     const Captioner& captioner, const std::string& out_path,
                                     const CaptionBuildOptions& options) {
  validate_prompt(prompt);
  const std::size_t workers = std::max<std::size_t>(1, options.workers);

  std::map<std::string, std::string> records;
  std::vector<std::string> stale_shards;
  for (std::size_t w = 0; std::filesystem::exists(shard_path(out_path, w)) || w < workers; ++w) {
    if (std::filesystem::exists(shard_path(out_path, w))) stale_shards.push_back(shard_path(out_path, w));
  }
  if (options.resume) {
    if (std::filesystem::exists(out_path)) read_records_into(out_path, records);
    for (const auto& shard : stale_shards) read_records_into(shard, records);
  }
  for (const auto& shard : stale_shards) std::filesystem::remove(shard);

  std::set<std::string> valid_ids;
  for (const auto& im : dataset.images) valid_ids.insert(im.id);
  std::erase_if(records, [&](const auto& kv) { return !valid_ids.count(kv.first) || kv.second.empty(); });

  std::vector<const SyntheticImage*> todo;
  for (const auto& im : dataset.images) {
    if (!records.count(im.id)) todo.push_back(&im);
  }

  CaptionBuildResult result;
  result.reused = records.size();
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::vector<std::string> missing;
  const std::size_t n_workers = std::min(workers, std::max<std::size_t>(todo.size(), 1));

  auto work = [&](std::size_t w) {
    std::ofstream shard(shard_path(out_path, w), std::ios::app);
    for (std::size_t k = next++; k < todo.size(); k = next++) {
      const SyntheticImage& im = *todo[k];
      const std::string& name = im.label < dataset.classnames.size() ? dataset.classnames[im.label] : "";
      try {
        std::string caption = captioner(im, prompt, name);
        if (caption.empty()) throw MalformedResponseError("empty caption");
        shard << nlohmann::json{{"id", im.id}, {"caption", caption}}.dump() << '\n';
        shard.flush();
      } catch (const std::exception& e) {
        spdlog::warn("caption for {} failed: {}", im.id, e.what());
        std::lock_guard lock(mu);
        missing.push_back(im.id);
      }
    }
  };
  if (!todo.empty()) {
    std::vector<std::thread> threads;
    for (std::size_t w = 1; w < n_workers; ++w) threads.emplace_back(work, w);
    work(0);
    for (auto& t : threads) t.join();
  }

  std::map<std::string, std::string> fetched;
  for (std::size_t w = 0; w < n_workers; ++w) {
    const auto path = shard_path(out_path, w);
    if (!std::filesystem::exists(path)) continue;
    read_records_into(path, fetched);
  }
  result.fetched = fetched.size();
  records.merge(fetched);

  result.set.prompt_id = prompt.id;
  result.set.records = std::move(records);
  write_caption_file(out_path, result.set);
  for (std::size_t w = 0; w < n_workers; ++w) std::filesystem::remove(shard_path(out_path, w));

  std::sort(missing.begin(), missing.end());
  result.missing = missing;
  const std::string missing_path = out_path + ".missing.json";
  if (!missing.empty()) {
    binio::write_text(missing_path, nlohmann::json{{"prompt_id", prompt.id}, {"missing", missing}}.dump(2) + "\n");
  } else {
    std::filesystem::remove(missing_path);
  }
  return result;
}

}  // namespace vlmkd

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vlmkd/synth_data.hpp"

namespace vlmkd {

enum class PromptKind { General, Targeted };

/// Targeted templates carry exactly one `{classname}` placeholder; General
/// templates carry none.
struct PromptTemplate {
  std::string id;
  PromptKind kind = PromptKind::General;
  std::string text;
};

inline constexpr std::string_view kClassPlaceholder = "{classname}";

void validate_prompt(const PromptTemplate& prompt);
std::vector<PromptTemplate> builtin_prompts();
/// Throws ConfigError listing every builtin id when `id` is unknown.
const PromptTemplate& find_prompt(const std::string& id);
/// Prompt text with the placeholder replaced (Targeted) or unchanged (General).
std::string render_prompt(const PromptTemplate& prompt, const std::string& classname);

/// Deterministic caption built from the image attributes. The wording per
/// builtin prompt id is fixed by a table in captions.cpp; custom prompts fall
/// back to the short style of their kind.
std::string toy_caption(const SyntheticImage& image, const PromptTemplate& prompt,
                        const std::vector<std::string>& classnames);

/// One caption per training image for a single prompt (never merged across
/// prompts). Records are keyed, hence sorted, by image id.
struct CaptionSet {
  std::string prompt_id;
  std::map<std::string, std::string> records;
};

/// JSON-lines file, one `{"id": ..., "caption": ...}` object per line, sorted by id.
void write_caption_file(const std::string& path, const CaptionSet& set);
CaptionSet read_caption_file(const std::string& path, const std::string& prompt_id = "");

enum class CaptionSource { Toy, Remote };

/// Produces a caption for one image; throws on failure. Used to plug in the
/// remote client (or a test double).
using Captioner = std::function<std::string(const SyntheticImage&, const PromptTemplate&, const std::string& classname)>;

struct CaptionBuildOptions {
  bool resume = false;
  std::size_t workers = 4;
};

struct CaptionBuildResult {
  CaptionSet set;
  std::size_t fetched = 0;
  std::size_t reused = 0;
  std::vector<std::string> missing;
};

/// Captions every training image into `out_path`. With `resume`, records
/// already present in `out_path` (or in leftover worker shards) are kept and
/// only missing ids are produced. Worker threads append to per-worker shard
/// files that are merged in id order at the end. Failed ids are listed in
/// `<out_path>.missing.json`; the caller decides how to surface them.
CaptionBuildResult build_caption_set(const SyntheticDataset& dataset, const PromptTemplate& prompt,
                                     const Captioner& captioner, const std::string& out_path,
                                     const CaptionBuildOptions& options = {});

/// In-memory toy caption set over the training split.
CaptionSet toy_caption_set(const SyntheticDataset& dataset, const PromptTemplate& prompt);
Captioner toy_captioner(const std::vector<std::string>& classnames);

}  // namespace vlmkd

#include <doctest.h>

#include <atomic>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>

#include "vlmkd/captions.hpp"
#include "vlmkd/error.hpp"

using namespace vlmkd;
namespace fs = std::filesystem;

namespace {

SyntheticDataset small_dataset(std::size_t n_max = 10) {
  DataConfig cfg;
  cfg.num_classes = 4;
  cfg.n_max = n_max;
  cfg.n_min = 2;
  cfg.gamma = 1.0;
  cfg.image_size = 16;
  cfg.val_per_class = 2;
  cfg.seed = 7;
  return generate(cfg);
}

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("vlmkd_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool contains(const std::string& s, const std::string& needle) { return s.find(needle) != std::string::npos; }

bool has_word(const std::string& s, std::string_view word) {
  std::string cur;
  for (char ch : s + " ") {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(ch);
    } else {
      if (cur == word) return true;
      cur.clear();
    }
  }
  return false;
}

}  // namespace

TEST_CASE("builtin prompts") {
  const auto prompts = builtin_prompts();
  std::set<std::string> ids;
  std::size_t targeted = 0;
  for (const auto& p : prompts) {
    ids.insert(p.id);
    CHECK_NOTHROW(validate_prompt(p));
    if (p.kind == PromptKind::Targeted) ++targeted;
  }
  for (const char* id : {"general-short", "general-long", "keyword-short", "keyword-long"}) CHECK(ids.count(id));
  CHECK(targeted == 4);
  CHECK(find_prompt("general-short").text == "Please describe the image in one sentence.");
  CHECK(find_prompt("general-long").text == "Please describe the image in detail.");
  CHECK(find_prompt("keyword-short").text == "Please describe the image with three keywords.");
  CHECK(render_prompt(find_prompt("targeted-1"), "classA") == "Please describe the classA in the image in one sentence.");
}

TEST_CASE("unknown prompt lists builtin ids") {
  try {
    find_prompt("nope");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(contains(e.what(), "general-short"));
    CHECK(contains(e.what(), "targeted-4"));
  }
}

TEST_CASE("prompt validation") {
  CHECK_THROWS_AS(validate_prompt({"x", PromptKind::Targeted, "no placeholder"}), ConfigError);
  CHECK_THROWS_AS(validate_prompt({"x", PromptKind::Targeted, "{classname} {classname}"}), ConfigError);
  CHECK_THROWS_AS(validate_prompt({"x", PromptKind::General, "about {classname}"}), ConfigError);
}

TEST_CASE("toy caption table") {
  SyntheticImage im;
  im.id = "train_000000";
  im.label = 0;
  im.attributes = {ShapeKind::Circle, ColorKind::Red, SizeKind::Large, TextureKind::Plain};
  const std::vector<std::string> names{"classA"};
  CHECK(toy_caption(im, find_prompt("general-short"), names) == "a large red circle on a plain background");
  CHECK(toy_caption(im, find_prompt("general-short"), names) == toy_caption(im, find_prompt("general-short"), names));
  CHECK(toy_caption(im, find_prompt("keyword-short"), names) == "red, circle, large");
  CHECK(toy_caption(im, find_prompt("targeted-1"), names) ==
        "a photo of a classA, a large red circle on a plain background");
  im.attributes.texture = TextureKind::Striped;
  CHECK(toy_caption(im, find_prompt("general-short"), names) == "a large red striped circle on a plain background");
}

TEST_CASE("targeted captions name the class, general captions never do") {
  const auto ds = small_dataset();
  for (const auto& p : builtin_prompts()) {
    for (const auto& im : ds.images) {
      const std::string cap = toy_caption(im, p, ds.classnames);
      CHECK(!cap.empty());
      bool any_name = false;
      for (const auto& n : ds.classnames) any_name = any_name || contains(cap, n);
      if (p.kind == PromptKind::Targeted) {
        CHECK(contains(cap, ds.classnames[im.label]));
      } else {
        CHECK_FALSE(any_name);
      }
    }
  }
}

TEST_CASE("class-level injectivity of general captions") {
  DataConfig cfg;
  cfg.num_classes = 25;
  cfg.n_max = 4;
  cfg.n_min = 4;
  cfg.image_size = 16;
  cfg.val_per_class = 1;
  const auto ds = generate(cfg);
  for (const auto& p : builtin_prompts()) {
    if (p.kind != PromptKind::General) continue;
    for (const auto& a : ds.images) {
      const auto cap = toy_caption(a, p, ds.classnames);
      const auto [shape, color] = class_signature(a.label);
      // Each caption carries both class-defining words, and no other shape or
      // color word, so different (shape, color) classes differ in one of them.
      for (std::size_t s = 0; s < 5; ++s) {
        CHECK(has_word(cap, to_string(ShapeKind(s))) == (ShapeKind(s) == shape));
      }
      for (std::size_t c = 0; c < 5; ++c) {
        CHECK(has_word(cap, to_string(ColorKind(c))) == (ColorKind(c) == color));
      }
      for (const auto& b : ds.images) {
        if (class_signature(b.label) != class_signature(a.label)) CHECK(cap != toy_caption(b, p, ds.classnames));
      }
    }
  }
}

TEST_CASE("caption file round trip is sorted JSON lines") {
  const auto dir = temp_dir("capfile");
  CaptionSet set;
  set.prompt_id = "general-short";
  set.records = {{"b", "two \"quoted\""}, {"a", "one"}};
  const auto path = (dir / "general-short.jsonl").string();
  write_caption_file(path, set);
  const auto back = read_caption_file(path);
  CHECK(back.prompt_id == "general-short");
  CHECK(back.records == set.records);
  std::ifstream in(path);
  std::string first;
  std::getline(in, first);
  CHECK(first == R"({"caption":"one","id":"a"})");
  CHECK_THROWS_AS(read_caption_file((dir / "missing.jsonl").string()), PathError);
}

TEST_CASE("build_caption_set toy source is complete and deterministic") {
  const auto ds = small_dataset();
  const auto dir = temp_dir("build");
  const auto& p = find_prompt("general-short");
  const auto r1 = build_caption_set(ds, p, toy_captioner(ds.classnames), (dir / "a.jsonl").string());
  const auto r2 = build_caption_set(ds, p, toy_captioner(ds.classnames), (dir / "b.jsonl").string());
  CHECK(r1.set.records.size() == ds.images.size());
  CHECK(r1.missing.empty());
  CHECK(r1.fetched == ds.images.size());
  CHECK(r1.set.records == toy_caption_set(ds, p).records);
  std::ifstream fa(dir / "a.jsonl"), fb(dir / "b.jsonl");
  CHECK(std::string(std::istreambuf_iterator<char>(fa), {}) == std::string(std::istreambuf_iterator<char>(fb), {}));
  CHECK_FALSE(fs::exists(dir / "a.jsonl.shard0"));
}

TEST_CASE("resume only fetches missing ids") {
  const auto ds = small_dataset(20);
  const auto dir = temp_dir("resume");
  const auto path = (dir / "c.jsonl").string();
  const auto& p = find_prompt("general-short");
  CaptionSet half;
  half.prompt_id = p.id;
  const auto full = toy_caption_set(ds, p);
  std::size_t k = 0;
  for (const auto& [id, cap] : full.records) {
    if (k++ % 2 == 0) half.records[id] = cap;
  }
  write_caption_file(path, half);

  std::atomic<std::size_t> calls{0};
  Captioner counting = [&](const SyntheticImage& im, const PromptTemplate& t, const std::string&) {
    ++calls;
    return toy_caption(im, t, ds.classnames);
  };
  CaptionBuildOptions opts;
  opts.resume = true;
  const auto r = build_caption_set(ds, p, counting, path, opts);
  CHECK(calls == full.records.size() - half.records.size());
  CHECK(r.reused == half.records.size());
  CHECK(r.set.records == full.records);

  calls = 0;
  const auto again = build_caption_set(ds, p, counting, path, opts);
  CHECK(calls == 0);
  CHECK(again.fetched == 0);
}

TEST_CASE("failed captions are listed as missing") {
  const auto ds = small_dataset();
  const auto dir = temp_dir("missing");
  const auto path = (dir / "m.jsonl").string();
  const std::string bad = ds.images[3].id;
  Captioner flaky = [&](const SyntheticImage& im, const PromptTemplate& t, const std::string&) {
    if (im.id == bad) throw TransportError("HTTP 500 after 3 attempts");
    return toy_caption(im, t, ds.classnames);
  };
  const auto r = build_caption_set(ds, find_prompt("general-short"), flaky, path);
  CHECK(r.missing == std::vector<std::string>{bad});
  CHECK(r.set.records.size() == ds.images.size() - 1);
  CHECK(fs::exists(path + ".missing.json"));

  CaptionBuildOptions opts;
  opts.resume = true;
  const auto fixed = build_caption_set(ds, find_prompt("general-short"), toy_captioner(ds.classnames), path, opts);
  CHECK(fixed.fetched == 1);
  CHECK(fixed.missing.empty());
  CHECK_FALSE(fs::exists(path + ".missing.json"));
}

// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance            all criteria
//   acceptance 4 5 9      a subset
//
// Property criteria run the matching unit-test cases as child processes; the
// benchmark criteria train on the default synthetic benchmark.

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "vlmkd/captions.hpp"
#include "vlmkd/text_embedding.hpp"
#include "vlmkd/trainer.hpp"

namespace fs = std::filesystem;
using namespace vlmkd;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path scratch_dir() {
  const fs::path d = fs::temp_directory_path() / "vlmkd_acceptance";
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Runs one unit-test binary restricted to `cases`; the output is kept on failure.
bool run_cases(const std::string& binary, const std::string& cases, double& elapsed, std::string& log) {
  const fs::path out = scratch_dir() / (fs::path(binary).filename().string() + ".log");
  const std::string cmd = "'" + binary + "' --test-case='" + cases + "' --no-version > '" + out.string() + "' 2>&1";
  const auto t0 = Clock::now();
  const int rc = std::system(cmd.c_str());
  elapsed += seconds_since(t0);
  log = slurp(out);
  // Every named case must have run; a wildcard pattern must match at least one.
  std::size_t expected = 1;
  if (cases.find('*') == std::string::npos) expected += std::count(cases.begin(), cases.end(), ',');
  const auto at = log.find("test cases:");
  if (rc != 0 || at == std::string::npos) return false;
  std::size_t total = 0, passed = 0, failed = 0;
  if (std::sscanf(log.c_str() + at, "test cases: %zu | %zu passed | %zu failed", &total, &passed, &failed) != 3) return false;
  return failed == 0 && passed >= expected && (cases.find('*') != std::string::npos || passed == expected);
}

Outcome unit_cases(const std::vector<std::pair<std::string, std::string>>& runs, double limit_seconds = 0.0) {
  Outcome o;
  double elapsed = 0.0;
  o.pass = true;
  for (const auto& [bin, cases] : runs) {
    std::string log;
    if (!run_cases(bin, cases, elapsed, log)) {
      o.pass = false;
      std::cerr << log;
      o.detail += fs::path(bin).filename().string() + " failed; ";
    }
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f s", elapsed);
  o.detail += buf;
  if (limit_seconds > 0.0 && elapsed >= limit_seconds) {
    o.pass = false;
    o.detail += " (limit " + std::to_string(static_cast<int>(limit_seconds)) + " s)";
  }
  return o;
}

// ---- benchmark runs -------------------------------------------------------

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Bench {
  SyntheticDataset data = generate(DataConfig{});
  std::map<std::string, EmbeddingCache> caches;
  std::map<std::uint64_t, TeacherOutputs> teachers;
  std::map<std::string, std::vector<EvalReport>> results;
  double slowest_run = 0.0;

  const EmbeddingCache& cache(const std::string& prompt) {
    if (!caches.count(prompt)) {
      caches[prompt] = encode_caption_set_hashed(toy_caption_set(data, find_prompt(prompt)), 64);
    }
    return caches.at(prompt);
  }

  const EmbeddingCache& concat_cache(const std::vector<std::string>& prompts) {
    std::string key = "concat";
    for (const auto& p : prompts) key += ":" + p;
    if (!caches.count(key)) {
      std::vector<CaptionSet> sets;
      for (const auto& p : prompts) sets.push_back(toy_caption_set(data, find_prompt(p)));
      caches[key] = encode_concatenated_hashed(sets, 64);
    }
    return caches.at(key);
  }

  const TeacherOutputs& teacher(std::uint64_t seed) {
    if (!teachers.count(seed)) {
      TrainConfig base;
      base.seed = seed;
      const auto t0 = Clock::now();
      const TeacherResult t = make_teacher(data, base);
      std::printf("  teacher seed %llu: top-1 %.4f (%.0f s)\n", static_cast<unsigned long long>(seed),
                  t.report.top1_overall, seconds_since(t0));
      teachers[seed] = teacher_outputs(t.bundle, data);
    }
    return teachers.at(seed);
  }

  using Setup = std::function<void(TrainConfig&, std::vector<EmbeddingCache>&, bool& kd)>;

  const std::vector<EvalReport>& run(const std::string& name, const Setup& setup) {
    if (results.count(name)) return results.at(name);
    std::vector<EvalReport> reports;
    for (std::uint64_t seed : kSeeds) {
      TrainConfig c;
      c.seed = seed;
      std::vector<EmbeddingCache> cs;
      bool kd = false;
      setup(c, cs, kd);
      c.loss.kd_image = kd;
      const TeacherOutputs* t = kd ? &teacher(seed) : nullptr;
      const auto t0 = Clock::now();
      reports.push_back(train(data, cs, c, t).report);
      const double s = seconds_since(t0);
      slowest_run = std::max(slowest_run, s);
      const auto& r = reports.back();
      std::printf("  %-10s seed %llu: all %.4f many %.4f med %.4f few %.4f (%.0f s)\n", name.c_str(),
                  static_cast<unsigned long long>(seed), r.top1_overall, *r.top1_many, *r.top1_medium, *r.top1_few, s);
      std::fflush(stdout);
    }
    return results[name] = std::move(reports);
  }

  static double mean_all(const std::vector<EvalReport>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += r.top1_overall;
    return s / static_cast<double>(rs.size());
  }
  static double mean_few(const std::vector<EvalReport>& rs) {
    double s = 0.0;
    for (const auto& r : rs) s += *r.top1_few;
    return s / static_cast<double>(rs.size());
  }

  const std::vector<EvalReport>& baseline() {
    return run("baseline", [](TrainConfig&, std::vector<EmbeddingCache>&, bool&) {});
  }
  const std::vector<EvalReport>& kd_t() {
    return run("kd-t", [this](TrainConfig& c, std::vector<EmbeddingCache>& cs, bool&) {
      c.loss.text_mode = TextMode::Shared;
      cs = {cache("general-short")};
    });
  }
  const std::vector<EvalReport>& kd_i() {
    return run("kd-i", [](TrainConfig&, std::vector<EmbeddingCache>&, bool& kd) { kd = true; });
  }
  const std::vector<EvalReport>& kd_i_t() {
    return run("kd-i-t", [this](TrainConfig& c, std::vector<EmbeddingCache>& cs, bool& kd) {
      c.loss.text_mode = TextMode::Shared;
      cs = {cache("general-short")};
      kd = true;
    });
  }
  const std::vector<EvalReport>& shared_q2() {
    return run("shared-q2", [this](TrainConfig& c, std::vector<EmbeddingCache>& cs, bool&) {
      c.loss.text_mode = TextMode::Shared;
      cs = {cache("general-short"), cache("targeted-1")};
    });
  }
  const std::vector<EvalReport>& concat_q2() {
    return run("concat-q2", [this](TrainConfig& c, std::vector<EmbeddingCache>& cs, bool&) {
      c.loss.text_mode = TextMode::Concat;
      cs = {concat_cache({"general-short", "targeted-1"})};
    });
  }
  const std::vector<EvalReport>& depth0() {
    return run("depth-0", [this](TrainConfig& c, std::vector<EmbeddingCache>& cs, bool&) {
      c.loss.text_mode = TextMode::Shared;
      c.model.adaptor_depth = 0;
      cs = {cache("general-short")};
    });
  }
};

std::string pts(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * a);
  return buf;
}

Outcome kd_t_gain(Bench& b) {
  const auto& base = b.baseline();
  const auto& text = b.kd_t();
  const double d_few = Bench::mean_few(text) - Bench::mean_few(base);
  const double d_all = Bench::mean_all(text) - Bench::mean_all(base);
  Outcome o;
  o.pass = d_few >= 0.05 && d_all >= 0.02 && b.slowest_run <= 600.0;
  o.detail = "few " + pts(Bench::mean_few(base)) + " -> " + pts(Bench::mean_few(text)) + " (" + pts(d_few) +
             " pts, need >= 5), overall " + pts(Bench::mean_all(base)) + " -> " + pts(Bench::mean_all(text)) + " (" +
             pts(d_all) + " pts, need >= 2), slowest run " + std::to_string(static_cast<int>(b.slowest_run)) + " s";
  return o;
}

Outcome complementarity(Bench& b) {
  const double both = Bench::mean_all(b.kd_i_t());
  const double i = Bench::mean_all(b.kd_i());
  const double t = Bench::mean_all(b.kd_t());
  return {both >= i && both >= t, "kd-i-t " + pts(both) + ", kd-i " + pts(i) + ", kd-t " + pts(t)};
}

Outcome aggregation(Bench& b) {
  const double shared = Bench::mean_all(b.shared_q2());
  const double single = Bench::mean_all(b.kd_t());
  const double concat = Bench::mean_all(b.concat_q2());
  return {shared >= single && shared >= concat,
          "shared@2 " + pts(shared) + ", single " + pts(single) + ", concat@2 " + pts(concat)};
}

Outcome adaptor_depth(Bench& b) {
  const double d1 = Bench::mean_all(b.kd_t());
  const double d0 = Bench::mean_all(b.depth0());
  return {d1 >= d0, "depth 1 " + pts(d1) + ", depth 0 " + pts(d0)};
}

// Two full `vlmkd train` runs through the command line.
Outcome cli_determinism() {
  const fs::path root = scratch_dir() / "determinism";
  fs::remove_all(root);
  fs::create_directories(root);
  const std::string cli = VLMKD_CLI;
  auto sh = [&](const std::string& args) {
    const std::string cmd = "'" + cli + "' -q " + args + " > /dev/null 2>> '" + (root / "stderr.log").string() + "'";
    return std::system(cmd.c_str()) == 0;
  };
  const std::string r = root.string();
  bool ok = sh("gen-data --out '" + r + "/data'") &&
            sh("caption --data '" + r + "/data' --prompt general-short --out '" + r + "/caps'") &&
            sh("encode --captions '" + r + "/caps/general-short.jsonl' --dim 64 --out '" + r + "/emb'");
  const std::string train = "train --data '" + r + "/data' --caches '" + r + "/emb/general-short.vkd' --mode shared --seed 1";
  ok = ok && sh(train + " --out '" + r + "/a'") && sh(train + " --out '" + r + "/b'");
  if (!ok) return {false, "a command failed: " + slurp(root / "stderr.log")};
  std::vector<std::string> differ;
  for (const char* f : {"model.bin", "model.bin.json", "checkpoint.bin", "report.json", "log.jsonl"}) {
    const std::string a = slurp(root / "a" / f), bb = slurp(root / "b" / f);
    if (a.empty() || a != bb) differ.push_back(f);
  }
  if (!differ.empty()) {
    std::string d = "differ:";
    for (const auto& f : differ) d += " " + f;
    return {false, d};
  }
  const EvalReport ra = eval_report_from_json(nlohmann::json::parse(slurp(root / "a" / "report.json")));
  const EvalReport rb = eval_report_from_json(nlohmann::json::parse(slurp(root / "b" / "report.json")));
  return {ra == rb, "bundles, checkpoints, logs and reports byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  auto want = [&](int k) { return wanted.empty() || wanted.count(k); };

  const std::string bin = VLMKD_TEST_DIR;
  const std::string numerics = bin + "/test_core_numerics", models = bin + "/test_models", losses = bin + "/test_losses",
                    embedding = bin + "/test_text_embedding";

  Bench bench;
  const std::vector<std::pair<int, std::pair<std::string, std::function<Outcome()>>>> criteria{
      {1,
       {"gradient suite (losses, tau, model components; 20 seeds, rel err <= 1e-4, < 60 s)",
        [&] {
          return unit_cases({{numerics, "*gradients*"},
                             {models, "model components pass finite-difference checks,linear head and depth-2 adaptor gradients"},
                             {losses, "loss gradients match central differences"}},
                            60.0);
        }}},
      {2,
       {"brute-force oracles for loss_text, loss_scl, loss_kd_image (200 instances, 1e-10)",
        [&] {
          return unit_cases({{losses, "loss_scl matches the brute-force oracle,loss_text matches the brute-force oracle,"
                                      "loss_kd_image worked examples and oracle"}});
        }}},
      {3,
       {"logit-adjustment identity (100 instances, 1e-12) and uniform-prior reduction",
        [&] { return unit_cases({{losses, "loss_cls equals cross-entropy on prior-shifted logits"}}); }}},
      {4, {"text distillation gain on the default benchmark (few >= +5, overall >= +2)", [&] { return kd_t_gain(bench); }}},
      {5, {"complementarity: kd-i-t >= kd-i and >= kd-t", [&] { return complementarity(bench); }}},
      {6, {"aggregation at two prompts: shared >= single and >= concat", [&] { return aggregation(bench); }}},
      {7, {"adaptor depth 1 >= depth 0", [&] { return adaptor_depth(bench); }}},
      {8,
       {"embedding cache fidelity and corruption handling",
        [&] {
          return unit_cases({{embedding, "cache round trip is float32 exact and byte deterministic,corrupt caches are rejected,"
                                         "writer normalizes vectors,cache layout,empty cache is 24 bytes"}});
        }}},
      {9, {"two identical train commands give identical bundles and reports", [&] { return cli_determinism(); }}},
      {10,
       {"invariances: logit shift, text scale and permutation, KL >= 0 (500 trials, 1e-10)",
        [&] {
          return unit_cases({{losses, "loss_cls is invariant to a constant logit shift,loss_text invariances and bound,"
                                      "KL term is non-negative and zero only for matching distributions"}});
        }}},
  };

  std::vector<std::string> lines;
  int failed = 0;
  for (const auto& [k, entry] : criteria) {
    if (!want(k)) continue;
    std::printf("[%d] %s\n", k, entry.first.c_str());
    std::fflush(stdout);
    Outcome o;
    try {
      o = entry.second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    char head[16];
    std::snprintf(head, sizeof head, "%s %2d  ", o.pass ? "PASS" : "FAIL", k);
    lines.push_back(head + entry.first + "\n           " + o.detail);
    std::printf("%s\n", lines.back().c_str());
    std::fflush(stdout);
  }
  std::printf("\n==== acceptance summary ====\n");
  for (const auto& l : lines) std::printf("%s\n", l.c_str());
  std::printf("%d of %zu criteria failed\n", failed, lines.size());
  return failed ? 1 : 0;
}

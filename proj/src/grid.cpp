#include "vlmkd/grid.hpp"

#include <spdlog/spdlog.h>

#include <atomic>
#include <cstdio>
#include <map>
#include <mutex>
#include <thread>

#include "vlmkd/binio.hpp"
#include "vlmkd/captions.hpp"
#include "vlmkd/error.hpp"

namespace vlmkd {

namespace {

bool needs_teacher(const TrainConfig& c) { return c.loss.kd_image; }

std::string cache_key(const GridRow& row) {
  std::string key = row.concat ? "concat:" : "each:";
  for (const auto& p : row.prompts) key += p + ",";
  return key;
}

std::optional<double> mean_optional(const std::vector<EvalReport>& reports, std::optional<double> EvalReport::*field) {
  double s = 0.0;
  for (const auto& r : reports) {
    if (!(r.*field)) return std::nullopt;
    s += *(r.*field);
  }
  return s / static_cast<double>(reports.size());
}

std::string pct(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * *v);
  return buf;
}

nlohmann::json opt_json(std::optional<double> v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

}  // namespace

GridSpec grid_spec_from_json(const nlohmann::json& j) {
  GridSpec s;
  try {
    s.name = j.value("name", s.name);
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("data")) s.data = data_config_from_json(j.at("data"));
    s.base = j.value("base", nlohmann::json::object());
    s.encoder_dim = j.value("encoder_dim", s.encoder_dim);
    s.workers = j.value("workers", s.workers);
    for (const auto& r : j.at("rows")) {
      GridRow row;
      row.label = r.at("label");
      row.train = r.value("train", nlohmann::json::object());
      row.prompts = r.value("prompts", std::vector<std::string>{});
      row.concat = r.value("concat", false);
      s.rows.push_back(std::move(row));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed grid spec: ") + e.what());
  }
  if (s.seeds.empty()) throw ConfigError("grid spec lists no seeds");
  if (s.rows.empty()) throw ConfigError("grid spec lists no rows");
  for (const auto& row : s.rows) {
    for (const auto& p : row.prompts) find_prompt(p);
    if (row.concat && row.prompts.size() < 2) {
      throw ConfigError("grid row '" + row.label + "' concatenates fewer than two prompts");
    }
  }
  return s;
}

GridSpec load_grid_spec(const std::string& path) {
  try {
    return grid_spec_from_json(nlohmann::json::parse(binio::read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("grid spec '" + path + "' is not valid JSON: " + e.what());
  }
}

nlohmann::json to_json(const GridSpec& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : s.rows) {
    rows.push_back({{"label", r.label}, {"train", r.train}, {"prompts", r.prompts}, {"concat", r.concat}});
  }
  return {{"name", s.name}, {"seeds", s.seeds},         {"data", to_json(s.data)}, {"base", s.base},
          {"encoder_dim", s.encoder_dim}, {"workers", s.workers}, {"rows", rows}};
}

TrainConfig row_config(const GridSpec& spec, const GridRow& row, std::uint64_t seed) {
  nlohmann::json j = to_json(train_config_from_json(spec.base));
  j.merge_patch(row.train);
  j["seed"] = seed;
  return train_config_from_json(j);
}

const GridRowResult& GridResult::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw ConfigError("grid has no row '" + label + "'");
}

GridResult run_experiment_grid(const GridSpec& spec) { return run_experiment_grid(spec, generate(spec.data)); }

GridResult run_experiment_grid(const GridSpec& spec, const SyntheticDataset& dataset) {
  GridResult result;
  result.name = spec.name;
  result.seeds = spec.seeds;
  result.rows.resize(spec.rows.size());

  std::map<std::string, std::vector<EmbeddingCache>> caches;
  std::vector<std::string> row_errors(spec.rows.size());
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    const auto& row = spec.rows[r];
    const std::string key = cache_key(row);
    if (caches.count(key)) continue;
    try {
      std::vector<CaptionSet> sets;
      for (const auto& p : row.prompts) sets.push_back(toy_caption_set(dataset, find_prompt(p)));
      std::vector<EmbeddingCache> built;
      if (row.concat) {
        built.push_back(encode_concatenated_hashed(sets, spec.encoder_dim));
      } else {
        for (const auto& s : sets) built.push_back(encode_caption_set_hashed(s, spec.encoder_dim));
      }
      caches[key] = std::move(built);
    } catch (const std::exception& e) {
      row_errors[r] = e.what();
    }
  }

  std::map<std::uint64_t, TeacherOutputs> teachers;
  std::map<std::uint64_t, std::string> teacher_errors;
  for (std::uint64_t seed : spec.seeds) {
    bool wanted = false;
    for (const auto& row : spec.rows) {
      try {
        wanted = wanted || needs_teacher(row_config(spec, row, seed));
      } catch (const std::exception&) {
      }
    }
    if (!wanted) continue;
    try {
      TrainConfig base = train_config_from_json(spec.base);
      base.seed = seed;
      const TeacherResult t = make_teacher(dataset, base);
      spdlog::info("grid teacher seed {}: top-1 {:.4f}", seed, t.report.top1_overall);
      teachers[seed] = teacher_outputs(t.bundle, dataset);
    } catch (const std::exception& e) {
      teacher_errors[seed] = e.what();
    }
  }

  struct Job {
    std::size_t row;
    std::size_t seed_index;
  };
  std::vector<Job> jobs;
  for (std::size_t r = 0; r < spec.rows.size(); ++r) {
    for (std::size_t s = 0; s < spec.seeds.size(); ++s) jobs.push_back({r, s});
  }
  std::vector<std::optional<EvalReport>> reports(jobs.size());
  std::vector<std::string> errors(jobs.size());

  auto run_job = [&](std::size_t k) {
    const Job& job = jobs[k];
    const GridRow& row = spec.rows[job.row];
    const std::uint64_t seed = spec.seeds[job.seed_index];
    try {
      if (!row_errors[job.row].empty()) throw ConfigError(row_errors[job.row]);
      const TrainConfig config = row_config(spec, row, seed);
      const TeacherOutputs* teacher = nullptr;
      if (needs_teacher(config)) {
        if (teacher_errors.count(seed)) throw ConfigError("teacher failed: " + teacher_errors.at(seed));
        teacher = &teachers.at(seed);
      }
      const auto& row_caches = caches.at(cache_key(row));
      reports[k] = train(dataset, row_caches, config, teacher).report;
      spdlog::info("grid row '{}' seed {}: top-1 {:.4f}", row.label, seed, reports[k]->top1_overall);
    } catch (const std::exception& e) {
      errors[k] = e.what();
      spdlog::warn("grid row '{}' seed {} failed: {}", row.label, seed, e.what());
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(spec.workers, jobs.size()));
  if (workers == 1) {
    for (std::size_t k = 0; k < jobs.size(); ++k) run_job(k);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t k = next++; k < jobs.size(); k = next++) run_job(k);
      });
    }
    for (auto& t : pool) t.join();
  }

  for (std::size_t k = 0; k < jobs.size(); ++k) {
    GridRowResult& out = result.rows[jobs[k].row];
    out.label = spec.rows[jobs[k].row].label;
    if (reports[k]) {
      out.reports.push_back(*reports[k]);
    } else if (!out.failed) {
      out.failed = true;
      out.error = errors[k];
    }
  }
  for (auto& row : result.rows) {
    if (row.failed) continue;
    double s = 0.0;
    for (const auto& r : row.reports) s += r.top1_overall;
    row.top1_overall = s / static_cast<double>(row.reports.size());
    row.top1_many = mean_optional(row.reports, &EvalReport::top1_many);
    row.top1_medium = mean_optional(row.reports, &EvalReport::top1_medium);
    row.top1_few = mean_optional(row.reports, &EvalReport::top1_few);
  }
  return result;
}

nlohmann::json to_json(const GridResult& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : g.rows) {
    nlohmann::json reports = nlohmann::json::array();
    for (const auto& rep : r.reports) reports.push_back(to_json(rep));
    nlohmann::json row = {{"label", r.label}, {"status", r.failed ? "failed" : "ok"}, {"reports", reports}};
    if (r.failed) {
      row["error"] = r.error;
    } else {
      row["top1_overall"] = r.top1_overall;
      row["top1_many"] = opt_json(r.top1_many);
      row["top1_medium"] = opt_json(r.top1_medium);
      row["top1_few"] = opt_json(r.top1_few);
    }
    rows.push_back(std::move(row));
  }
  return {{"name", g.name}, {"seeds", g.seeds}, {"rows", rows}};
}

std::string grid_markdown(const GridResult& g) {
  std::string seeds;
  for (std::size_t i = 0; i < g.seeds.size(); ++i) seeds += (i ? "," : "") + std::to_string(g.seeds[i]);
  std::string md = "## " + g.name + "\n\nTop-1 accuracy (%), mean over seeds {" + seeds + "}.\n\n";
  md += "| Method | Many | Medium | Few | All |\n|---|---:|---:|---:|---:|\n";
  for (const auto& r : g.rows) {
    if (r.failed) {
      md += "| " + r.label + " | failed | failed | failed | failed |\n";
    } else {
      md += "| " + r.label + " | " + pct(r.top1_many) + " | " + pct(r.top1_medium) + " | " + pct(r.top1_few) + " | " +
            pct(r.top1_overall) + " |\n";
    }
  }
  bool any_failed = false;
  for (const auto& r : g.rows) any_failed = any_failed || r.failed;
  if (any_failed) {
    md += "\nFailed rows:\n\n";
    for (const auto& r : g.rows) {
      if (r.failed) md += "- " + r.label + ": " + r.error + "\n";
    }
  }
  return md;
}

}  // namespace vlmkd

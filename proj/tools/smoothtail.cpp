// Step-by-step driver: one subcommand per pipeline stage, all state in a run directory.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "smoothtail/pipeline.hpp"

namespace fs = std::filesystem;
using namespace smoothtail;

namespace {

constexpr const char* kRunRootEnv = "SMOOTHTAIL_RUN_ROOT";

struct Options {
  std::optional<std::string> config_path;
  std::optional<std::string> preset;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> run_dir;
  int step = 0;
};

// An upstream artifact is absent; exit code 2 distinguishes it from stage failures.
struct MissingArtifact : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void require(const fs::path& path, const char* stage, const std::string& upstream) {
  if (!fs::exists(path)) {
    throw MissingArtifact("[" + std::string(stage) + "] missing " + path.string() + "; run " +
                          upstream + " first");
  }
}

RunConfig requested_config(const Options& o) {
  if (o.config_path) return load_run_config(*o.config_path, o.preset, o.seed);
  return preset_config(o.preset.value_or("toy-default"), o.seed.value_or(0));
}

fs::path run_root(const Options& o, const RunConfig& requested) {
  if (o.run_dir) return *o.run_dir;
  const char* env = std::getenv(kRunRootEnv);
  const fs::path root = env && *env ? fs::path(env) : fs::path("runs");
  return root / (requested.preset + "-seed" + std::to_string(requested.seed));
}

// Every command after gen-data reads the immutable config snapshot.
struct Run {
  RunLayout layout;
  RunConfig config;
};

Run open_run(const Options& o, const char* stage) {
  if (o.config_path) {
    throw std::invalid_argument("[" + std::string(stage) +
                                "] --config only applies to gen-data and run; the run directory "
                                "already holds its config snapshot");
  }
  const RunLayout layout{run_root(o, requested_config(o))};
  require(layout.config(), stage, "gen-data");
  RunConfig config = config_from_text(read_text(layout.config()));
  if ((o.seed && *o.seed != config.seed) || (o.preset && *o.preset != config.preset)) {
    throw std::invalid_argument("[" + std::string(stage) + "] --seed/--preset disagree with " +
                                layout.config().string());
  }
  return {layout, std::move(config)};
}

RenderedDataset load_train(const Run& run, const char* stage) {
  require(run.layout.train_data(), stage, "gen-data");
  return RenderedDataset(load_annotations(run.layout.train_data()));
}

int last_step(const RunConfig& config) { return static_cast<int>(config.divisions.size()) - 1; }

void check_step(const RunConfig& config, int step, const char* stage) {
  if (step < 0 || step > last_step(config)) {
    throw std::invalid_argument("[" + std::string(stage) + "] --step must lie in [0, " +
                                std::to_string(last_step(config)) + "]");
  }
}

// ---- commands ---------------------------------------------------------------------

void cmd_gen_data(const Options& o) {
  const RunConfig config = requested_config(o);
  const RunLayout layout{run_root(o, config)};
  const std::string text = config_to_text(config);
  if (fs::exists(layout.config()) && read_text(layout.config()) != text) {
    throw std::invalid_argument("[gen-data] " + layout.config().string() +
                                " holds a different config; use a fresh --run-dir");
  }
  write_text(layout.config(), text);
  const DetectionDataset train = make_train_data(config);
  const DetectionDataset val = make_val_data(config);
  fs::create_directories(layout.train_data().parent_path());
  save_annotations(train, layout.train_data());
  save_annotations(val, layout.val_data());
  std::cout << "wrote " << train.images().size() << " train / " << val.images().size()
            << " val images to " << layout.root.string() << "\n";
}

void cmd_pretrain(const Options& o) {
  const Run run = open_run(o, "pretrain");
  const RenderedDataset train = load_train(run, "pretrain");
  StageLog log{"pretrain", {}};
  const DetectorModel model =
      pretrain(train, detector_for(run.config, train.dataset()),
               stage_config(run.config, StageKind::kPretrain), &log, run.config.loss);
  save_checkpoint(model, run.layout.pretrain());
  write_text(run.layout.stage_log(log.name), stage_log_to_json(log));
  std::cout << "wrote " << run.layout.pretrain().string() << "\n";
}

void cmd_score(const Options& o) {
  const Run run = open_run(o, "score");
  const RenderedDataset train = load_train(run, "score");
  require(run.layout.pretrain(), "score", "pretrain");
  const DetectorModel model = load_checkpoint(run.layout.pretrain());
  save_scores(score_instances(model, train.dataset(), train.images()), run.layout.scores());
  std::cout << "wrote " << run.layout.scores().string() << "\n";
}

void cmd_build_replay(const Options& o) {
  const Run run = open_run(o, "build-replay");
  require(run.layout.train_data(), "build-replay", "gen-data");
  const DetectionDataset train = load_annotations(run.layout.train_data());
  require(run.layout.scores(), "build-replay", "score");
  const std::vector<ScoredInstance> scores = load_scores(run.layout.scores());
  for (int k = 0; k <= last_step(run.config); ++k) {
    const ReplayStep r = build_replay_step(run.config, train, scores, k);
    save_subset(r.d_head, run.layout.d_head(k));
    save_subset(r.d_tail, run.layout.d_tail(k));
    std::cout << "step " << k << ": D_head " << r.d_head.images.size() << " images, D_tail "
              << r.d_tail.images.size() << " images\n";
  }
}

void cmd_finetune(const Options& o) {
  const Run run = open_run(o, "finetune");
  check_step(run.config, o.step, "finetune");
  const RenderedDataset train = load_train(run, "finetune");
  require(run.layout.d_head(o.step), "finetune", "build-replay");
  const fs::path base_path =
      o.step == 0 ? run.layout.pretrain() : run.layout.unified(o.step - 1);
  require(base_path, "finetune",
          o.step == 0 ? std::string("pretrain") : "transfer --step " + std::to_string(o.step - 1));
  const DetectorModel base = load_checkpoint(base_path);
  StageLog log{finetune_stage_name(o.step), {}};
  const DetectorModel expert =
      finetune_step(run.config, base, train, load_subset(run.layout.d_head(o.step)), o.step, &log);
  save_checkpoint(expert, run.layout.expert(o.step));
  write_text(run.layout.stage_log(log.name), stage_log_to_json(log));
  std::cout << "wrote " << run.layout.expert(o.step).string() << "\n";
}

void cmd_transfer(const Options& o) {
  const Run run = open_run(o, "transfer");
  check_step(run.config, o.step, "transfer");
  const RenderedDataset train = load_train(run, "transfer");
  require(run.layout.d_tail(o.step), "transfer", "build-replay");
  require(run.layout.expert(o.step), "transfer", "finetune --step " + std::to_string(o.step));
  const DetectorModel expert = load_checkpoint(run.layout.expert(o.step));
  StageLog log{transfer_stage_name(o.step), {}};
  const DetectorModel unified =
      transfer_step(run.config, expert, train, load_subset(run.layout.d_tail(o.step)), o.step, &log);
  save_checkpoint(unified, run.layout.unified(o.step));
  write_text(run.layout.stage_log(log.name), stage_log_to_json(log));
  std::cout << "wrote " << run.layout.unified(o.step).string() << "\n";
}

std::string percent(std::optional<double> v) {
  if (!v) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * *v);
  return buf;
}

// Baseline vs FT&KT, in percent.
void print_comparison(const std::map<std::string, GroupMetrics>& metrics) {
  std::printf("%-10s %6s %6s %6s %6s %8s %8s\n", "model", "AP", "AP_r", "AP_c", "AP_f", "AP_head",
              "AP_tail");
  const std::pair<const char*, const char*> rows[] = {{"baseline", "Baseline"}, {"unified", "FT&KT"}};
  for (const auto& [key, label] : rows) {
    const auto it = metrics.find(key);
    if (it == metrics.end()) continue;
    const GroupMetrics& m = it->second;
    std::printf("%-10s %6s %6s %6s %6s %8s %8s\n", label, percent(m.table.ap).c_str(),
                percent(m.table.ap_rare).c_str(), percent(m.table.ap_common).c_str(),
                percent(m.table.ap_frequent).c_str(), percent(m.ap_head).c_str(),
                percent(m.ap_tail).c_str());
  }
}

void cmd_eval(const Options& o) {
  const Run run = open_run(o, "eval");
  require(run.layout.train_data(), "eval", "gen-data");
  require(run.layout.val_data(), "eval", "gen-data");
  require(run.layout.pretrain(), "eval", "pretrain");
  const DetectionDataset train = load_annotations(run.layout.train_data());
  const RenderedDataset val(load_annotations(run.layout.val_data()));

  RunReport report;
  report.fingerprint = config_fingerprint(run.config);
  report.metrics["baseline"] =
      evaluate_for_run(run.config, train, load_checkpoint(run.layout.pretrain()), val);
  const int k = last_step(run.config);
  if (fs::exists(run.layout.unified(k))) {
    report.metrics["finetune"] =
        evaluate_for_run(run.config, train, load_checkpoint(run.layout.expert(k)), val);
    report.metrics["unified"] =
        evaluate_for_run(run.config, train, load_checkpoint(run.layout.unified(k)), val);
  } else {
    std::cerr << "note: no unified model yet (run transfer --step " << k
              << "); reporting the baseline only\n";
  }
  write_text(run.layout.metrics(), metrics_to_json(report));
  print_comparison(report.metrics);
}

// ---- report -----------------------------------------------------------------------

struct Series {
  std::string label;
  std::string color;
  std::vector<double> values;
};

// Means over at most `bins` equal chunks so long logs stay small.
std::vector<double> downsample(const std::vector<double>& v, std::size_t bins) {
  if (v.size() <= bins) return v;
  std::vector<double> out;
  for (std::size_t b = 0; b < bins; ++b) {
    const std::size_t lo = b * v.size() / bins, hi = (b + 1) * v.size() / bins;
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += v[i];
    out.push_back(s / static_cast<double>(hi - lo));
  }
  return out;
}

std::string svg_line_chart(const std::string& title, const std::vector<Series>& series) {
  const double w = 640, h = 360, left = 60, right = 150, top = 40, bottom = 40;
  double y_max = 0.0;
  std::size_t n_max = 1;
  for (const auto& s : series) {
    for (double v : s.values) y_max = std::max(y_max, v);
    n_max = std::max(n_max, s.values.size());
  }
  if (y_max <= 0.0) y_max = 1.0;
  const double pw = w - left - right, ph = h - top - bottom;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">" << title << "</text>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\""
      << top + ph << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
      << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << left - 6 << "\" y=\"" << top + 4 << "\" text-anchor=\"end\">" << y_max
      << "</text>\n"
      << "<text x=\"" << left - 6 << "\" y=\"" << top + ph << "\" text-anchor=\"end\">0</text>\n"
      << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 10
      << "\" text-anchor=\"middle\">training progress</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const Series& s = series[i];
    svg << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t j = 0; j < s.values.size(); ++j) {
      const double x = left + pw * (n_max > 1 ? static_cast<double>(j) / (n_max - 1) : 0.0);
      const double y = top + ph * (1.0 - s.values[j] / y_max);
      svg << x << "," << y << " ";
    }
    svg << "\"/>\n";
    const double ly = top + 16.0 * static_cast<double>(i);
    svg << "<line x1=\"" << w - right + 10 << "\" y1=\"" << ly << "\" x2=\"" << w - right + 30
        << "\" y2=\"" << ly << "\" stroke=\"" << s.color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << w - right + 36 << "\" y=\"" << ly + 4 << "\">" << s.label << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string svg_group_bars(const std::map<std::string, GroupMetrics>& metrics,
                           const std::vector<std::pair<std::string, std::string>>& rows) {
  const std::vector<std::string> columns{"AP", "AP_r", "AP_c", "AP_f", "AP_head", "AP_tail"};
  const std::vector<std::string> colors{"#4c72b0", "#dd8452", "#55a868"};
  auto value = [](const GroupMetrics& m, std::size_t c) -> std::optional<double> {
    switch (c) {
      case 0: return m.table.ap;
      case 1: return m.table.ap_rare;
      case 2: return m.table.ap_common;
      case 3: return m.table.ap_frequent;
      case 4: return m.ap_head;
      default: return m.ap_tail;
    }
  };
  const double w = 720, h = 360, left = 50, top = 40, bottom = 40, ph = h - top - bottom;
  const double group_w = (w - left - 150) / static_cast<double>(columns.size());
  const double bar_w = group_w * 0.8 / static_cast<double>(std::max<std::size_t>(1, rows.size()));
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << left << "\" y=\"24\" font-size=\"14\">AP by group (%)</text>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << w - 150 << "\" y2=\""
      << top + ph << "\" stroke=\"black\"/>\n";
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const double gx = left + group_w * static_cast<double>(c);
    svg << "<text x=\"" << gx + group_w * 0.4 << "\" y=\"" << h - 20 << "\" text-anchor=\"middle\">"
        << columns[c] << "</text>\n";
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto v = value(metrics.at(rows[r].first), c);
      if (!v) continue;
      const double bh = ph * std::clamp(*v, 0.0, 1.0);
      svg << "<rect x=\"" << gx + bar_w * static_cast<double>(r) << "\" y=\"" << top + ph - bh
          << "\" width=\"" << bar_w * 0.95 << "\" height=\"" << bh << "\" fill=\""
          << colors[r % colors.size()] << "\"/>\n";
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double ly = top + 16.0 * static_cast<double>(r);
    svg << "<rect x=\"" << w - 140 << "\" y=\"" << ly - 8 << "\" width=\"12\" height=\"12\" fill=\""
        << colors[r % colors.size()] << "\"/>\n"
        << "<text x=\"" << w - 122 << "\" y=\"" << ly + 2 << "\">" << rows[r].second << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void cmd_report(const Options& o) {
  const Run run = open_run(o, "report");
  require(run.layout.logs(), "report", "pretrain");
  const fs::path plots = run.layout.plots();
  fs::create_directories(plots);

  std::vector<fs::path> logs;
  for (const auto& entry : fs::directory_iterator(run.layout.logs())) {
    if (entry.path().extension() == ".json") logs.push_back(entry.path());
  }
  std::sort(logs.begin(), logs.end());
  for (const fs::path& path : logs) {
    const StageLog log = stage_log_from_json(read_text(path));
    std::vector<double> total, hungarian, feature, cls;
    for (const auto& e : log.entries) {
      total.push_back(e.loss.total);
      hungarian.push_back(e.loss.hungarian);
      feature.push_back(e.loss.weighted_feature);
      cls.push_back(e.loss.weighted_class);
    }
    std::vector<Series> series{{"total", "black", downsample(total, 400)},
                               {"hungarian", "#4c72b0", downsample(hungarian, 400)}};
    if (log.name.rfind("transfer", 0) == 0) {
      series.push_back({"feature distill", "#dd8452", downsample(feature, 400)});
      series.push_back({"class distill", "#55a868", downsample(cls, 400)});
    }
    const fs::path out = plots / ("loss_" + log.name + ".svg");
    write_text(out, svg_line_chart(log.name + " loss", series));
    std::cout << "wrote " << out.string() << "\n";
  }

  require(run.layout.metrics(), "report", "eval");
  const auto metrics = metrics_from_json(read_text(run.layout.metrics()));
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& [key, label] : std::vector<std::pair<std::string, std::string>>{
           {"baseline", "Baseline"}, {"finetune", "FT"}, {"unified", "FT&KT"}}) {
    if (metrics.count(key)) rows.push_back({key, label});
  }
  std::ostringstream table;
  table << "| model | AP | AP_r | AP_c | AP_f | AP_head | AP_tail |\n"
        << "|---|---|---|---|---|---|---|\n";
  for (const auto& [key, label] : rows) {
    const GroupMetrics& m = metrics.at(key);
    table << "| " << label << " | " << percent(m.table.ap) << " | " << percent(m.table.ap_rare)
          << " | " << percent(m.table.ap_common) << " | " << percent(m.table.ap_frequent) << " | "
          << percent(m.ap_head) << " | " << percent(m.ap_tail) << " |\n";
  }
  write_text(plots / "ablation.md", table.str());
  write_text(plots / "ablation.svg", svg_group_bars(metrics, rows));
  std::cout << table.str();
}

void cmd_run(const Options& o) {
  const RunConfig config = requested_config(o);
  const fs::path root = run_root(o, config);
  const RunLayout layout{root};
  if (fs::exists(layout.config()) && read_text(layout.config()) != config_to_text(config)) {
    throw std::invalid_argument("[run] " + layout.config().string() +
                                " holds a different config; use a fresh --run-dir");
  }
  const RunResult result = run_stepwise(config, root);
  print_comparison(result.report.metrics);
  std::cout << "artifacts in " << root.string() << " (" << result.report.wall_seconds << " s)\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Step-wise learning on smooth-tail data for long-tailed detection"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config_path, "Config file (key = value lines)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--preset", o.preset, "Preset name")
        ->check(CLI::IsMember({"paper-full", "toy-default", "smoke"}));
    cmd->add_option("--seed", o.seed, "Run seed");
    cmd->add_option("--run-dir", o.run_dir,
                    std::string("Run directory (default: $") + kRunRootEnv +
                        " or ./runs, then <preset>-seed<seed>)");
  };

  struct Command {
    const char* name;
    const char* help;
    void (*fn)(const Options&);
    bool stepped;
  };
  const Command commands[] = {
      {"gen-data", "Generate the train/val datasets and the config snapshot", cmd_gen_data, false},
      {"pretrain", "Train all parameters on the full long-tailed set", cmd_pretrain, false},
      {"score", "Score every training instance with the pretrained model", cmd_score, false},
      {"build-replay", "Build D_head and D_tail for every division step", cmd_build_replay, false},
      {"finetune", "Fine-tune the head expert on D_head", cmd_finetune, true},
      {"transfer", "Distill the expert into the unified model on D_tail", cmd_transfer, true},
      {"eval", "Evaluate baseline and unified models; writes metrics.json", cmd_eval, false},
      {"report", "Render loss curves and the ablation grid", cmd_report, false},
      {"run", "Execute the whole chain", cmd_run, false},
  };
  void (*selected)(const Options&) = nullptr;
  for (const Command& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    add_common(sub);
    if (c.stepped) sub->add_option("--step", o.step, "Division step (0 = first)");
    sub->callback([&selected, fn = c.fn] { selected = fn; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  try {
    selected(o);
  } catch (const MissingArtifact& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "lprobe/archive.hpp"
#include "lprobe/campaign.hpp"
#include "lprobe/error.hpp"
#include "lprobe/fixture.hpp"
#include "lprobe/http_service.hpp"
#include "lprobe/version.hpp"

namespace fs = std::filesystem;
using namespace lprobe;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

LabelingServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

void write_fixture(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  save_archive(dir / "generator.lpa", fixture_generator(seed));
  save_archive(dir / "classifier_a.lpa", fixture_classifier(seed));
  save_archive(dir / "classifier_b.lpa", fixture_classifier(seed + 1));
  nlohmann::json config{
      {"generator", "generator.lpa"},
      {"classifiers",
       {{{"name", "classifier_a"}, {"path", "classifier_a.lpa"}}, {{"name", "classifier_b"}, {"path", "classifier_b.lpa"}}}},
      {"tuples", {{"count", 20}, {"seed", seed}}},
      {"attack", {{"profile", "imagenet"}}},
      {"layer_subsets", {{"all", {1, 4, 8, 12}}, {"early", {1, 4}}, {"late", {8, 12}}}},
      {"calibration", {{"num_samples", 256}, {"seed", seed}}},
      {"label_names", {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"}},
      {"output_dir", "out"},
      {"analysis", {{"group_size", 5}}},
      {"serve", {{"judges", {"j1", "j2", "j3", "j4", "j5"}}}}};
  if (!fs::exists(dir / "campaign.json")) std::ofstream(dir / "campaign.json") << config.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-space perturbation probes for generator/classifier pairs"};
  app.set_version_flag("--version", std::string(kToolkitVersion));
  app.require_subcommand(1);

  fs::path config_path;
  fs::path out_dir;
  std::optional<std::size_t> workers;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> dispositions;
  std::optional<int> port;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Campaign config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  };

  auto* fixture = app.add_subcommand("fixture", "Write small random-weight archives and an example config");
  fixture->add_option("--out", out_dir, "Output directory")->required();
  fixture->add_option("--seed", seed, "Weight seed");

  auto* calibrate = app.add_subcommand("calibrate", "Estimate per-unit sigma and store it in the generator archive");
  add_common(calibrate);
  calibrate->add_option("--seed", seed, "Latent sampling seed");

  auto* attack = app.add_subcommand("attack", "Run or resume the attack campaign");
  add_common(attack);
  attack->add_option("--seed", seed, "Tuple seed");

  auto* analyze = app.add_subcommand("analyze", "Success curves, magnitude table and summary");
  add_common(analyze);
  analyze->add_option("--out", out_dir, "Output directory (default: <output_dir>/analysis)");
  analyze->add_option("--dispositions", dispositions, "Human disposition file")->check(CLI::ExistingFile);

  auto* plot = app.add_subcommand("plot-data", "Per-series curve CSVs");
  add_common(plot);
  plot->add_option("--out", out_dir, "Output directory (default: <output_dir>/plot-data)");
  plot->add_option("--dispositions", dispositions, "Human disposition file")->check(CLI::ExistingFile);

  auto* render = app.add_subcommand("render", "Replay successes and write image pairs");
  add_common(render);
  render->add_option("--out", out_dir, "Output directory (default: <output_dir>/render)");

  auto* serve = app.add_subcommand("serve", "Serve the labeling API");
  add_common(serve);
  serve->add_option("--port", port, "Listen port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (fixture->parsed()) {
      write_fixture(out_dir, seed.value_or(1));
      std::cout << "wrote fixture to " << out_dir << "\n";
      return kExitOk;
    }

    CampaignConfig config = CampaignConfig::load(config_path);
    if (workers) {
      config.workers = *workers;
      config.calibration.workers = *workers;
    }
    if (dispositions) config.analysis.dispositions = fs::absolute(*dispositions);
    auto out_or = [&](const char* sub) { return out_dir.empty() ? config.output_dir / sub : out_dir; };

    if (calibrate->parsed()) {
      if (seed) config.calibration.seed = *seed;
      const SigmaProfile sigma = run_calibration(config);
      std::cout << "calibrated " << sigma.sigma.size() << " injection points from " << sigma.sample_count
                << " samples\n";
    } else if (attack->parsed()) {
      if (seed) config.tuple_seed = *seed;
      const CampaignSummary s = run_attack_campaign(config);
      std::cout << "attempted " << s.attempted << " (resumed " << s.resumed << "): success " << s.success
                << ", exhausted " << s.exhausted << ", skipped " << s.skipped << "\n";
    } else if (analyze->parsed()) {
      const AnalysisOutputs o = run_analysis(config, out_or("analysis"));
      std::cout << "wrote " << o.curves_csv.string() << ", " << o.table_csv.string() << ", " << o.summary_json.string()
                << "\n";
    } else if (plot->parsed()) {
      for (const auto& p : write_plot_data(config, out_or("plot-data"))) std::cout << p.string() << "\n";
    } else if (render->parsed()) {
      std::cout << "wrote " << run_render(config, out_or("render")).string() << "\n";
    } else if (serve->parsed()) {
      auto images = load_manifest(config.serve.manifest);
      LabelingOptions options;
      options.panel_size = config.serve.panel_size;
      options.log_path = config.serve.vote_log;
      if (!options.log_path.empty()) fs::create_directories(fs::absolute(options.log_path).parent_path());
      LabelingStore store(label_items(images), config.serve.judges, options);
      LabelingServer server(store, std::move(images), config.serve.judges.empty());
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const int p = port.value_or(config.serve.port);
      std::cout << "serving on http://" << config.serve.host << ":" << p << std::endl;
      server.run(config.serve.host, p);
      g_server = nullptr;
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    std::cerr << "lprobe: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "lprobe: " << e.what() << "\n";
    return kExitRuntime;
  }
}

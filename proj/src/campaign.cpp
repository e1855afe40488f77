#include "lprobe/campaign.hpp"

#include <atomic>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "lprobe/archive.hpp"
#include "lprobe/error.hpp"
#include "lprobe/png.hpp"
#include "lprobe/version.hpp"

namespace lprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ull) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

json attack_json(const AttackConfig& a) {
  json j{{"learning_rate", a.learning_rate}, {"adam_beta1", a.adam_beta1},   {"adam_beta2", a.adam_beta2},
         {"adam_eps", a.adam_eps},           {"initial_bound", a.initial_bound}, {"bound_multiplier", a.bound_multiplier},
         {"bound_increment", a.bound_increment}, {"max_steps", a.max_steps}};
  j["max_bound"] = a.max_bound ? json(*a.max_bound) : json(nullptr);
  return j;
}

std::string header_comment(const std::string& hash) {
  return std::string("# config_hash=") + hash + " version=" + kToolkitVersion + "\n";
}

struct LoadedModels {
  Network generator;
  SigmaProfile sigma;
  std::vector<std::pair<std::string, Network>> classifiers;
  std::map<std::string, InjectionMask> subsets;
};

std::map<std::string, InjectionMask> resolve_subsets(const CampaignConfig& config, const Network& generator) {
  std::map<std::string, InjectionMask> out;
  if (config.layer_subsets.empty()) {
    out.emplace("all", InjectionMask::all(generator.injection_count()));
    return out;
  }
  for (const auto& [name, boundaries] : config.layer_subsets) {
    auto mask = InjectionMask::from_boundaries(generator.spec(), boundaries);
    if (mask.active_count() == 0) throw ConfigError("layer subset '" + name + "' is empty");
    out.emplace(name, std::move(mask));
  }
  return out;
}

LoadedModels load_models(const CampaignConfig& config) {
  if (!fs::exists(config.generator)) throw ConfigError("generator archive not found: " + config.generator.string());
  if (config.classifiers.empty()) throw ConfigError("no classifiers configured");
  Archive gen = load_archive(config.generator);
  if (gen.network.spec().role != NetworkRole::generator)
    throw ConfigError(config.generator.string() + " is not a generator archive");
  if (!gen.sigma) throw ConfigError("generator archive has no sigma profile; run 'calibrate' first");
  LoadedModels models{std::move(gen.network), std::move(*gen.sigma), {}, {}};
  for (const auto& c : config.classifiers) {
    if (!fs::exists(c.path)) throw ConfigError("classifier archive not found: " + c.path.string());
    Archive a = load_archive(c.path);
    if (a.network.spec().role != NetworkRole::classifier)
      throw ConfigError(c.path.string() + " is not a classifier archive");
    if (a.network.spec().input_shape != models.generator.output_shape())
      throw ConfigError("classifier '" + c.name + "' expects " + shape_to_string(a.network.spec().input_shape) +
                        " but the generator emits " + shape_to_string(models.generator.output_shape()));
    models.classifiers.emplace_back(c.name, std::move(a.network));
  }
  models.subsets = resolve_subsets(config, models.generator);
  return models;
}

using RecordKey = std::tuple<std::string, std::string, std::size_t>;

RecordKey key_of(const AttackRecord& r) { return {r.classifier, r.layer_subset, r.tuple_id}; }

std::vector<AttackRecord> load_analysis_records(const CampaignConfig& config) {
  std::vector<fs::path> files;
  if (fs::exists(records_path(config))) files.push_back(records_path(config));
  for (const auto& p : config.analysis.records) files.push_back(p);
  if (files.empty()) throw ConfigError("no attack records found at " + records_path(config).string());
  std::vector<AttackRecord> records;
  for (const auto& f : files) {
    auto part = read_records(f);
    records.insert(records.end(), part.begin(), part.end());
  }
  if (records.empty()) throw ConfigError("attack record set is empty");
  if (!config.analysis.force_mix) {
    for (const auto& r : records)
      if (r.config_hash != records.front().config_hash)
        throw ConfigError("records mix config hashes " + records.front().config_hash + " and " + r.config_hash +
                          " (set analysis.force_mix to override)");
  }
  return records;
}

std::string csv_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_') ? c : '_';
  return out;
}

}  // namespace

CampaignConfig CampaignConfig::load(const fs::path& path) {
  return parse(read_file(path), fs::absolute(path).parent_path());
}

CampaignConfig CampaignConfig::parse(const std::string& json_text, const fs::path& base_dir) {
  CampaignConfig c;
  try {
    const json j = json::parse(json_text);
    c.generator = resolve(base_dir, j.at("generator").get<std::string>());
    for (const auto& e : j.at("classifiers"))
      c.classifiers.push_back({e.at("name").get<std::string>(), resolve(base_dir, e.at("path").get<std::string>())});

    if (j.contains("tuples")) {
      c.tuple_count = j["tuples"].value("count", std::size_t{0});
      c.tuple_seed = j["tuples"].value("seed", std::uint64_t{0});
    }

    const json a = j.value("attack", json::object());
    const std::string profile = a.value("profile", std::string("imagenet"));
    if (profile == "imagenet") c.attack = AttackConfig::imagenet_profile();
    else if (profile == "mnist") c.attack = AttackConfig::mnist_profile();
    else throw ConfigError("unknown attack profile '" + profile + "'");
    c.attack.learning_rate = a.value("learning_rate", c.attack.learning_rate);
    c.attack.adam_beta1 = a.value("adam_beta1", c.attack.adam_beta1);
    c.attack.adam_beta2 = a.value("adam_beta2", c.attack.adam_beta2);
    c.attack.adam_eps = a.value("adam_eps", c.attack.adam_eps);
    c.attack.initial_bound = a.value("initial_bound", c.attack.initial_bound);
    c.attack.bound_multiplier = a.value("bound_multiplier", c.attack.bound_multiplier);
    c.attack.bound_increment = a.value("bound_increment", c.attack.bound_increment);
    c.attack.max_steps = a.value("max_steps", c.attack.max_steps);
    if (a.contains("max_bound") && !a["max_bound"].is_null()) c.attack.max_bound = a["max_bound"].get<double>();
    c.attack.validate();

    if (j.contains("layer_subsets"))
      for (const auto& [name, list] : j["layer_subsets"].items())
        c.layer_subsets[name] = list.get<std::vector<std::size_t>>();

    const json cal = j.value("calibration", json::object());
    c.calibration.num_samples = cal.value("num_samples", c.calibration.num_samples);
    c.calibration.seed = cal.value("seed", c.calibration.seed);
    c.calibration.floor = cal.value("floor", c.calibration.floor);

    c.label_names = j.value("label_names", std::vector<std::string>{});
    c.output_dir = resolve(base_dir, j.value("output_dir", std::string("out")));
    c.workers = std::max<std::size_t>(1, j.value("workers", std::size_t{1}));
    c.calibration.workers = c.workers;

    const json an = j.value("analysis", json::object());
    c.analysis.group_size = an.value("group_size", c.analysis.group_size);
    if (an.contains("dispositions") && !an["dispositions"].is_null())
      c.analysis.dispositions = resolve(base_dir, an["dispositions"].get<std::string>());
    c.analysis.bound_grid = an.value("bound_grid", std::vector<double>{});
    if (an.contains("magnitude_cap") && !an["magnitude_cap"].is_null())
      c.analysis.magnitude_cap = an["magnitude_cap"].get<double>();
    c.analysis.force_mix = an.value("force_mix", false);
    for (const auto& p : an.value("records", std::vector<std::string>{})) c.analysis.records.push_back(resolve(base_dir, p));

    const json r = j.value("render", json::object());
    c.render.difference_scale = r.value("difference_scale", c.render.difference_scale);
    if (r.contains("limit") && !r["limit"].is_null()) c.render.limit = r["limit"].get<std::size_t>();

    const json s = j.value("serve", json::object());
    c.serve.host = s.value("host", c.serve.host);
    c.serve.port = s.value("port", c.serve.port);
    c.serve.panel_size = s.value("panel_size", c.serve.panel_size);
    c.serve.judges = s.value("judges", std::vector<std::string>{});
    c.serve.vote_log = resolve(base_dir, s.value("vote_log", (c.output_dir / "votes.jsonl").string()));
    c.serve.manifest = resolve(base_dir, s.value("manifest", (c.output_dir / "render" / "manifest.json").string()));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  return c;
}

std::string CampaignConfig::label_name(std::size_t label) const {
  if (label < label_names.size()) return label_names[label];
  return "class " + std::to_string(label);
}

std::string config_hash(const CampaignConfig& config) {
  json j;
  j["attack"] = attack_json(config.attack);
  j["tuples"] = {{"count", config.tuple_count}, {"seed", config.tuple_seed}};
  j["layer_subsets"] = config.layer_subsets;
  std::uint64_t h = fnv1a(j.dump());
  h = fnv1a(read_file(config.generator), h);
  for (const auto& c : config.classifiers) {
    h = fnv1a(c.name, h);
    h = fnv1a(read_file(c.path), h);
  }
  return hex64(h);
}

std::string record_to_json(const AttackRecord& r) {
  json j{{"tuple_id", r.tuple_id},
         {"y", r.y},
         {"t", r.t},
         {"status", to_string(r.status)},
         {"success_magnitude", r.success_magnitude},
         {"steps_taken", r.steps_taken},
         {"layer_subset", r.layer_subset},
         {"classifier", r.classifier},
         {"seed", r.seed},
         {"config_hash", r.config_hash},
         {"version", kToolkitVersion}};
  if (!r.diagnostic.empty()) j["diagnostic"] = r.diagnostic;
  return j.dump();
}

AttackRecord record_from_json(const std::string& line) {
  try {
    const json j = json::parse(line);
    AttackRecord r;
    r.tuple_id = j.at("tuple_id");
    r.y = j.at("y");
    r.t = j.at("t");
    r.status = attack_status_from(j.at("status"));
    r.success_magnitude = j.at("success_magnitude");
    r.steps_taken = j.at("steps_taken");
    r.layer_subset = j.at("layer_subset");
    r.classifier = j.at("classifier");
    r.seed = j.at("seed");
    r.config_hash = j.value("config_hash", std::string{});
    r.diagnostic = j.value("diagnostic", std::string{});
    return r;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed attack record: ") + e.what());
  }
}

std::vector<AttackRecord> read_records(const fs::path& path, bool repair) {
  std::vector<AttackRecord> out;
  if (!fs::exists(path)) return out;
  const std::string text = read_file(path);
  std::size_t pos = 0, good_end = 0;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    const std::string line = text.substr(pos, terminated ? nl - pos : std::string::npos);
    const std::size_t next = terminated ? nl + 1 : text.size();
    if (!line.empty()) {
      try {
        out.push_back(record_from_json(line));
      } catch (const ConfigError&) {
        if (next < text.size()) throw ConfigError("corrupt record line in " + path.string());
        break;  // torn tail
      }
      if (!terminated) {
        out.pop_back();  // not yet durable
        break;
      }
    }
    good_end = next;
    pos = next;
  }
  if (repair && good_end < text.size()) {
    std::ofstream rewrite(path, std::ios::binary | std::ios::trunc);
    rewrite.write(text.data(), static_cast<std::streamsize>(good_end));
  }
  return out;
}

fs::path records_path(const CampaignConfig& config) { return config.output_dir / "records.jsonl"; }

SigmaProfile run_calibration(const CampaignConfig& config) {
  if (!fs::exists(config.generator)) throw ConfigError("generator archive not found: " + config.generator.string());
  Archive gen = load_archive(config.generator);
  SigmaProfile sigma = calibrate(gen.network, config.calibration);
  save_archive(config.generator, gen.network, sigma);
  return sigma;
}

CampaignSummary run_attack_campaign(const CampaignConfig& config) {
  if (config.tuple_count == 0) throw ConfigError("tuple count must be at least 1");
  const LoadedModels models = load_models(config);
  const std::string hash = config_hash(config);
  fs::create_directories(config.output_dir);
  const fs::path path = records_path(config);

  CampaignSummary summary;
  std::set<RecordKey> done;
  for (const auto& r : read_records(path, true)) {
    if (r.config_hash != hash)
      throw ConfigError("existing records in " + path.string() + " were produced under config hash " + r.config_hash +
                        "; use a fresh output directory");
    done.insert(key_of(r));
  }

  struct Job {
    const std::string* classifier_name;
    const Network* classifier;
    const std::string* subset_name;
    const InjectionMask* mask;
    std::size_t tuple_id;
  };
  std::vector<Job> jobs;
  for (const auto& [name, net] : models.classifiers)
    for (const auto& [subset, mask] : models.subsets)
      for (std::size_t t = 0; t < config.tuple_count; ++t) {
        if (done.count({name, subset, t})) {
          ++summary.resumed;
          continue;
        }
        jobs.push_back({&name, &net, &subset, &mask, t});
      }

  std::ofstream out(path, std::ios::app | std::ios::binary);
  if (!out) throw Error("cannot open " + path.string());
  std::mutex write_mutex;
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(config.workers);

  auto worker = [&](std::size_t w) {
    try {
      for (std::size_t i = next++; i < jobs.size(); i = next++) {
        const Job& job = jobs[i];
        const AttackTuple tuple = sample_tuple(job.classifier->spec().class_count(), models.generator.spec().input_shape,
                                               job.tuple_id, config.tuple_seed);
        AttackConfig cfg = config.attack;
        cfg.layer_subset = *job.mask;
        AttackRecord rec = attack(models.generator, *job.classifier, models.sigma, tuple, cfg).record;
        rec.classifier = *job.classifier_name;
        rec.layer_subset = *job.subset_name;
        rec.config_hash = hash;
        std::lock_guard lock(write_mutex);
        out << record_to_json(rec) << '\n';
        out.flush();
        ++summary.attempted;
        switch (rec.status) {
          case AttackStatus::success: ++summary.success; break;
          case AttackStatus::exhausted: ++summary.exhausted; break;
          case AttackStatus::skipped_misclassified: ++summary.skipped; break;
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
      next = jobs.size();
    }
  };

  if (config.workers <= 1) {
    worker(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < config.workers; ++w) pool.emplace_back(worker, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return summary;
}

DispositionMap read_dispositions(const fs::path& path) {
  const std::string text = read_file(path);
  DispositionMap out;
  auto add = [&](const json& e) { out[e.at("image_id").get<std::string>()] = outcome_from(e.at("outcome")); };
  try {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '[') {
      for (const auto& e : json::parse(text)) add(e);
    } else {
      std::istringstream in(text);
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) add(json::parse(line));
    }
  } catch (const json::exception& e) {
    throw ConfigError("malformed dispositions file " + path.string() + ": " + e.what());
  }
  return out;
}

AnalysisOutputs run_analysis(const CampaignConfig& config, const fs::path& out_dir) {
  const auto records = load_analysis_records(config);
  std::optional<DispositionMap> dispositions;
  if (config.analysis.dispositions) dispositions = read_dispositions(*config.analysis.dispositions);
  const DispositionMap* disp = dispositions ? &*dispositions : nullptr;
  const std::string hash = records.front().config_hash;

  fs::create_directories(out_dir);
  AnalysisOutputs outputs{out_dir / "curves.csv", out_dir / "table.csv", {}, out_dir / "summary.json"};

  std::map<std::pair<std::string, std::string>, std::vector<AttackRecord>> series;
  for (const auto& r : records) series[{r.classifier, r.layer_subset}].push_back(r);
  for (auto& [key, list] : series)
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.tuple_id < b.tuple_id; });

  json summary{{"config_hash", hash},
               {"version", kToolkitVersion},
               {"mode", disp ? "human" : "human_free"},
               {"group_size", config.analysis.group_size},
               {"series", json::array()}};

  std::ofstream curves(outputs.curves_csv);
  curves << header_comment(hash) << "classifier,layer_subset,magnitude,proportion,mean,std\n";
  for (const auto& [key, list] : series) {
    const CurveSeries c = build_curve(list, disp, config.analysis.group_size, config.analysis.magnitude_cap);
    for (std::size_t k = 0; k < c.grid.size(); ++k)
      curves << key.first << ',' << key.second << ',' << csv_double(c.grid[k]) << ',' << csv_double(c.proportion[k])
             << ',' << csv_double(c.mean[k]) << ',' << csv_double(c.stddev[k]) << '\n';
    summary["series"].push_back({{"classifier", key.first},
                                 {"layer_subset", key.second},
                                 {"records", list.size()},
                                 {"denominator", c.denominator},
                                 {"counted_successes", c.counted_successes},
                                 {"skipped", c.skipped},
                                 {"unpert_rejected", c.unpert_rejected},
                                 {"group_count", c.group_count},
                                 {"last_group_incomplete", c.last_group_incomplete},
                                 {"final_proportion", c.proportion.empty() ? 0.0 : c.proportion.back()}});
  }

  std::ofstream table(outputs.table_csv);
  table << header_comment(hash) << "classifier,layer_subset,mean_magnitude,count\n";
  summary["table"] = json::array();
  for (const auto& cell : mean_magnitude_table(records, disp)) {
    table << cell.classifier << ',' << cell.layer_subset << ',' << (cell.mean ? csv_double(*cell.mean) : "") << ','
          << cell.count << '\n';
    summary["table"].push_back({{"classifier", cell.classifier},
                                {"layer_subset", cell.layer_subset},
                                {"mean_magnitude", cell.mean ? json(*cell.mean) : json(nullptr)},
                                {"count", cell.count}});
  }

  if (disp && !config.analysis.bound_grid.empty()) {
    outputs.tradeoff_csv = out_dir / "tradeoff.csv";
    std::ofstream trade(outputs.tradeoff_csv);
    trade << header_comment(hash) << "classifier,layer_subset,bound,success_count,class_changed_count\n";
    summary["tradeoff"] = json::array();
    for (const auto& [key, list] : series)
      for (const auto& p : threshold_tradeoff(list, *disp, config.analysis.bound_grid)) {
        trade << key.first << ',' << key.second << ',' << csv_double(p.bound) << ',' << p.success_count << ','
              << p.class_changed_count << '\n';
        summary["tradeoff"].push_back({{"classifier", key.first},
                                       {"layer_subset", key.second},
                                       {"bound", p.bound},
                                       {"success_count", p.success_count},
                                       {"class_changed_count", p.class_changed_count}});
      }
  }

  std::ofstream(outputs.summary_json) << summary.dump(2) << '\n';
  return outputs;
}

std::vector<fs::path> write_plot_data(const CampaignConfig& config, const fs::path& out_dir) {
  const auto records = load_analysis_records(config);
  std::optional<DispositionMap> dispositions;
  if (config.analysis.dispositions) dispositions = read_dispositions(*config.analysis.dispositions);
  std::map<std::pair<std::string, std::string>, std::vector<AttackRecord>> series;
  for (const auto& r : records) series[{r.classifier, r.layer_subset}].push_back(r);
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  for (auto& [key, list] : series) {
    std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.tuple_id < b.tuple_id; });
    const auto c = build_curve(list, dispositions ? &*dispositions : nullptr, config.analysis.group_size,
                               config.analysis.magnitude_cap);
    const fs::path p = out_dir / (safe_name(key.first) + "__" + safe_name(key.second) + ".csv");
    std::ofstream out(p);
    out << header_comment(records.front().config_hash) << "magnitude,mean,std\n";
    for (std::size_t k = 0; k < c.grid.size(); ++k)
      out << csv_double(c.grid[k]) << ',' << csv_double(c.mean[k]) << ',' << csv_double(c.stddev[k]) << '\n';
    written.push_back(p);
  }
  return written;
}

fs::path run_render(const CampaignConfig& config, const fs::path& out_dir) {
  const LoadedModels models = load_models(config);
  const auto records = read_records(records_path(config));
  fs::create_directories(out_dir / "images");

  std::map<std::string, const Network*> classifiers;
  for (const auto& [name, net] : models.classifiers) classifiers[name] = &net;

  json manifest{{"config_hash", config_hash(config)}, {"version", kToolkitVersion}, {"items", json::array()}};
  std::map<std::pair<std::string, std::string>, std::vector<std::pair<Tensor, Tensor>>> grids;
  std::size_t rendered = 0;
  for (const auto& r : records) {
    if (r.status != AttackStatus::success) continue;
    if (config.render.limit && rendered >= *config.render.limit) break;
    auto cls = classifiers.find(r.classifier);
    auto subset = models.subsets.find(r.layer_subset);
    if (cls == classifiers.end() || subset == models.subsets.end())
      throw ConfigError("record " + image_id(r) + " references an unknown classifier or layer subset");
    const AttackTuple tuple =
        sample_tuple(cls->second->spec().class_count(), models.generator.spec().input_shape, r.tuple_id, r.seed);
    AttackConfig cfg = config.attack;
    cfg.layer_subset = subset->second;
    const AttackResult replay = attack(models.generator, *cls->second, models.sigma, tuple, cfg);
    if (replay.record.status != r.status || replay.record.steps_taken != r.steps_taken ||
        replay.record.success_magnitude != r.success_magnitude)
      throw Error("replay of " + image_id(r) + " does not reproduce the stored record");

    Shape batched{1};
    for (auto d : tuple.z.shape()) batched.push_back(d);
    const Tensor z = tuple.z.reshaped(batched);
    const Tensor clean = models.generator.forward(z);
    const Tensor perturbed = models.generator.forward(z, replay.perturbation, models.sigma);

    const std::string stem = std::to_string(rendered);
    write_png(out_dir / "images" / (stem + "_unperturbed.png"), clean);
    write_png(out_dir / "images" / (stem + "_perturbed.png"), perturbed);
    write_png(out_dir / "images" / (stem + "_difference.png"),
              difference_image(clean, perturbed, config.render.difference_scale));
    grids[{r.classifier, r.layer_subset}].emplace_back(clean, perturbed);
    manifest["items"].push_back({{"image_id", image_id(r)},
                                 {"label", r.y},
                                 {"label_name", config.label_name(r.y)},
                                 {"target", r.t},
                                 {"success_magnitude", r.success_magnitude},
                                 {"unperturbed", "images/" + stem + "_unperturbed.png"},
                                 {"perturbed", "images/" + stem + "_perturbed.png"}});
    ++rendered;
  }
  for (const auto& [key, pairs] : grids)
    write_png(out_dir / ("grid_" + safe_name(key.first) + "__" + safe_name(key.second) + ".png"),
              triple_grid(pairs, config.render.difference_scale));
  const fs::path manifest_path = out_dir / "manifest.json";
  std::ofstream(manifest_path) << manifest.dump(2) << '\n';
  return manifest_path;
}

}  // namespace lprobe

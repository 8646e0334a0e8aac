// Command-line driver: prepare / train / evaluate / run / bench / gridsearch.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "scalable_linucb/eval_harness.hpp"
#include "scalable_linucb/synthetic.hpp"

namespace fs = std::filesystem;
namespace slu = scalable_linucb;

namespace {

enum Exit { kOk = 0, kConfig = 2, kData = 3, kRuntime = 4 };

// Flags that mirror RunConfig. They live on the top-level app so a config
// file can set them and they can follow the verb on the command line.
struct RunFlags {
  std::string data;
  bool movielens = false;
  slu::CsvSchema schema;
  std::string reward_rule = "threshold";
  std::string algorithm = "psi";
  slu::RunConfig cfg;
  CLI::App* app = nullptr;

  void attach(CLI::App& a) {
    app = &a;
    a.add_option("--data", data, "interaction file (csv or ::-separated, optionally .gz)");
    a.add_flag("--movielens", movielens, "MovieLens ratings.dat layout; explicit schema flags still win");
    a.add_option("--delimiter", schema.delimiter, "field separator")->capture_default_str();
    a.add_option("--header", schema.has_header, "first line holds column names")->capture_default_str();
    a.add_option("--user-col", schema.user_column, "user column (name, or index without header)");
    a.add_option("--item-col", schema.item_column, "item column");
    a.add_option("--rating-col", schema.rating_column, "rating column; empty for implicit feedback");
    a.add_option("--time-col", schema.timestamp_column, "timestamp column");
    a.add_option("--reward-rule", reward_rule, "threshold | implicit | raw")->capture_default_str();
    a.add_option("--rating-threshold", schema.rating_threshold, "ratings at or above count as reward 1")
        ->capture_default_str();
    a.add_option("--algorithm", algorithm, "psi | exact | sherman")->capture_default_str();
    a.add_option("--eps", cfg.eps, "prior scale; ridge lambda = 1/eps")->capture_default_str();
    a.add_option("--alpha", cfg.alpha, "exploration weight")->capture_default_str();
    a.add_option("--rank", cfg.rank_cap, "rank cap of the PSI factor")->capture_default_str();
    a.add_option("--r-prime", cfg.r_prime, "SVD rank; context dimension is r'^2")->capture_default_str();
    a.add_option("--warmup-fraction", cfg.warmup_fraction)->capture_default_str();
    a.add_option("--periods", cfg.n_periods, "online periods after the warm-up")->capture_default_str();
    a.add_option("--top-k", cfg.top_k, "list length for the hit rate")->capture_default_str();
    a.add_option("--candidates", cfg.n_candidates, "most frequent warm-up items used as arms; 0 = all")
        ->capture_default_str();
    a.add_option("--batch-size", cfg.batch_size, "interactions per training batch; 0 = whole split")
        ->capture_default_str();
    a.add_option("--seed", cfg.seed, "SVD sketch seed")->capture_default_str();
    a.add_option("--memory-budget-mb", cfg.memory_budget_mb, "soft budget for bench; 0 = 75% of RAM")
        ->capture_default_str();
  }

  bool given(const char* name) const { return app->count(name) > 0; }

  slu::RunConfig resolve() const {
    slu::RunConfig c = cfg;
    c.data_path = data;
    c.schema = movielens ? slu::CsvSchema::movielens() : slu::CsvSchema{};
    if (given("--delimiter")) c.schema.delimiter = schema.delimiter;
    if (given("--header")) c.schema.has_header = schema.has_header;
    if (given("--user-col")) c.schema.user_column = schema.user_column;
    if (given("--item-col")) c.schema.item_column = schema.item_column;
    if (given("--rating-col")) c.schema.rating_column = schema.rating_column;
    if (given("--time-col")) c.schema.timestamp_column = schema.timestamp_column;
    if (given("--rating-threshold")) c.schema.rating_threshold = schema.rating_threshold;
    c.schema.reward_rule = slu::parse_reward_rule(reward_rule);
    c.algorithm = slu::parse_algorithm(algorithm);
    c.validate();
    return c;
  }
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

void write_json(const fs::path& path, const slu::ordered_json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::string fmt(double v, const char* spec = "%.4f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

slu::ordered_json split_json(const slu::Experiment& exp) {
  slu::ordered_json periods = slu::ordered_json::array();
  for (const auto& p : exp.split.periods) periods.push_back({p.begin, p.end});
  return {{"warmup", {exp.split.warmup.begin, exp.split.warmup.end}},
          {"periods", periods},
          {"candidates", exp.candidates.size()}};
}

slu::Experiment load_experiment(const slu::RunConfig& cfg, const std::optional<fs::path>& features) {
  slu::InteractionLog log = slu::load_run_data(cfg);
  log_line("loaded " + std::to_string(log.size()) + " interactions, " + std::to_string(log.n_users()) +
           " users, " + std::to_string(log.n_items()) + " items");
  if (features) return slu::prepare_experiment(std::move(log), cfg, slu::read_feature_model(*features));
  slu::Experiment exp = slu::prepare_experiment(std::move(log), cfg);
  log_line("features: r'=" + std::to_string(exp.features.r_prime()) + ", d=" + std::to_string(exp.context_dim()) +
           ", svd " + fmt(exp.svd_seconds, "%.2f") + " s");
  return exp;
}

// Model snapshot directory: arms + manifest, plus the features and config
// needed to score with it later.
template <class Model>
void write_model_dir(const fs::path& dir, const Model& model, const slu::Experiment& exp,
                     const slu::RunConfig& cfg, std::size_t trained_through) {
  slu::ordered_json extra = {{"trained_through", trained_through},
                             {"config", slu::config_to_json(cfg)},
                             {"features", "features.bin"}};
  slu::save_snapshot(dir, model, nlohmann::json::parse(extra.dump()));
  slu::write_feature_model(dir / "features.bin", exp.features);
  slu::write_config_file(dir / "config.ini", cfg);
}

template <class Model>
std::size_t train_through(Model& model, const slu::Experiment& exp, const slu::RunConfig& cfg, std::size_t periods) {
  std::size_t n = slu::train_split(model, exp, exp.split.warmup, cfg.batch_size);
  for (std::size_t p = 0; p < periods; ++p) n += slu::train_split(model, exp, exp.split.periods[p], cfg.batch_size);
  return n;
}

int cmd_prepare(const RunFlags& flags, const fs::path& out) {
  const slu::RunConfig cfg = flags.resolve();
  const slu::Experiment exp = load_experiment(cfg, std::nullopt);
  fs::create_directories(out);
  slu::write_feature_model(out / "features.bin", exp.features);
  slu::write_config_file(out / "config.ini", cfg);
  write_json(out / "manifest.json", {{"kind", "features"},
                                     {"features", "features.bin"},
                                     {"r_prime", exp.features.r_prime()},
                                     {"context_dim", exp.context_dim()},
                                     {"n_users", exp.log.n_users()},
                                     {"n_items", exp.log.n_items()},
                                     {"n_records", exp.log.size()},
                                     {"svd_seconds", exp.svd_seconds},
                                     {"split", split_json(exp)},
                                     {"config", slu::config_to_json(cfg)}});
  log_line("wrote " + (out / "features.bin").string());
  return kOk;
}

int cmd_train(const RunFlags& flags, const fs::path& out, const std::optional<fs::path>& features,
              std::size_t through) {
  const slu::RunConfig cfg = flags.resolve();
  std::optional<fs::path> feature_file;
  if (features) feature_file = fs::is_directory(*features) ? *features / "features.bin" : *features;
  const slu::Experiment exp = load_experiment(cfg, feature_file);
  if (through > exp.split.periods.size()) throw slu::ConfigError("--through exceeds the number of periods");
  const slu::Index d = exp.context_dim();
  const slu::Stopwatch sw;
  auto finish = [&](const auto& model, std::size_t n) {
    write_model_dir(out, model, exp, cfg, through);
    log_line("trained " + std::to_string(n) + " interactions on " + std::to_string(model.arms().size()) +
             " arms in " + fmt(sw.seconds(), "%.2f") + " s; snapshot " + out.string());
  };
  if (cfg.algorithm == slu::Algorithm::psi) {
    auto model = slu::make_psi_model(d, cfg.policy());
    const std::size_t n = train_through(model, exp, cfg, through);
    finish(model, n);
  } else {
    auto model = slu::make_exact_model(d, cfg.policy(), cfg.algorithm == slu::Algorithm::exact
                                                            ? slu::ExactMode::batch_solve
                                                            : slu::ExactMode::sherman_morrison);
    const std::size_t n = train_through(model, exp, cfg, through);
    finish(model, n);
  }
  return kOk;
}

int cmd_evaluate(const RunFlags& flags, const fs::path& model_dir, std::optional<std::size_t> period,
                 const std::optional<fs::path>& out) {
  const nlohmann::json manifest = slu::read_manifest(model_dir);
  const auto& extra = manifest.at("extra");
  slu::RunConfig cfg = slu::config_from_json(extra.at("config"));
  // Only scoring flags may differ from the training run.
  if (flags.given("--alpha")) cfg.alpha = flags.cfg.alpha;
  if (flags.given("--top-k")) cfg.top_k = flags.cfg.top_k;
  if (flags.given("--data")) cfg.data_path = flags.data;
  cfg.validate();
  const auto through = extra.at("trained_through").get<std::size_t>();
  const std::size_t target = period.value_or(through + 1);
  if (target < 1 || target > cfg.n_periods) throw slu::ConfigError("--period must lie in 1.." + std::to_string(cfg.n_periods));
  if (target <= through) {
    throw slu::ConfigError("model has already absorbed period " + std::to_string(target) +
                           "; evaluate a later period");
  }
  const slu::Experiment exp = load_experiment(cfg, model_dir / extra.at("features").get<std::string>());
  const auto targets = slu::evaluation_targets(exp, exp.split.periods[target - 1]);

  slu::HitRate hr;
  std::uint64_t hash = 0;
  const std::string kind = manifest.at("arm_kind").get<std::string>();
  const slu::Stopwatch sw;
  auto score = [&](const auto& model) {
    if (model.dim() != exp.context_dim()) throw slu::DataError("snapshot dimension does not match the features");
    hr = slu::hit_rate(model, exp.features, exp.candidates, targets, cfg.alpha, static_cast<std::size_t>(cfg.top_k));
    hash = slu::state_hash(model);
  };
  if (kind == slu::arm_kind<slu::ArmState>()) {
    score(slu::load_snapshot<slu::ArmState>(model_dir));
  } else {
    score(slu::load_snapshot<slu::ExactArmState>(model_dir));
  }
  slu::ordered_json result = {{"period", target},
                              {"hit_rate", slu::detail::optional_json(hr.value)},
                              {"hits", hr.hits},
                              {"n_eval", hr.total},
                              {"users", hr.users},
                              {"alpha", cfg.alpha},
                              {"top_k", cfg.top_k},
                              {"eval_seconds", sw.seconds()},
                              {"state_hash", slu::detail::hex64(hash)}};
  std::cout << result.dump(2) << '\n';
  if (out) {
    fs::create_directories(*out);
    write_json(*out / "evaluation.json", result);
  }
  return kOk;
}

int cmd_run(const RunFlags& flags, const fs::path& out, bool save_model) {
  const slu::RunConfig base = flags.resolve();
  slu::RunConfig cfg = base;
  cfg.output_dir = out.string();
  const slu::Experiment exp = load_experiment(cfg, std::nullopt);
  fs::create_directories(out);
  slu::write_config_file(out / "config.ini", cfg);
  slu::EvalReport report;
  try {
    report = slu::run_protocol(exp, cfg, [&](const auto& variant) {
      if (!save_model) return;
      std::visit([&](const auto* model) { write_model_dir(out / "snapshot", *model, exp, cfg, cfg.n_periods); },
                 variant);
    });
  } catch (const slu::ProtocolError& e) {
    slu::EvalReport partial = e.partial();
    partial.error = e.what();
    slu::emit_report(out, partial);
    throw;
  }
  slu::emit_report(out, report);
  for (const auto& p : report.periods) {
    log_line("period " + std::to_string(p.index + 1) + ": hit rate " +
             (p.hit_rate ? fmt(*p.hit_rate) : std::string("n/a")) + " (" + std::to_string(p.n_eval) + " targets)");
  }
  const auto mean = report.mean_hit_rate();
  std::cout << "mean hit rate " << (mean ? fmt(*mean) : std::string("n/a")) << ", warm-up train "
            << fmt(report.warmup.train_seconds, "%.2f") << " s, model state " << report.model_state_bytes
            << " bytes\n";
  return kOk;
}

int cmd_gridsearch(const RunFlags& flags, const fs::path& out, const std::string& stage, std::vector<double> alphas,
                   std::vector<slu::Index> ranks, std::size_t jobs) {
  const slu::RunConfig cfg = flags.resolve();
  if (alphas.empty()) {
    if (stage == "broad" || stage == "both") alphas = slu::default_alpha_grid_broad();
    if (stage == "refined" || stage == "both") {
      const auto refined = slu::default_alpha_grid_refined();
      alphas.insert(alphas.end(), refined.begin(), refined.end());
    }
    if (alphas.empty()) throw slu::ConfigError("unknown --stage '" + stage + "' (broad, refined or both)");
  }
  if (ranks.empty()) ranks = cfg.algorithm == slu::Algorithm::psi ? slu::default_rank_grid() : std::vector{cfg.rank_cap};
  const slu::Experiment exp = load_experiment(cfg, std::nullopt);
  const slu::GridResult g = slu::grid_search(exp, cfg, alphas, ranks, jobs);
  fs::create_directories(out);
  slu::write_sweep_csv(out / "sweep.csv", g);
  slu::write_config_file(out / "best_config.ini", g.best_config);
  slu::ordered_json cells = slu::ordered_json::array();
  for (const auto& c : g.cells) {
    cells.push_back({{"rank", c.rank}, {"alpha", c.alpha}, {"hit_rate", slu::detail::optional_json(c.hit_rate)},
                     {"n_eval", c.n_eval}});
  }
  write_json(out / "grid.json", {{"validation", "hit rate on the first online period"},
                                 {"best", {{"rank", g.best.rank}, {"alpha", g.best.alpha},
                                           {"hit_rate", slu::detail::optional_json(g.best.hit_rate)}}},
                                 {"cells", cells},
                                 {"config", slu::config_to_json(cfg)}});
  std::cout << "best: rank " << g.best.rank << ", alpha " << g.best.alpha << ", validation hit rate "
            << (g.best.hit_rate ? fmt(*g.best.hit_rate) : std::string("n/a")) << "\n";
  return kOk;
}

struct BenchFlags {
  std::string mode = "kernel";
  std::string axis = "context_dim";
  std::vector<slu::Index> grid;
  std::vector<std::string> algorithms;
  slu::KernelOptions kernel;
};

int cmd_bench(const RunFlags& flags, const fs::path& out, BenchFlags b) {
  const slu::ScalingAxis axis = slu::parse_axis(b.axis);
  std::vector<slu::Algorithm> algs;
  for (const auto& a : b.algorithms) algs.push_back(slu::parse_algorithm(a));
  if (algs.empty()) algs = {slu::Algorithm::psi, slu::Algorithm::sherman};
  slu::ScalingReport rep;
  if (b.mode == "kernel") {
    if (b.grid.empty()) {
      b.grid = axis == slu::ScalingAxis::rank ? std::vector<slu::Index>{8, 16, 32, 64, 128}
                                              : std::vector<slu::Index>{512, 1024, 2048, 4096, 8192};
    }
    b.kernel.memory_budget_mb = flags.cfg.memory_budget_mb;
    rep = slu::benchmark_kernel(axis, b.grid, algs, b.kernel);
  } else if (b.mode == "protocol") {
    const slu::RunConfig cfg = flags.resolve();
    if (b.grid.empty()) throw slu::ConfigError("--grid is required in protocol mode");
    const slu::InteractionLog log = slu::load_run_data(cfg);
    rep = slu::benchmark_scaling(axis, b.grid, cfg, algs, log);
  } else {
    throw slu::ConfigError("unknown --mode '" + b.mode + "' (kernel or protocol)");
  }
  fs::create_directories(out);
  write_json(out / "scaling.json", slu::scaling_to_json(rep));
  slu::write_scaling_csv(out / "scaling.csv", rep);
  for (const auto& [alg, slopes] : rep.slopes) {
    std::cout << alg;
    for (const auto& [metric, s] : slopes)
      if (s.points >= 2) std::cout << "  " << metric << " slope " << fmt(s.value, "%.3f");
    std::cout << '\n';
  }
  return kOk;
}

int cmd_synth(const fs::path& out, slu::PlantedLogSpec spec) {
  const slu::InteractionLog log = slu::make_planted_log(spec);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw std::runtime_error("cannot write " + out.string());
  f << "user_id,item_id,rating,timestamp\n";
  for (const auto& r : log.records) {
    f << log.user_keys[static_cast<std::size_t>(r.user)] << ',' << log.item_keys[static_cast<std::size_t>(r.item)]
      << ',' << r.reward << ',' << r.timestamp << '\n';
  }
  log_line("wrote " + std::to_string(log.size()) + " interactions to " + out.string() +
           " (ratings are rewards: use --reward-rule raw)");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scalable LinUCB: low-rank inverse-factor contextual bandits with replay evaluation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key = value file; command-line flags override it");
  RunFlags flags;
  flags.attach(app);

  fs::path out = "out";
  auto add_out = [&](CLI::App* sub, const char* what) { sub->add_option("-o,--out", out, what)->capture_default_str(); };

  auto* prepare = app.add_subcommand("prepare", "load the log, split it and fit warm-up features");
  add_out(prepare, "output directory");

  auto* train = app.add_subcommand("train", "train on the warm-up (and optionally early periods); save a snapshot");
  std::optional<fs::path> features;
  std::size_t through = 0;
  add_out(train, "snapshot directory");
  train->add_option("--features", features, "features from `prepare` (directory or features.bin)");
  train->add_option("--through", through, "also absorb periods 1..N")->capture_default_str();

  auto* evaluate = app.add_subcommand("evaluate", "hit rate of a saved snapshot on one period");
  fs::path model_dir;
  std::optional<std::size_t> period;
  std::optional<fs::path> eval_out;
  evaluate->add_option("--model", model_dir, "snapshot directory from `train` or `run`")->required();
  evaluate->add_option("--period", period, "1-based period; default: the first one not yet absorbed");
  evaluate->add_option("-o,--out", eval_out, "also write evaluation.json here");

  auto* run = app.add_subcommand("run", "full protocol: warm-up, then evaluate and absorb each period");
  bool no_snapshot = false;
  add_out(run, "report directory");
  run->add_flag("--no-snapshot", no_snapshot, "skip saving the final model");

  auto* bench = app.add_subcommand("bench", "time and memory scaling sweeps with log-log slopes");
  BenchFlags bf;
  add_out(bench, "report directory");
  bench->add_option("--mode", bf.mode, "kernel (single arm, synthetic) | protocol (full replay on --data)")
      ->capture_default_str();
  bench->add_option("--axis", bf.axis, "context_dim | n_arms | rank")->capture_default_str();
  bench->add_option("--grid", bf.grid, "ascending axis values (kernel: d or r; protocol: r', arm count or r)");
  bench->add_option("--algorithms", bf.algorithms, "subset of psi exact sherman");
  bench->add_option("--repetitions", bf.kernel.repetitions)->capture_default_str();
  bench->add_option("--fixed-dim", bf.kernel.fixed_dim, "d when sweeping rank")->capture_default_str();
  bench->add_option("--fixed-rank", bf.kernel.fixed_rank, "r when sweeping d")->capture_default_str();
  bench->add_option("--batch-per-rank", bf.kernel.batch_per_rank, "B = this * r")->capture_default_str();

  auto* grid = app.add_subcommand("gridsearch", "alpha x rank search validated on the first online period");
  std::string stage = "both";
  std::vector<double> alphas;
  std::vector<slu::Index> ranks;
  std::size_t jobs = 1;
  add_out(grid, "report directory");
  grid->add_option("--stage", stage, "default alpha grid: broad | refined | both")->capture_default_str();
  grid->add_option("--alphas", alphas, "explicit alpha grid");
  grid->add_option("--ranks", ranks, "explicit rank grid");
  grid->add_option("--jobs", jobs, "ranks trained in parallel")->capture_default_str();

  auto* synth = app.add_subcommand("synth", "write a planted synthetic log as csv");
  slu::PlantedLogSpec spec;
  fs::path synth_out = "synthetic.csv";
  synth->add_option("-o,--out", synth_out)->capture_default_str();
  synth->add_option("--users", spec.n_users)->capture_default_str();
  synth->add_option("--items", spec.n_items)->capture_default_str();
  synth->add_option("--interactions", spec.n_interactions)->capture_default_str();
  synth->add_option("--latent", spec.latent_dim)->capture_default_str();
  synth->add_option("--temperature", spec.temperature)->capture_default_str();
  synth->add_option("--data-seed", spec.seed)->capture_default_str();

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*prepare) return cmd_prepare(flags, out);
    if (*train) return cmd_train(flags, out, features, through);
    if (*evaluate) return cmd_evaluate(flags, model_dir, period, eval_out);
    if (*run) return cmd_run(flags, out, !no_snapshot);
    if (*bench) return cmd_bench(flags, out, bf);
    if (*grid) return cmd_gridsearch(flags, out, stage, alphas, ranks, jobs);
    if (*synth) return cmd_synth(synth_out, spec);
  } catch (const slu::ProtocolError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.data_error() ? kData : kRuntime;
  } catch (const slu::DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const slu::ColdEntity& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kRuntime;
}

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include <sys/utsname.h>
#include <unistd.h>

#include <Eigen/Core>

#include "json.hpp"
#include "scalable_linucb/bandit_core.hpp"
#include "scalable_linucb/feature_pipeline.hpp"

namespace scalable_linucb {

using ordered_json = nlohmann::ordered_json;

/// Invalid run configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Algorithm { psi, exact, sherman };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::psi: return "psi";
    case Algorithm::exact: return "exact";
    case Algorithm::sherman: return "sherman";
  }
  return "psi";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "psi") return Algorithm::psi;
  if (s == "exact") return Algorithm::exact;
  if (s == "sherman") return Algorithm::sherman;
  throw ConfigError("unknown algorithm '" + s + "' (expected psi, exact or sherman)");
}

inline std::string to_string(RewardRule r) {
  switch (r) {
    case RewardRule::threshold: return "threshold";
    case RewardRule::implicit: return "implicit";
    case RewardRule::raw: return "raw";
  }
  return "threshold";
}

inline RewardRule parse_reward_rule(const std::string& s) {
  if (s == "threshold") return RewardRule::threshold;
  if (s == "implicit") return RewardRule::implicit;
  if (s == "raw") return RewardRule::raw;
  throw ConfigError("unknown reward rule '" + s + "'");
}

struct RunConfig {
  std::string data_path;
  CsvSchema schema;
  Algorithm algorithm = Algorithm::psi;
  double eps = 1.0;
  double alpha = 0.0;
  Index rank_cap = 32;
  Index r_prime = 13;
  double warmup_fraction = 0.8;
  std::size_t n_periods = kDefaultPeriods;
  Index top_k = 10;
  std::size_t n_candidates = 0;  // most frequent warm-up items; 0 keeps all
  std::size_t batch_size = 0;    // interactions per training batch; 0 = whole split
  std::string output_dir;
  std::uint64_t seed = SvdOptions{}.seed;
  double memory_budget_mb = 0.0;  // 0: 75% of physical memory
  bool verify_no_peek = true;

  void validate() const {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw ConfigError("eps must be positive");
    if (!std::isfinite(alpha)) throw ConfigError("alpha must be finite");
    if (rank_cap < 1) throw ConfigError("rank must be >= 1");
    if (r_prime < 1) throw ConfigError("r_prime must be >= 1");
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) throw ConfigError("warmup_fraction must lie in (0, 1)");
    if (n_periods < 1) throw ConfigError("periods must be >= 1");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    if (memory_budget_mb < 0.0) throw ConfigError("memory budget must be >= 0");
    if (schema.delimiter.empty()) throw ConfigError("delimiter must not be empty");
  }

  PolicyConfig policy() const {
    PolicyConfig p;
    p.alpha = alpha;
    p.eps = eps;
    p.rank_cap = rank_cap;
    p.top_k = top_k;
    return p;
  }
};

inline ordered_json config_to_json(const RunConfig& c) {
  return {
      {"data", c.data_path},
      {"schema",
       {{"delimiter", c.schema.delimiter},
        {"header", c.schema.has_header},
        {"user_column", c.schema.user_column},
        {"item_column", c.schema.item_column},
        {"rating_column", c.schema.rating_column},
        {"timestamp_column", c.schema.timestamp_column},
        {"reward_rule", to_string(c.schema.reward_rule)},
        {"rating_threshold", c.schema.rating_threshold}}},
      {"algorithm", to_string(c.algorithm)},
      {"eps", c.eps},
      {"alpha", c.alpha},
      {"rank", c.rank_cap},
      {"r_prime", c.r_prime},
      {"warmup_fraction", c.warmup_fraction},
      {"periods", c.n_periods},
      {"top_k", c.top_k},
      {"candidates", c.n_candidates},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"memory_budget_mb", c.memory_budget_mb},
      {"verify_no_peek", c.verify_no_peek},
  };
}

template <class Json>
RunConfig config_from_json(const Json& j) {
  RunConfig c;
  c.data_path = j.at("data").template get<std::string>();
  const auto& s = j.at("schema");
  c.schema.delimiter = s.at("delimiter").template get<std::string>();
  c.schema.has_header = s.at("header").template get<bool>();
  c.schema.user_column = s.at("user_column").template get<std::string>();
  c.schema.item_column = s.at("item_column").template get<std::string>();
  c.schema.rating_column = s.at("rating_column").template get<std::string>();
  c.schema.timestamp_column = s.at("timestamp_column").template get<std::string>();
  c.schema.reward_rule = parse_reward_rule(s.at("reward_rule").template get<std::string>());
  c.schema.rating_threshold = s.at("rating_threshold").template get<double>();
  c.algorithm = parse_algorithm(j.at("algorithm").template get<std::string>());
  c.eps = j.at("eps").template get<double>();
  c.alpha = j.at("alpha").template get<double>();
  c.rank_cap = j.at("rank").template get<Index>();
  c.r_prime = j.at("r_prime").template get<Index>();
  c.warmup_fraction = j.at("warmup_fraction").template get<double>();
  c.n_periods = j.at("periods").template get<std::size_t>();
  c.top_k = j.at("top_k").template get<Index>();
  c.n_candidates = j.at("candidates").template get<std::size_t>();
  c.batch_size = j.at("batch_size").template get<std::size_t>();
  c.seed = j.at("seed").template get<std::uint64_t>();
  c.memory_budget_mb = j.at("memory_budget_mb").template get<double>();
  c.verify_no_peek = j.at("verify_no_peek").template get<bool>();
  return c;
}

namespace detail {

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\t') {
      out += "\\t";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

}  // namespace detail

/// Key-value config readable by the command-line tool.
inline void write_config_file(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "data = " << detail::quote(c.data_path) << '\n'
      << "delimiter = " << detail::quote(c.schema.delimiter) << '\n'
      << "header = " << (c.schema.has_header ? "true" : "false") << '\n'
      << "user-col = " << detail::quote(c.schema.user_column) << '\n'
      << "item-col = " << detail::quote(c.schema.item_column) << '\n'
      << "rating-col = " << detail::quote(c.schema.rating_column) << '\n'
      << "time-col = " << detail::quote(c.schema.timestamp_column) << '\n'
      << "reward-rule = " << detail::quote(to_string(c.schema.reward_rule)) << '\n'
      << "rating-threshold = " << c.schema.rating_threshold << '\n'
      << "algorithm = " << detail::quote(to_string(c.algorithm)) << '\n'
      << "eps = " << c.eps << '\n'
      << "alpha = " << c.alpha << '\n'
      << "rank = " << c.rank_cap << '\n'
      << "r-prime = " << c.r_prime << '\n'
      << "warmup-fraction = " << c.warmup_fraction << '\n'
      << "periods = " << c.n_periods << '\n'
      << "top-k = " << c.top_k << '\n'
      << "candidates = " << c.n_candidates << '\n'
      << "batch-size = " << c.batch_size << '\n'
      << "seed = " << c.seed << '\n'
      << "memory-budget-mb = " << c.memory_budget_mb << '\n';
}

// Process measurements ----------------------------------------------------

/// Resets the kernel's peak-RSS counter; false where unsupported.
inline bool reset_peak_rss() {
  std::ofstream f("/proc/self/clear_refs");
  if (!f) return false;
  f << "5";
  f.flush();
  return static_cast<bool>(f);
}

inline double status_field_mb(const char* key) {
  std::ifstream f("/proc/self/status");
  std::string line;
  const std::string prefix = std::string(key) + ":";
  while (std::getline(f, line)) {
    if (line.rfind(prefix, 0) == 0) return std::stod(line.substr(prefix.size())) / 1024.0;
  }
  return 0.0;
}

inline double peak_rss_mb() { return status_field_mb("VmHWM"); }
inline double current_rss_mb() { return status_field_mb("VmRSS"); }

inline double physical_memory_mb() {
  const long pages = sysconf(_SC_PHYS_PAGES);
  const long page = sysconf(_SC_PAGE_SIZE);
  if (pages <= 0 || page <= 0) return 0.0;
  return static_cast<double>(pages) * static_cast<double>(page) / (1024.0 * 1024.0);
}

inline double effective_budget_mb(double configured) {
  return configured > 0.0 ? configured : 0.75 * physical_memory_mb();
}

inline ordered_json environment_fingerprint() {
  ordered_json env;
  utsname u{};
  if (uname(&u) == 0) {
    env["system"] = u.sysname;
    env["release"] = u.release;
    env["machine"] = u.machine;
  }
  env["hardware_threads"] = std::thread::hardware_concurrency();
  env["physical_memory_mb"] = physical_memory_mb();
#if defined(__clang__)
  env["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  env["compiler"] = std::string("gcc ") + __VERSION__;
#endif
  env["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
#ifdef NDEBUG
  env["assertions"] = false;
#else
  env["assertions"] = true;
#endif
  return env;
}

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

// Experiment preparation ----------------------------------------------------

/// Everything derived from the log before any bandit training: the split,
/// the warm-up features and the candidate arm set.
struct Experiment {
  InteractionLog log;
  ProtocolSplit split;
  FeatureModel features;
  std::vector<ArmId> candidates;          // ascending id
  std::vector<std::uint8_t> is_candidate;  // by item id
  double svd_seconds = 0.0;

  Index context_dim() const { return features.context_dim(); }
};

/// Warm items ranked by warm-up frequency (ties: lower id first), cut to
/// `cap` when nonzero; returned in ascending id order.
inline std::vector<ArmId> most_frequent_items(const InteractionLog& log, IndexRange warmup, std::size_t cap) {
  std::vector<std::size_t> counts(static_cast<std::size_t>(log.n_items()), 0);
  for (const Interaction& r : slice(log, warmup)) ++counts[static_cast<std::size_t>(r.item)];
  std::vector<ArmId> items;
  for (std::size_t i = 0; i < counts.size(); ++i)
    if (counts[i] > 0) items.push_back(static_cast<ArmId>(i));
  if (cap > 0 && cap < items.size()) {
    std::stable_sort(items.begin(), items.end(), [&](ArmId a, ArmId b) {
      return counts[static_cast<std::size_t>(a)] > counts[static_cast<std::size_t>(b)];
    });
    items.resize(cap);
    std::sort(items.begin(), items.end());
  }
  return items;
}

namespace detail {

inline Experiment finish_experiment(Experiment exp, InteractionLog log, const RunConfig& config) {
  exp.candidates = most_frequent_items(log, exp.split.warmup, config.n_candidates);
  exp.is_candidate.assign(static_cast<std::size_t>(log.n_items()), 0);
  for (ArmId a : exp.candidates) exp.is_candidate[static_cast<std::size_t>(a)] = 1;
  exp.log = std::move(log);
  return exp;
}

}  // namespace detail

inline Experiment prepare_experiment(InteractionLog log, const RunConfig& config) {
  config.validate();
  Experiment exp;
  exp.split = split_protocol(log.size(), config.warmup_fraction, config.n_periods);
  SvdOptions opts;
  opts.seed = config.seed;
  const Stopwatch sw;
  exp.features = fit_svd(log, slice(log, exp.split.warmup), config.r_prime, opts);
  exp.svd_seconds = sw.seconds();
  return detail::finish_experiment(std::move(exp), std::move(log), config);
}

/// Same, with features fitted earlier on this log (a saved snapshot).
inline Experiment prepare_experiment(InteractionLog log, const RunConfig& config, FeatureModel features) {
  config.validate();
  if (features.user_factors.rows() != log.n_users() || features.item_factors.rows() != log.n_items()) {
    throw DataError("feature model does not match the log (" + std::to_string(features.user_factors.rows()) +
                    " users, " + std::to_string(features.item_factors.rows()) + " items in features; " +
                    std::to_string(log.n_users()) + ", " + std::to_string(log.n_items()) + " in log)");
  }
  Experiment exp;
  exp.split = split_protocol(log.size(), config.warmup_fraction, config.n_periods);
  exp.features = std::move(features);
  return detail::finish_experiment(std::move(exp), std::move(log), config);
}

inline bool eligible(const Experiment& exp, const Interaction& r) {
  return exp.features.user_is_warm(r.user) && exp.is_candidate[static_cast<std::size_t>(r.item)] != 0;
}

/// Training observations of a split: warm users on candidate items, in log order.
inline std::vector<Observation> training_observations(const Experiment& exp, IndexRange range) {
  std::vector<Observation> out;
  for (const Interaction& r : slice(exp.log, range))
    if (eligible(exp, r)) out.push_back({r.item, r.user, r.reward});
  return out;
}

/// Evaluation targets of a split: eligible interactions with positive reward.
inline std::vector<Interaction> evaluation_targets(const Experiment& exp, IndexRange range) {
  std::vector<Interaction> out;
  for (const Interaction& r : slice(exp.log, range))
    if (eligible(exp, r) && r.reward > 0.0) out.push_back(r);
  return out;
}

template <BanditArm Arm>
std::size_t train_split(BanditModel<Arm>& model, const Experiment& exp, IndexRange range, std::size_t batch_size) {
  const std::vector<Observation> obs = training_observations(exp, range);
  auto context_of = [&](std::int64_t user, ArmId item) { return build_context(exp.features, user, item); };
  const std::size_t step = batch_size == 0 ? std::max<std::size_t>(obs.size(), 1) : batch_size;
  for (std::size_t start = 0; start < obs.size(); start += step) {
    const std::size_t n = std::min(step, obs.size() - start);
    train(model, std::span<const Observation>(obs).subspan(start, n), context_of);
  }
  return obs.size();
}

// Hit rate ----------------------------------------------------------------

struct HitRate {
  std::optional<double> value;  // absent for an empty period
  std::size_t hits = 0;
  std::size_t total = 0;
  std::size_t users = 0;
};

/// Fraction of targets whose item is in the model's top-k list over the
/// candidates for that user. Lists are computed once per user.
template <BanditArm Arm>
HitRate hit_rate(const BanditModel<Arm>& model, const FeatureModel& features, std::span<const ArmId> candidates,
                 std::span<const Interaction> targets, double alpha, std::size_t k) {
  HitRate out;
  if (candidates.empty()) throw std::invalid_argument("hit_rate: empty candidate set");
  std::unordered_map<std::int64_t, std::vector<ArmId>> lists;
  std::vector<VectorXd> contexts(candidates.size());
  for (const Interaction& t : targets) {
    auto it = lists.find(t.user);
    if (it == lists.end()) {
      for (std::size_t i = 0; i < candidates.size(); ++i) contexts[i] = build_context(features, t.user, candidates[i]);
      RankedArms ranked = top_k(model, candidates, std::span<const VectorXd>(contexts), alpha, k);
      std::sort(ranked.arms.begin(), ranked.arms.end());
      it = lists.emplace(t.user, std::move(ranked.arms)).first;
    }
    if (std::binary_search(it->second.begin(), it->second.end(), t.item)) ++out.hits;
    ++out.total;
  }
  out.users = lists.size();
  if (out.total > 0) out.value = static_cast<double>(out.hits) / static_cast<double>(out.total);
  return out;
}

// Protocol run ------------------------------------------------------------

struct PhaseStats {
  std::size_t n_train = 0;
  double train_seconds = 0.0;
  double train_peak_mb = 0.0;
};

struct PeriodResult {
  std::size_t index = 0;
  std::size_t n_train = 0;
  std::size_t n_eval = 0;
  std::size_t hits = 0;
  std::size_t eval_users = 0;
  std::optional<double> hit_rate;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
  double train_peak_mb = 0.0;
  double eval_peak_mb = 0.0;
  std::uint64_t hash_before_eval = 0;
  std::uint64_t hash_after_eval = 0;
  std::uint64_t hash_after_train = 0;
};

inline constexpr int kReportSchemaVersion = 1;

struct EvalReport {
  bool complete = false;
  std::string error;
  RunConfig config;
  std::size_t n_records = 0;
  Index n_users = 0;
  Index n_items = 0;
  Index r_prime = 0;
  Index context_dim = 0;
  std::size_t n_candidates = 0;
  double svd_seconds = 0.0;
  PhaseStats warmup;
  std::vector<PeriodResult> periods;
  std::size_t model_state_bytes = 0;
  std::uint64_t final_state_hash = 0;
  ordered_json environment;

  std::optional<double> mean_hit_rate() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& p : periods) {
      if (p.hit_rate) {
        sum += *p.hit_rate;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

/// Thrown when a protocol phase fails; carries the report filled so far.
class ProtocolError : public std::runtime_error {
 public:
  ProtocolError(const std::string& phase, const std::string& what, EvalReport partial, bool data_error)
      : std::runtime_error(phase + ": " + what), partial_(std::move(partial)), data_error_(data_error) {}
  const EvalReport& partial() const { return partial_; }
  bool data_error() const { return data_error_; }

 private:
  EvalReport partial_;
  bool data_error_;
};

/// Evaluation read the model's state; a changed hash means it absorbed data.
class PeekViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <BanditArm Arm>
struct ProtocolRun {
  EvalReport report;
  BanditModel<Arm> model;
};

/// Warm-up training, then for each period: evaluate with the current model,
/// then absorb the period.
template <BanditArm Arm>
ProtocolRun<Arm> run_protocol_with(BanditModel<Arm> model, const Experiment& exp, const RunConfig& config) {
  EvalReport report;
  report.config = config;
  report.n_records = exp.log.size();
  report.n_users = exp.log.n_users();
  report.n_items = exp.log.n_items();
  report.r_prime = exp.features.r_prime();
  report.context_dim = exp.context_dim();
  report.n_candidates = exp.candidates.size();
  report.svd_seconds = exp.svd_seconds;
  report.environment = environment_fingerprint();

  std::string phase = "warm-up training";
  try {
    reset_peak_rss();
    Stopwatch sw;
    report.warmup.n_train = train_split(model, exp, exp.split.warmup, config.batch_size);
    report.warmup.train_seconds = sw.seconds();
    report.warmup.train_peak_mb = peak_rss_mb();

    const auto k = static_cast<std::size_t>(config.top_k);
    for (std::size_t p = 0; p < exp.split.periods.size(); ++p) {
      const IndexRange range = exp.split.periods[p];
      PeriodResult res;
      res.index = p;

      phase = "period " + std::to_string(p + 1) + " evaluation";
      const std::vector<Interaction> targets = evaluation_targets(exp, range);
      if (config.verify_no_peek) res.hash_before_eval = state_hash(model);
      reset_peak_rss();
      sw = Stopwatch();
      const HitRate hr = hit_rate(model, exp.features, exp.candidates, targets, config.alpha, k);
      res.eval_seconds = sw.seconds();
      res.eval_peak_mb = peak_rss_mb();
      res.hit_rate = hr.value;
      res.hits = hr.hits;
      res.n_eval = hr.total;
      res.eval_users = hr.users;
      if (config.verify_no_peek) {
        res.hash_after_eval = state_hash(model);
        if (res.hash_after_eval != res.hash_before_eval) {
          throw PeekViolation("model state changed during evaluation of period " + std::to_string(p + 1));
        }
      }

      phase = "period " + std::to_string(p + 1) + " training";
      reset_peak_rss();
      sw = Stopwatch();
      res.n_train = train_split(model, exp, range, config.batch_size);
      res.train_seconds = sw.seconds();
      res.train_peak_mb = peak_rss_mb();
      if (config.verify_no_peek) res.hash_after_train = state_hash(model);
      report.periods.push_back(res);
    }
  } catch (const DataError& e) {
    throw ProtocolError(phase, e.what(), report, true);
  } catch (const PeekViolation&) {
    throw;
  } catch (const std::exception& e) {
    throw ProtocolError(phase, e.what(), report, false);
  }
  report.model_state_bytes = model.state_bytes();
  report.final_state_hash = state_hash(model);
  report.complete = true;
  return {std::move(report), std::move(model)};
}

/// Runs the configured algorithm; `on_model` (if set) sees the final model.
using ModelVisitor = std::function<void(const std::variant<const BanditModel<ArmState>*,
                                                           const BanditModel<ExactArmState>*>&)>;

inline EvalReport run_protocol(const Experiment& exp, const RunConfig& config, const ModelVisitor& on_model = {}) {
  config.validate();
  const Index d = exp.context_dim();
  if (config.algorithm == Algorithm::psi) {
    auto run = run_protocol_with(make_psi_model(d, config.policy()), exp, config);
    if (on_model) on_model(&run.model);
    return std::move(run.report);
  }
  const ExactMode mode = config.algorithm == Algorithm::exact ? ExactMode::batch_solve : ExactMode::sherman_morrison;
  auto run = run_protocol_with(make_exact_model(d, config.policy(), mode), exp, config);
  if (on_model) on_model(&run.model);
  return std::move(run.report);
}

inline InteractionLog load_run_data(const RunConfig& config) {
  if (config.data_path.empty()) throw ConfigError("no data path given");
  return load_interactions(config.data_path, config.schema);
}

// Report emission ----------------------------------------------------------

namespace detail {

inline ordered_json optional_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

inline std::optional<double> optional_from(const ordered_json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xf];
  return s;
}

inline std::uint64_t parse_hex64(const std::string& s) { return std::stoull(s, nullptr, 16); }

}  // namespace detail

inline ordered_json report_to_json(const EvalReport& r) {
  ordered_json periods = ordered_json::array();
  for (const auto& p : r.periods) {
    periods.push_back({
        {"period", p.index + 1},
        {"n_train", p.n_train},
        {"n_eval", p.n_eval},
        {"hits", p.hits},
        {"eval_users", p.eval_users},
        {"hit_rate", detail::optional_json(p.hit_rate)},
        {"train_seconds", p.train_seconds},
        {"eval_seconds", p.eval_seconds},
        {"train_peak_mb", p.train_peak_mb},
        {"eval_peak_mb", p.eval_peak_mb},
        {"state_hash_before_eval", detail::hex64(p.hash_before_eval)},
        {"state_hash_after_eval", detail::hex64(p.hash_after_eval)},
        {"state_hash_after_train", detail::hex64(p.hash_after_train)},
    });
  }
  return {
      {"schema_version", kReportSchemaVersion},
      {"complete", r.complete},
      {"error", r.error},
      {"algorithm", to_string(r.config.algorithm)},
      {"data", {{"records", r.n_records}, {"users", r.n_users}, {"items", r.n_items}}},
      {"features", {{"r_prime", r.r_prime}, {"context_dim", r.context_dim}, {"svd_seconds", r.svd_seconds}}},
      {"candidates", r.n_candidates},
      {"warmup",
       {{"n_train", r.warmup.n_train},
        {"train_seconds", r.warmup.train_seconds},
        {"train_peak_mb", r.warmup.train_peak_mb}}},
      {"periods", periods},
      {"mean_hit_rate", detail::optional_json(r.mean_hit_rate())},
      {"model_state_bytes", r.model_state_bytes},
      {"final_state_hash", detail::hex64(r.final_state_hash)},
      {"config", config_to_json(r.config)},
      {"environment", r.environment},
  };
}

inline EvalReport report_from_json(const ordered_json& j) {
  if (j.at("schema_version").get<int>() != kReportSchemaVersion) throw DataError("report: unsupported schema version");
  EvalReport r;
  r.complete = j.at("complete").get<bool>();
  r.error = j.at("error").get<std::string>();
  r.config = config_from_json(j.at("config"));
  r.n_records = j.at("data").at("records").get<std::size_t>();
  r.n_users = j.at("data").at("users").get<Index>();
  r.n_items = j.at("data").at("items").get<Index>();
  r.r_prime = j.at("features").at("r_prime").get<Index>();
  r.context_dim = j.at("features").at("context_dim").get<Index>();
  r.svd_seconds = j.at("features").at("svd_seconds").get<double>();
  r.n_candidates = j.at("candidates").get<std::size_t>();
  r.warmup.n_train = j.at("warmup").at("n_train").get<std::size_t>();
  r.warmup.train_seconds = j.at("warmup").at("train_seconds").get<double>();
  r.warmup.train_peak_mb = j.at("warmup").at("train_peak_mb").get<double>();
  for (const auto& p : j.at("periods")) {
    PeriodResult res;
    res.index = p.at("period").get<std::size_t>() - 1;
    res.n_train = p.at("n_train").get<std::size_t>();
    res.n_eval = p.at("n_eval").get<std::size_t>();
    res.hits = p.at("hits").get<std::size_t>();
    res.eval_users = p.at("eval_users").get<std::size_t>();
    res.hit_rate = detail::optional_from(p.at("hit_rate"));
    res.train_seconds = p.at("train_seconds").get<double>();
    res.eval_seconds = p.at("eval_seconds").get<double>();
    res.train_peak_mb = p.at("train_peak_mb").get<double>();
    res.eval_peak_mb = p.at("eval_peak_mb").get<double>();
    res.hash_before_eval = detail::parse_hex64(p.at("state_hash_before_eval").get<std::string>());
    res.hash_after_eval = detail::parse_hex64(p.at("state_hash_after_eval").get<std::string>());
    res.hash_after_train = detail::parse_hex64(p.at("state_hash_after_train").get<std::string>());
    r.periods.push_back(res);
  }
  r.model_state_bytes = j.at("model_state_bytes").get<std::size_t>();
  r.final_state_hash = detail::parse_hex64(j.at("final_state_hash").get<std::string>());
  r.environment = j.at("environment");
  return r;
}

inline void write_report_json(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << report_to_json(r).dump(2) << '\n';
}

inline EvalReport read_report_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return report_from_json(ordered_json::parse(in));
}

inline void write_periods_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "period,n_train,n_eval,hits,hit_rate,train_seconds,eval_seconds,train_peak_mb,eval_peak_mb,"
         "state_hash_after_train\n";
  for (const auto& p : r.periods) {
    out << p.index + 1 << ',' << p.n_train << ',' << p.n_eval << ',' << p.hits << ',';
    if (p.hit_rate) out << *p.hit_rate;
    out << ',' << p.train_seconds << ',' << p.eval_seconds << ',' << p.train_peak_mb << ',' << p.eval_peak_mb << ','
        << detail::hex64(p.hash_after_train) << '\n';
  }
}

/// report.json and periods.csv under `dir`.
inline void emit_report(const std::filesystem::path& dir, const EvalReport& r) {
  std::filesystem::create_directories(dir);
  write_report_json(dir / "report.json", r);
  write_periods_csv(dir / "periods.csv", r);
}

// Grid search --------------------------------------------------------------

inline std::vector<double> default_alpha_grid_broad() { return {-10, -8, -6, -4, -2, 0, 2, 4, 6, 8, 10}; }
inline std::vector<double> default_alpha_grid_refined() {
  return {-0.1, -1, -0.5, -0.3, -0.2, -0.05, -0.03, -0.01, 0.1};
}
inline std::vector<Index> default_rank_grid() {
  std::vector<Index> ranks;
  for (Index b : {2, 3})
    for (Index i = 1; i <= 5; ++i) ranks.push_back(b << i);
  std::sort(ranks.begin(), ranks.end());
  return ranks;
}

struct GridCell {
  Index rank = 0;
  double alpha = 0.0;
  std::optional<double> hit_rate;
  std::size_t n_eval = 0;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

struct GridResult {
  std::vector<GridCell> cells;
  GridCell best;
  RunConfig best_config;
};

/// Highest validation hit rate; ties go to smaller |α|, then smaller rank,
/// then smaller α.
inline bool better_cell(const GridCell& a, const GridCell& b) {
  const double ha = a.hit_rate.value_or(-1.0);
  const double hb = b.hit_rate.value_or(-1.0);
  if (ha != hb) return ha > hb;
  if (std::abs(a.alpha) != std::abs(b.alpha)) return std::abs(a.alpha) < std::abs(b.alpha);
  if (a.rank != b.rank) return a.rank < b.rank;
  return a.alpha < b.alpha;
}

namespace detail {

template <BanditArm Arm>
void grid_for_model(BanditModel<Arm> model, const Experiment& exp, const RunConfig& config, Index rank,
                    std::span<const double> alphas, std::vector<GridCell>& cells) {
  Stopwatch sw;
  train_split(model, exp, exp.split.warmup, config.batch_size);
  const double train_seconds = sw.seconds();
  const std::vector<Interaction> targets = evaluation_targets(exp, exp.split.periods.front());
  for (double alpha : alphas) {
    sw = Stopwatch();
    const HitRate hr =
        hit_rate(model, exp.features, exp.candidates, targets, alpha, static_cast<std::size_t>(config.top_k));
    GridCell cell;
    cell.rank = rank;
    cell.alpha = alpha;
    cell.hit_rate = hr.value;
    cell.n_eval = hr.total;
    cell.train_seconds = train_seconds;
    cell.eval_seconds = sw.seconds();
    cells.push_back(cell);
  }
}

}  // namespace detail

/// Trains on the warm-up once per rank and scores every α on the first
/// online period. Exact algorithms ignore the rank grid. Ranks run on up to
/// `jobs` threads; cell order does not depend on it.
inline GridResult grid_search(const Experiment& exp, const RunConfig& config, std::span<const double> alphas,
                              std::span<const Index> ranks, std::size_t jobs = 1) {
  config.validate();
  if (alphas.empty() || ranks.empty()) throw ConfigError("grid_search: grids must be nonempty");
  if (jobs < 1) throw ConfigError("grid_search: jobs must be >= 1");
  GridResult out;
  const Index d = exp.context_dim();
  if (config.algorithm == Algorithm::psi) {
    for (Index rank : ranks)
      if (rank < 1) throw ConfigError("rank must be >= 1");
    std::vector<std::vector<GridCell>> per_rank(ranks.size());
    std::vector<std::exception_ptr> errors(ranks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t i = next++; i < ranks.size(); i = next++) {
        try {
          RunConfig c = config;
          c.rank_cap = ranks[i];
          detail::grid_for_model(make_psi_model(d, c.policy()), exp, c, ranks[i], alphas, per_rank[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < std::min(jobs, ranks.size()); ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    for (const auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (auto& cells : per_rank) out.cells.insert(out.cells.end(), cells.begin(), cells.end());
  } else {
    const ExactMode mode = config.algorithm == Algorithm::exact ? ExactMode::batch_solve : ExactMode::sherman_morrison;
    detail::grid_for_model(make_exact_model(d, config.policy(), mode), exp, config, config.rank_cap, alphas,
                           out.cells);
  }
  out.best = *std::min_element(out.cells.begin(), out.cells.end(), better_cell);
  out.best_config = config;
  out.best_config.alpha = out.best.alpha;
  out.best_config.rank_cap = out.best.rank;
  return out;
}

inline void write_sweep_csv(const std::filesystem::path& path, const GridResult& g) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "rank,alpha,hit_rate,n_eval,train_seconds,eval_seconds\n";
  for (const auto& c : g.cells) {
    out << c.rank << ',' << c.alpha << ',';
    if (c.hit_rate) out << *c.hit_rate;
    out << ',' << c.n_eval << ',' << c.train_seconds << ',' << c.eval_seconds << '\n';
  }
}

// Scaling benchmarks --------------------------------------------------------

enum class ScalingAxis { context_dim, n_arms, rank };

inline std::string to_string(ScalingAxis a) {
  switch (a) {
    case ScalingAxis::context_dim: return "context_dim";
    case ScalingAxis::n_arms: return "n_arms";
    case ScalingAxis::rank: return "rank";
  }
  return "context_dim";
}

inline ScalingAxis parse_axis(const std::string& s) {
  if (s == "context_dim") return ScalingAxis::context_dim;
  if (s == "n_arms") return ScalingAxis::n_arms;
  if (s == "rank") return ScalingAxis::rank;
  throw ConfigError("unknown axis '" + s + "' (expected context_dim, n_arms or rank)");
}

struct ScalingPoint {
  Algorithm algorithm = Algorithm::psi;
  double axis_value = 0.0;  // x used for slopes (d for context_dim)
  Index grid_value = 0;     // r′, arm count or rank as configured
  bool failed = false;
  std::string failure;
  double train_seconds = 0.0;    // warm-up + all periods
  double update_seconds = 0.0;   // per trained interaction
  double eval_seconds = 0.0;     // mean per period
  double peak_mb = 0.0;
  std::size_t state_bytes = 0;
  std::optional<double> hit_rate;
};

struct Slope {
  double value = std::nan("");
  std::size_t points = 0;
};

/// Least-squares slope of log y against log x over positive pairs.
inline Slope loglog_slope(std::span<const double> x, std::span<const double> y) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < x.size() && i < y.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) continue;
    const double lx = std::log(x[i]);
    const double ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  Slope s;
  s.points = n;
  const double denom = static_cast<double>(n) * sxx - sx * sx;
  if (n >= 2 && denom > 0.0) s.value = (static_cast<double>(n) * sxy - sx * sy) / denom;
  return s;
}

struct ScalingReport {
  ScalingAxis axis = ScalingAxis::context_dim;
  std::vector<ScalingPoint> points;
  // per algorithm: metric → slope
  std::map<std::string, std::map<std::string, Slope>> slopes;
};

inline std::size_t estimated_state_bytes(Algorithm a, Index d, Index rank, std::size_t arms) {
  const auto dd = static_cast<std::size_t>(d);
  const std::size_t per_arm =
      a == Algorithm::psi ? (2 * dd * static_cast<std::size_t>(std::min(rank, d)) + 2 * dd) * 8 : (dd * dd + 2 * dd) * 8;
  return per_arm * arms;
}

namespace detail {

inline void fit_slopes(ScalingReport& rep) {
  std::map<std::string, std::vector<const ScalingPoint*>> by_alg;
  for (const auto& p : rep.points)
    if (!p.failed) by_alg[to_string(p.algorithm)].push_back(&p);
  for (const auto& [alg, pts] : by_alg) {
    auto slope_of = [&](auto field) {
      std::vector<double> x, y;
      for (const ScalingPoint* p : pts) {
        x.push_back(p->axis_value);
        y.push_back(field(*p));
      }
      return loglog_slope(x, y);
    };
    rep.slopes[alg]["state_bytes"] = slope_of([](const ScalingPoint& p) { return double(p.state_bytes); });
    rep.slopes[alg]["update_seconds"] = slope_of([](const ScalingPoint& p) { return p.update_seconds; });
    rep.slopes[alg]["train_seconds"] = slope_of([](const ScalingPoint& p) { return p.train_seconds; });
    rep.slopes[alg]["eval_seconds"] = slope_of([](const ScalingPoint& p) { return p.eval_seconds; });
    rep.slopes[alg]["peak_mb"] = slope_of([](const ScalingPoint& p) { return p.peak_mb; });
  }
}

}  // namespace detail

/// Full-protocol sweep over one axis for each algorithm. Grid points whose
/// estimated model state exceeds the memory budget are recorded as failed.
inline ScalingReport benchmark_scaling(ScalingAxis axis, std::span<const Index> grid, const RunConfig& base,
                                       std::span<const Algorithm> algorithms, const InteractionLog& log) {
  if (grid.empty()) throw ConfigError("benchmark_scaling: empty grid");
  if (!std::is_sorted(grid.begin(), grid.end())) throw ConfigError("benchmark_scaling: grid must be ascending");
  ScalingReport rep;
  rep.axis = axis;
  const double budget = effective_budget_mb(base.memory_budget_mb);
  std::optional<Experiment> shared;
  for (Index g : grid) {
    RunConfig cfg = base;
    cfg.verify_no_peek = false;
    if (axis == ScalingAxis::context_dim) cfg.r_prime = g;
    if (axis == ScalingAxis::n_arms) cfg.n_candidates = static_cast<std::size_t>(g);
    if (axis == ScalingAxis::rank) cfg.rank_cap = g;
    std::optional<Experiment> local;
    const Experiment* exp = nullptr;
    if (axis == ScalingAxis::context_dim || axis == ScalingAxis::n_arms) {
      local = prepare_experiment(log, cfg);
      exp = &*local;
    } else {
      if (!shared) shared = prepare_experiment(log, cfg);
      exp = &*shared;
    }
    for (Algorithm alg : algorithms) {
      cfg.algorithm = alg;
      ScalingPoint pt;
      pt.algorithm = alg;
      pt.grid_value = g;
      pt.axis_value = axis == ScalingAxis::context_dim ? static_cast<double>(exp->context_dim())
                      : axis == ScalingAxis::n_arms    ? static_cast<double>(exp->candidates.size())
                                                       : static_cast<double>(g);
      const std::size_t estimate =
          estimated_state_bytes(alg, exp->context_dim(), cfg.rank_cap, exp->candidates.size());
      if (static_cast<double>(estimate) / (1024.0 * 1024.0) > budget) {
        pt.failed = true;
        pt.failure = "estimated model state exceeds memory budget";
        rep.points.push_back(pt);
        continue;
      }
      try {
        const EvalReport r = run_protocol(*exp, cfg);
        std::size_t trained = r.warmup.n_train;
        pt.train_seconds = r.warmup.train_seconds;
        pt.peak_mb = r.warmup.train_peak_mb;
        double eval = 0.0;
        for (const auto& p : r.periods) {
          trained += p.n_train;
          pt.train_seconds += p.train_seconds;
          eval += p.eval_seconds;
          pt.peak_mb = std::max({pt.peak_mb, p.train_peak_mb, p.eval_peak_mb});
        }
        pt.eval_seconds = eval / static_cast<double>(std::max<std::size_t>(r.periods.size(), 1));
        pt.update_seconds = trained > 0 ? pt.train_seconds / static_cast<double>(trained) : 0.0;
        pt.state_bytes = r.model_state_bytes;
        pt.hit_rate = r.mean_hit_rate();
      } catch (const std::bad_alloc&) {
        pt.failed = true;
        pt.failure = "out of memory";
      }
      rep.points.push_back(pt);
    }
  }
  detail::fit_slopes(rep);
  return rep;
}

/// Single-arm update kernel: one arm, random contexts, batches of B columns
/// absorbed after the factor has reached its rank cap.
struct KernelOptions {
  Index fixed_dim = 4096;   // used when sweeping rank
  Index fixed_rank = 32;    // used when sweeping d
  double batch_per_rank = 1.0;  // B = max(1, round(batch_per_rank · r))
  Index repetitions = 9;
  Index exact_time_max_dim = 2048;  // batch-solve timing is O(d³); skipped beyond
  double memory_budget_mb = 0.0;
  std::uint64_t seed = 7;
};

namespace detail {

inline MatrixXd gaussian(std::mt19937_64& rng, Index rows, Index cols) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
  return m;
}

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

inline ScalingReport benchmark_kernel(ScalingAxis axis, std::span<const Index> grid,
                                      std::span<const Algorithm> algorithms, const KernelOptions& opts = {}) {
  if (axis == ScalingAxis::n_arms) throw ConfigError("kernel benchmark sweeps context_dim or rank");
  if (grid.empty()) throw ConfigError("benchmark_kernel: empty grid");
  if (!std::is_sorted(grid.begin(), grid.end())) throw ConfigError("benchmark_kernel: grid must be ascending");
  ScalingReport rep;
  rep.axis = axis;
  const double budget = effective_budget_mb(opts.memory_budget_mb);
  std::mt19937_64 rng(opts.seed);
  for (Index g : grid) {
    const Index d = axis == ScalingAxis::context_dim ? g : opts.fixed_dim;
    const Index r = axis == ScalingAxis::rank ? g : opts.fixed_rank;
    const Index b = std::max<Index>(1, static_cast<Index>(std::lround(opts.batch_per_rank * static_cast<double>(r))));
    for (Algorithm alg : algorithms) {
      ScalingPoint pt;
      pt.algorithm = alg;
      pt.grid_value = g;
      pt.axis_value = static_cast<double>(g);
      const double est_mb = static_cast<double>(estimated_state_bytes(alg, d, r, 1)) / (1024.0 * 1024.0);
      if (est_mb > budget) {
        pt.failed = true;
        pt.failure = "estimated model state exceeds memory budget";
        rep.points.push_back(pt);
        continue;
      }
      try {
        const double rss0 = current_rss_mb();
        reset_peak_rss();
        std::vector<double> per_column;
        if (alg == Algorithm::psi) {
          ArmState arm(d, 1.0, r);
          while (!arm.factor().compressed()) arm.update(detail::gaussian(rng, d, b), VectorXd::Zero(b));
          for (Index rep_i = 0; rep_i < opts.repetitions; ++rep_i) {
            const MatrixXd x = detail::gaussian(rng, d, b);
            const Stopwatch sw;
            arm.update(x, VectorXd::Zero(b));
            per_column.push_back(sw.seconds() / static_cast<double>(b));
          }
          pt.state_bytes = arm.state_bytes();
        } else if (alg == Algorithm::sherman) {
          ExactArmState arm(d, 1.0, ExactMode::sherman_morrison);
          for (Index rep_i = 0; rep_i < opts.repetitions; ++rep_i) {
            const MatrixXd x = detail::gaussian(rng, d, 1);
            const Stopwatch sw;
            arm.update(x, VectorXd::Zero(1));
            per_column.push_back(sw.seconds());
          }
          pt.state_bytes = arm.state_bytes();
        } else {
          ExactArmState arm(d, 1.0, ExactMode::batch_solve);
          if (d <= opts.exact_time_max_dim) {
            for (Index rep_i = 0; rep_i < std::min<Index>(opts.repetitions, 3); ++rep_i) {
              const MatrixXd x = detail::gaussian(rng, d, b);
              const Stopwatch sw;
              arm.update(x, VectorXd::Zero(b));
              per_column.push_back(sw.seconds() / static_cast<double>(b));
            }
          }
          pt.state_bytes = arm.state_bytes();
        }
        pt.update_seconds = per_column.empty() ? 0.0 : detail::median(per_column);
        pt.train_seconds = pt.update_seconds;
        pt.peak_mb = std::max(0.0, peak_rss_mb() - rss0);
      } catch (const std::bad_alloc&) {
        pt.failed = true;
        pt.failure = "out of memory";
      }
      rep.points.push_back(pt);
    }
  }
  detail::fit_slopes(rep);
  return rep;
}

inline ordered_json scaling_to_json(const ScalingReport& rep) {
  ordered_json pts = ordered_json::array();
  for (const auto& p : rep.points) {
    pts.push_back({{"algorithm", to_string(p.algorithm)},
                   {"grid_value", p.grid_value},
                   {"axis_value", p.axis_value},
                   {"failed", p.failed},
                   {"failure", p.failure},
                   {"train_seconds", p.train_seconds},
                   {"update_seconds", p.update_seconds},
                   {"eval_seconds", p.eval_seconds},
                   {"peak_mb", p.peak_mb},
                   {"state_bytes", p.state_bytes},
                   {"hit_rate", detail::optional_json(p.hit_rate)}});
  }
  ordered_json slopes = ordered_json::object();
  for (const auto& [alg, m] : rep.slopes)
    for (const auto& [metric, s] : m)
      slopes[alg][metric] = std::isnan(s.value) ? ordered_json(nullptr) : ordered_json(s.value);
  return {{"schema_version", kReportSchemaVersion}, {"axis", to_string(rep.axis)}, {"points", pts}, {"slopes", slopes}};
}

inline void write_scaling_csv(const std::filesystem::path& path, const ScalingReport& rep) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(10);
  out << "axis,algorithm,grid_value,axis_value,status,train_seconds,update_seconds,eval_seconds,peak_mb,state_bytes,"
         "hit_rate\n";
  for (const auto& p : rep.points) {
    out << to_string(rep.axis) << ',' << to_string(p.algorithm) << ',' << p.grid_value << ',' << p.axis_value << ','
        << (p.failed ? "failed" : "ok") << ',' << p.train_seconds << ',' << p.update_seconds << ',' << p.eval_seconds
        << ',' << p.peak_mb << ',' << p.state_bytes << ',';
    if (p.hit_rate) out << *p.hit_rate;
    out << '\n';
  }
}

}  // namespace scalable_linucb

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <streambuf>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include "json.hpp"
#include "scalable_linucb/lowrank_factor.hpp"

namespace scalable_linucb {

using ArmId = std::int64_t;

struct PolicyConfig {
  double alpha = 0.0;  // negative values penalize uncertainty
  double eps = 1.0;    // ridge parameter is 1/eps
  Index rank_cap = 32;
  Index top_k = 10;

  void validate() const {
    if (!(eps > 0.0) || !std::isfinite(eps)) throw std::invalid_argument("PolicyConfig: eps must be positive");
    if (rank_cap < 1) throw std::invalid_argument("PolicyConfig: rank_cap must be >= 1");
    if (top_k < 1) throw std::invalid_argument("PolicyConfig: top_k must be >= 1");
    if (!std::isfinite(alpha)) throw std::invalid_argument("PolicyConfig: alpha must be finite");
  }
};

namespace detail {

inline void mirror_lower(MatrixXd& m) {
  for (Index j = 1; j < m.cols(); ++j)
    for (Index i = 0; i < j; ++i) m(i, j) = m(j, i);
}

inline void require_batch_shape(Index rows, Index dim, Index cols, Index rewards) {
  if (rows != dim) throw std::invalid_argument("arm update: context length does not match arm dimension");
  if (cols < 1) throw std::invalid_argument("arm update: empty batch");
  if (cols != rewards) throw std::invalid_argument("arm update: reward count does not match batch size");
}

}  // namespace detail

/// Per-arm state of the low-rank policy: inverse-root factor, reward-weighted
/// context sum b and the cached ridge estimate θ = A⁻¹b.
class ArmState {
 public:
  ArmState(Index dim, double eps, Index rank_cap)
      : factor_(dim, eps, rank_cap), b_(VectorXd::Zero(dim)), theta_(VectorXd::Zero(dim)) {}

  const InverseFactor& factor() const { return factor_; }
  const VectorXd& b_vector() const { return b_; }
  const VectorXd& theta() const { return theta_; }
  std::uint64_t n_obs() const { return n_obs_; }
  Index dim() const { return factor_.dim(); }

  /// Absorbs a d×B batch of contexts with their rewards.
  void update(const Eigen::Ref<const MatrixXd>& x_batch, const Eigen::Ref<const VectorXd>& rewards) {
    detail::require_batch_shape(x_batch.rows(), dim(), x_batch.cols(), rewards.size());
    b_.noalias() += x_batch * rewards;
    const Index absorbed = x_batch.cols() == 1 ? factor_.rank1_update(x_batch.col(0))
                                               : factor_.batch_update(x_batch);
    theta_ = factor_.apply_gram_inverse(b_);
    n_obs_ += static_cast<std::uint64_t>(absorbed);
  }

  /// θᵀx + α·√(xᵀA⁻¹x).
  double score(const Eigen::Ref<const VectorXd>& x, double alpha) const {
    detail::require_length(x.size(), dim(), "ucb_score");
    const double exploit = theta_.dot(x);
    if (alpha == 0.0) return exploit;
    return exploit + alpha * factor_.bonus_norm(x);
  }

  std::size_t state_bytes() const {
    return factor_.state_bytes() + static_cast<std::size_t>(b_.size() + theta_.size()) * sizeof(double);
  }

  void write(std::ostream& out) const {
    io::write_pod<std::uint64_t>(out, n_obs_);
    write_factor(out, factor_);
    io::write_doubles(out, b_.data(), b_.size());
    io::write_doubles(out, theta_.data(), theta_.size());
  }

  static ArmState read(std::istream& in) {
    const auto n_obs = io::read_pod<std::uint64_t>(in);
    InverseFactor factor = read_factor(in);
    ArmState arm(factor.dim(), factor.eps(), factor.rank_cap());
    arm.factor_ = std::move(factor);
    arm.n_obs_ = n_obs;
    io::read_doubles(in, arm.b_.data(), arm.b_.size());
    io::read_doubles(in, arm.theta_.data(), arm.theta_.size());
    return arm;
  }

 private:
  InverseFactor factor_;
  VectorXd b_;
  VectorXd theta_;
  std::uint64_t n_obs_ = 0;
};

/// Which dense baseline an ExactArmState runs.
enum class ExactMode : std::uint8_t {
  batch_solve = 0,       // keeps A, solves for θ after every batch
  sherman_morrison = 1,  // keeps A⁻¹ through rank-1 inverse updates
};

/// Dense LinUCB baseline state. In batch_solve mode `gram` is A = λI + ΣxxᵀT,
/// in sherman_morrison mode it is A⁻¹.
class ExactArmState {
 public:
  ExactArmState(Index dim, double eps, ExactMode mode)
      : mode_(mode), eps_(eps), b_(VectorXd::Zero(dim)), theta_(VectorXd::Zero(dim)) {
    if (dim < 1) throw std::invalid_argument("ExactArmState: dimension must be positive");
    if (!(eps > 0.0)) throw std::invalid_argument("ExactArmState: eps must be positive");
    const double diag = mode == ExactMode::batch_solve ? 1.0 / eps : eps;
    gram_ = diag * MatrixXd::Identity(dim, dim);
    if (mode_ == ExactMode::batch_solve) refactor();
  }

  ExactMode mode() const { return mode_; }
  double eps() const { return eps_; }
  Index dim() const { return b_.size(); }
  const MatrixXd& gram() const { return gram_; }
  const VectorXd& b_vector() const { return b_; }
  const VectorXd& theta() const { return theta_; }
  std::uint64_t n_obs() const { return n_obs_; }

  /// A⁻¹, dense. For tests.
  MatrixXd gram_inverse() const {
    if (mode_ == ExactMode::sherman_morrison) return gram_;
    return llt_.solve(MatrixXd::Identity(dim(), dim()));
  }

  void update(const Eigen::Ref<const MatrixXd>& x_batch, const Eigen::Ref<const VectorXd>& rewards) {
    if (mode_ == ExactMode::batch_solve) {
      exact_update(x_batch, rewards);
      return;
    }
    detail::require_batch_shape(x_batch.rows(), dim(), x_batch.cols(), rewards.size());
    for (Index j = 0; j < x_batch.cols(); ++j) sherman_morrison_update(x_batch.col(j), rewards(j));
  }

  /// A += XXᵀ, b += X·r, θ from a Cholesky solve.
  void exact_update(const Eigen::Ref<const MatrixXd>& x_batch, const Eigen::Ref<const VectorXd>& rewards) {
    if (mode_ != ExactMode::batch_solve) throw InvalidState("exact_update: arm keeps an inverse");
    detail::require_batch_shape(x_batch.rows(), dim(), x_batch.cols(), rewards.size());
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(x_batch);
    detail::mirror_lower(gram_);
    b_.noalias() += x_batch * rewards;
    for (Index j = 0; j < x_batch.cols(); ++j) n_obs_ += x_batch.col(j).squaredNorm() > 0.0 ? 1 : 0;
    refactor();
  }

  /// A⁻¹ ← A⁻¹ − (A⁻¹x)(A⁻¹x)ᵀ / (1 + xᵀA⁻¹x).
  void sherman_morrison_update(const Eigen::Ref<const VectorXd>& x, double reward) {
    if (mode_ != ExactMode::sherman_morrison) throw InvalidState("sherman_morrison_update: arm keeps A");
    detail::require_length(x.size(), dim(), "sherman_morrison_update");
    if (x.squaredNorm() == 0.0) return;
    const VectorXd ax = gram_.selfadjointView<Eigen::Lower>() * x;
    const double denom = 1.0 + x.dot(ax);
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(ax, -1.0 / denom);
    detail::mirror_lower(gram_);
    b_.noalias() += reward * x;
    theta_.noalias() = gram_ * b_;
    ++n_obs_;
  }

  double score(const Eigen::Ref<const VectorXd>& x, double alpha) const {
    detail::require_length(x.size(), dim(), "ucb_score");
    const double exploit = theta_.dot(x);
    if (alpha == 0.0) return exploit;
    double quad = 0.0;
    if (mode_ == ExactMode::sherman_morrison) {
      quad = x.dot(gram_ * x);
    } else {
      quad = llt_.matrixL().solve(x).squaredNorm();
    }
    return exploit + alpha * std::sqrt(std::max(quad, 0.0));
  }

  /// Serialized bytes: the d×d matrix plus b and θ.
  std::size_t state_bytes() const {
    return static_cast<std::size_t>(gram_.size() + b_.size() + theta_.size()) * sizeof(double);
  }

  void write(std::ostream& out) const {
    io::write_pod<std::uint64_t>(out, n_obs_);
    io::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(mode_));
    io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(dim()));
    io::write_pod<double>(out, eps_);
    io::write_doubles(out, gram_.data(), gram_.size());
    io::write_doubles(out, b_.data(), b_.size());
    io::write_doubles(out, theta_.data(), theta_.size());
  }

  static ExactArmState read(std::istream& in) {
    const auto n_obs = io::read_pod<std::uint64_t>(in);
    const auto mode = static_cast<ExactMode>(io::read_pod<std::uint8_t>(in));
    const auto dim = static_cast<Index>(io::read_pod<std::uint64_t>(in));
    const double eps = io::read_pod<double>(in);
    if (dim < 1 || dim > (1 << 16)) throw std::runtime_error("ExactArmState: corrupt header");
    ExactArmState arm(dim, eps, mode);
    arm.n_obs_ = n_obs;
    io::read_doubles(in, arm.gram_.data(), arm.gram_.size());
    io::read_doubles(in, arm.b_.data(), arm.b_.size());
    io::read_doubles(in, arm.theta_.data(), arm.theta_.size());
    if (mode == ExactMode::batch_solve) arm.refactor();
    return arm;
  }

 private:
  void refactor() {
    llt_.compute(gram_);
    if (llt_.info() != Eigen::Success) throw std::runtime_error("ExactArmState: design matrix is not SPD");
    theta_ = llt_.solve(b_);
  }

  ExactMode mode_;
  double eps_;
  MatrixXd gram_;
  VectorXd b_;
  VectorXd theta_;
  Eigen::LLT<MatrixXd> llt_;
  std::uint64_t n_obs_ = 0;
};

template <class Arm>
concept BanditArm = requires(Arm arm, const Arm& carm, const MatrixXd& x, const VectorXd& v, std::ostream& out,
                             std::istream& in) {
  arm.update(x, v);
  { carm.score(v, 0.0) } -> std::convertible_to<double>;
  { carm.state_bytes() } -> std::convertible_to<std::size_t>;
  { carm.n_obs() } -> std::convertible_to<std::uint64_t>;
  carm.write(out);
  { Arm::read(in) } -> std::same_as<Arm>;
};

inline void update_arm(ArmState& arm, const Eigen::Ref<const MatrixXd>& x_batch,
                       const Eigen::Ref<const VectorXd>& rewards) {
  arm.update(x_batch, rewards);
}

template <BanditArm Arm>
double ucb_score(const Arm& arm, const Eigen::Ref<const VectorXd>& x, double alpha) {
  return arm.score(x, alpha);
}

/// A collection of per-arm states sharing one dimension and policy config.
/// Arms are created from the prototype on first update; unseen arms score
/// like the prototype (θ = 0, full bonus).
template <BanditArm Arm>
class BanditModel {
 public:
  BanditModel(Arm prototype, PolicyConfig config) : prototype_(std::move(prototype)), config_(config) {
    config_.validate();
  }

  const PolicyConfig& config() const { return config_; }
  Index dim() const { return prototype_.dim(); }
  const std::map<ArmId, Arm>& arms() const { return arms_; }
  const Arm& prototype() const { return prototype_; }

  const Arm* find(ArmId id) const {
    auto it = arms_.find(id);
    return it == arms_.end() ? nullptr : &it->second;
  }

  Arm& arm(ArmId id) {
    auto it = arms_.find(id);
    if (it == arms_.end()) it = arms_.emplace(id, prototype_).first;
    return it->second;
  }

  void insert(ArmId id, Arm state) { arms_.insert_or_assign(id, std::move(state)); }

  double score(ArmId id, const Eigen::Ref<const VectorXd>& x, double alpha) const {
    const Arm* a = find(id);
    return a ? a->score(x, alpha) : prototype_.score(x, alpha);
  }

  std::size_t state_bytes() const {
    std::size_t total = 0;
    for (const auto& [id, a] : arms_) total += a.state_bytes();
    return total;
  }

  /// Arm records in ascending id order: {id: u64, arm record}.
  void write_arms(std::ostream& out) const {
    for (const auto& [id, a] : arms_) {
      io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(id));
      a.write(out);
    }
  }

 private:
  Arm prototype_;
  PolicyConfig config_;
  std::map<ArmId, Arm> arms_;
};

inline BanditModel<ArmState> make_psi_model(Index dim, const PolicyConfig& config) {
  return BanditModel<ArmState>(ArmState(dim, config.eps, config.rank_cap), config);
}

inline BanditModel<ExactArmState> make_exact_model(Index dim, const PolicyConfig& config, ExactMode mode) {
  return BanditModel<ExactArmState>(ExactArmState(dim, config.eps, mode), config);
}

struct RankedArms {
  std::vector<ArmId> arms;
  bool truncated = false;  // fewer candidates than requested
};

/// Orders candidates by descending score, ties by ascending id, and keeps
/// the first k.
inline RankedArms rank_by_score(std::span<const ArmId> ids, std::span<const double> scores, std::size_t k) {
  if (ids.size() != scores.size()) throw std::invalid_argument("rank_by_score: ids and scores differ in size");
  if (k < 1) throw std::invalid_argument("rank_by_score: k must be >= 1");
  std::vector<std::size_t> order(ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  };
  RankedArms out;
  out.truncated = k > ids.size();
  const std::size_t keep = std::min(k, ids.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
  out.arms.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) out.arms.push_back(ids[order[i]]);
  return out;
}

template <BanditArm Arm>
std::vector<double> score_candidates(const BanditModel<Arm>& model, std::span<const ArmId> candidates,
                                     std::span<const VectorXd> contexts, double alpha) {
  if (candidates.size() != contexts.size()) {
    throw std::invalid_argument("score_candidates: every candidate needs a context");
  }
  std::vector<double> scores(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) scores[i] = model.score(candidates[i], contexts[i], alpha);
  return scores;
}

/// argmax of the UCB score, lowest id on ties.
template <BanditArm Arm>
ArmId select_arm(const BanditModel<Arm>& model, std::span<const ArmId> candidates,
                 std::span<const VectorXd> contexts, double alpha) {
  if (candidates.empty()) throw std::invalid_argument("select_arm: empty candidate set");
  const auto scores = score_candidates(model, candidates, contexts, alpha);
  return rank_by_score(candidates, scores, 1).arms.front();
}

template <BanditArm Arm>
RankedArms top_k(const BanditModel<Arm>& model, std::span<const ArmId> candidates, std::span<const VectorXd> contexts,
                 double alpha, std::size_t k) {
  const auto scores = score_candidates(model, candidates, contexts, alpha);
  return rank_by_score(candidates, scores, k);
}

/// One logged interaction: the context is resolved from (user, arm).
struct Observation {
  ArmId arm = 0;
  std::int64_t user = 0;
  double reward = 0.0;
};

/// Groups a batch by arm and applies one update per touched arm; arms not
/// in the batch are left untouched. `context_of(user, arm)` returns the
/// context vector.
template <BanditArm Arm, class ContextFn>
void train(BanditModel<Arm>& model, std::span<const Observation> batch, ContextFn&& context_of) {
  std::map<ArmId, std::vector<std::size_t>> by_arm;
  for (std::size_t i = 0; i < batch.size(); ++i) by_arm[batch[i].arm].push_back(i);
  const Index dim = model.dim();
  for (const auto& [arm_id, rows] : by_arm) {
    MatrixXd x(dim, static_cast<Index>(rows.size()));
    VectorXd r(static_cast<Index>(rows.size()));
    for (std::size_t j = 0; j < rows.size(); ++j) {
      const Observation& obs = batch[rows[j]];
      x.col(static_cast<Index>(j)) = context_of(obs.user, obs.arm);
      r(static_cast<Index>(j)) = obs.reward;
    }
    model.arm(arm_id).update(x, r);
  }
}

template <BanditArm Arm, class ContextFn>
void train(BanditModel<Arm>& model, std::span<const std::vector<Observation>> batches, ContextFn&& context_of) {
  for (const auto& batch : batches) train(model, std::span<const Observation>(batch), context_of);
}

// Snapshots ---------------------------------------------------------------

inline constexpr char kArmsMagic[8] = {'S', 'L', 'U', 'C', 'B', 'A', 'R', 'M'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

template <class Arm>
constexpr const char* arm_kind() {
  if constexpr (std::is_same_v<Arm, ArmState>) return "lowrank";
  else return "dense";
}

template <BanditArm Arm>
void write_arms_file(std::ostream& out, const BanditModel<Arm>& model) {
  out.write(kArmsMagic, sizeof(kArmsMagic));
  io::write_pod<std::uint32_t>(out, kSnapshotVersion);
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(model.arms().size()));
  model.write_arms(out);
}

/// Bytes of the arms file.
template <BanditArm Arm>
std::string serialize_arms(const BanditModel<Arm>& model) {
  std::ostringstream out(std::ios::binary);
  write_arms_file(out, model);
  return out.str();
}

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

namespace detail {

// Hashes whatever is written through it; nothing is stored.
class HashBuf : public std::streambuf {
 public:
  std::uint64_t value() const { return h_; }

 protected:
  std::streamsize xsputn(const char* s, std::streamsize n) override {
    h_ = fnv1a(std::string_view(s, static_cast<std::size_t>(n)), h_);
    return n;
  }
  int_type overflow(int_type c) override {
    if (!traits_type::eq_int_type(c, traits_type::eof())) {
      const char ch = traits_type::to_char_type(c);
      h_ = fnv1a(std::string_view(&ch, 1), h_);
    }
    return traits_type::not_eof(c);
  }

 private:
  std::uint64_t h_ = kFnvOffset;
};

}  // namespace detail

/// FNV-1a of the arms file, computed without materializing it.
template <BanditArm Arm>
std::uint64_t state_hash(const BanditModel<Arm>& model) {
  detail::HashBuf buf;
  std::ostream out(&buf);
  write_arms_file(out, model);
  return buf.value();
}

/// Writes `manifest.json` and `arms.bin` into `dir`.
template <BanditArm Arm>
void save_snapshot(const std::filesystem::path& dir, const BanditModel<Arm>& model, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = {
      {"format_version", kSnapshotVersion},
      {"arm_kind", arm_kind<Arm>()},
      {"arm_count", model.arms().size()},
      {"d", model.dim()},
      {"r", model.config().rank_cap},
      {"eps", model.config().eps},
      {"config", {{"alpha", model.config().alpha}, {"top_k", model.config().top_k}}},
  };
  if constexpr (std::is_same_v<Arm, ExactArmState>) {
    manifest["exact_mode"] = model.prototype().mode() == ExactMode::batch_solve ? "batch_solve" : "sherman_morrison";
  }
  if (!extra.is_null()) manifest["extra"] = extra;
  {
    std::ofstream out(dir / "manifest.json");
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
  }
  std::ofstream out(dir / "arms.bin", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "arms.bin").string());
  write_arms_file(out, model);
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "manifest.json").string());
  return nlohmann::json::parse(in);
}

template <BanditArm Arm>
BanditModel<Arm> load_snapshot(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  if (manifest.at("format_version").get<std::uint32_t>() != kSnapshotVersion) {
    throw std::runtime_error("snapshot: unsupported format version");
  }
  if (manifest.at("arm_kind").get<std::string>() != arm_kind<Arm>()) {
    throw std::runtime_error("snapshot: arm kind mismatch");
  }
  PolicyConfig config;
  config.eps = manifest.at("eps").get<double>();
  config.rank_cap = manifest.at("r").get<Index>();
  config.alpha = manifest.at("config").at("alpha").get<double>();
  config.top_k = manifest.at("config").at("top_k").get<Index>();
  const Index dim = manifest.at("d").get<Index>();

  auto model = [&]() {
    if constexpr (std::is_same_v<Arm, ArmState>) {
      return make_psi_model(dim, config);
    } else {
      const auto mode = manifest.at("exact_mode").get<std::string>() == "batch_solve" ? ExactMode::batch_solve
                                                                                     : ExactMode::sherman_morrison;
      return make_exact_model(dim, config, mode);
    }
  }();

  std::ifstream in(dir / "arms.bin", std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + (dir / "arms.bin").string());
  char magic[sizeof(kArmsMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + sizeof(magic), kArmsMagic)) throw std::runtime_error("snapshot: bad magic");
  if (io::read_pod<std::uint32_t>(in) != kSnapshotVersion) throw std::runtime_error("snapshot: bad version");
  const auto count = io::read_pod<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = static_cast<ArmId>(io::read_pod<std::uint64_t>(in));
    model.insert(id, Arm::read(in));
  }
  return model;
}

}  // namespace scalable_linucb

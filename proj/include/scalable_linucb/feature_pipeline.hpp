#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <zlib.h>

#include <Eigen/Core>
#include <Eigen/SVD>
#include <Eigen/SparseCore>

#include "scalable_linucb/lowrank_factor.hpp"

namespace scalable_linucb {

/// Malformed or unusable input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A user or item without warm-up history, hence without an embedding.
class ColdEntity : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

struct Interaction {
  std::int64_t user = 0;  // dense id
  std::int64_t item = 0;  // dense id
  double reward = 0.0;
  std::int64_t timestamp = 0;
};

/// Timestamp-ordered interactions with dense ids; `user_keys[u]` and
/// `item_keys[i]` hold the raw identifiers.
struct InteractionLog {
  std::vector<Interaction> records;
  std::vector<std::string> user_keys;
  std::vector<std::string> item_keys;

  std::size_t size() const { return records.size(); }
  Index n_users() const { return static_cast<Index>(user_keys.size()); }
  Index n_items() const { return static_cast<Index>(item_keys.size()); }
};

enum class RewardRule {
  threshold,  // rating >= threshold → 1, else 0
  implicit,   // every logged interaction → 1
  raw,        // the rating value itself
};

/// Column mapping for delimited input. Column references are header names,
/// or zero-based indices when the file has no header.
struct CsvSchema {
  std::string delimiter = ",";
  bool has_header = true;
  std::string user_column = "user_id";
  std::string item_column = "item_id";
  std::string rating_column = "rating";  // empty: implicit feedback
  std::string timestamp_column = "timestamp";
  RewardRule reward_rule = RewardRule::threshold;
  double rating_threshold = 4.0;

  /// `UserID::MovieID::Rating::Timestamp` without a header.
  static CsvSchema movielens() {
    CsvSchema s;
    s.delimiter = "::";
    s.has_header = false;
    s.user_column = "0";
    s.item_column = "1";
    s.rating_column = "2";
    s.timestamp_column = "3";
    return s;
  }
};

struct RawRecord {
  std::string user;
  std::string item;
  double rating = 1.0;
  std::int64_t timestamp = 0;
};

inline double map_reward(double rating, const CsvSchema& schema) {
  switch (schema.reward_rule) {
    case RewardRule::threshold: return rating >= schema.rating_threshold ? 1.0 : 0.0;
    case RewardRule::implicit: return 1.0;
    case RewardRule::raw: return rating;
  }
  return rating;
}

/// Stable timestamp sort, then dense ids in order of first appearance.
inline InteractionLog build_log(std::vector<RawRecord> raw, const CsvSchema& schema = {}) {
  std::stable_sort(raw.begin(), raw.end(),
                   [](const RawRecord& a, const RawRecord& b) { return a.timestamp < b.timestamp; });
  InteractionLog log;
  log.records.reserve(raw.size());
  std::unordered_map<std::string, std::int64_t> users;
  std::unordered_map<std::string, std::int64_t> items;
  auto intern = [](std::unordered_map<std::string, std::int64_t>& ids, std::vector<std::string>& keys,
                   const std::string& key) {
    auto [it, inserted] = ids.try_emplace(key, static_cast<std::int64_t>(keys.size()));
    if (inserted) keys.push_back(key);
    return it->second;
  };
  for (const RawRecord& r : raw) {
    Interaction it;
    it.user = intern(users, log.user_keys, r.user);
    it.item = intern(items, log.item_keys, r.item);
    it.reward = map_reward(r.rating, schema);
    it.timestamp = r.timestamp;
    log.records.push_back(it);
  }
  return log;
}

namespace detail {

inline std::vector<std::string_view> split_fields(std::string_view line, std::string_view delim) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find(delim, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + delim.size();
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ' || s.back() == '"')) s.remove_suffix(1);
  while (!s.empty() && (s.front() == ' ' || s.front() == '"')) s.remove_prefix(1);
  return s;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

inline bool parse_timestamp(std::string_view s, std::int64_t& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  if (res.ec == std::errc() && res.ptr == s.data() + s.size()) return true;
  double d = 0.0;
  if (!parse_double(s, d) || !std::isfinite(d)) return false;
  out = static_cast<std::int64_t>(std::llround(d));
  return true;
}

/// Reads plain or gzip-compressed text line by line.
class LineReader {
 public:
  explicit LineReader(const std::filesystem::path& path) : file_(gzopen(path.string().c_str(), "rb")) {
    if (file_ == nullptr) throw DataError("cannot open " + path.string());
  }
  ~LineReader() {
    if (file_ != nullptr) gzclose(file_);
  }
  LineReader(const LineReader&) = delete;
  LineReader& operator=(const LineReader&) = delete;

  bool next(std::string& line) {
    line.clear();
    char buf[1 << 14];
    while (gzgets(file_, buf, sizeof(buf)) != nullptr) {
      line.append(buf);
      if (!line.empty() && line.back() == '\n') return true;
    }
    return !line.empty();
  }

 private:
  gzFile file_;
};

inline std::size_t resolve_column(const std::string& ref, const std::vector<std::string_view>& header,
                                  bool has_header, const char* role) {
  if (has_header) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (trim(header[i]) == ref) return i;
  }
  std::size_t idx = 0;
  const auto res = std::from_chars(ref.data(), ref.data() + ref.size(), idx);
  if (!ref.empty() && res.ec == std::errc() && res.ptr == ref.data() + ref.size()) return idx;
  throw DataError(std::string("missing ") + role + " column '" + ref + "'");
}

}  // namespace detail

/// Parses a delimited (optionally gzipped) interaction file.
inline InteractionLog load_interactions(const std::filesystem::path& path, const CsvSchema& schema) {
  if (!std::filesystem::exists(path)) throw DataError("no such file: " + path.string());
  detail::LineReader reader(path);
  std::string line;
  std::size_t line_no = 0;

  std::string header_line;
  std::vector<std::string_view> header;
  if (schema.has_header) {
    if (!reader.next(header_line)) throw DataError("empty file: " + path.string());
    ++line_no;
    header = detail::split_fields(header_line, schema.delimiter);
  }
  const std::size_t user_col = detail::resolve_column(schema.user_column, header, schema.has_header, "user");
  const std::size_t item_col = detail::resolve_column(schema.item_column, header, schema.has_header, "item");
  const std::size_t ts_col = detail::resolve_column(schema.timestamp_column, header, schema.has_header, "timestamp");
  const bool implicit = schema.rating_column.empty();
  const std::size_t rating_col =
      implicit ? 0 : detail::resolve_column(schema.rating_column, header, schema.has_header, "rating");
  const std::size_t needed = std::max({user_col, item_col, ts_col, rating_col}) + 1;

  CsvSchema effective = schema;
  if (implicit) effective.reward_rule = RewardRule::implicit;

  std::vector<RawRecord> raw;
  while (reader.next(line)) {
    ++line_no;
    const std::string_view view = detail::trim(line);
    if (view.empty()) continue;
    const auto fields = detail::split_fields(view, schema.delimiter);
    if (fields.size() < needed) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected at least " +
                      std::to_string(needed) + " fields, got " + std::to_string(fields.size()));
    }
    RawRecord rec;
    rec.user = std::string(detail::trim(fields[user_col]));
    rec.item = std::string(detail::trim(fields[item_col]));
    if (rec.user.empty() || rec.item.empty()) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": empty user or item id");
    }
    if (!detail::parse_timestamp(fields[ts_col], rec.timestamp)) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": unparseable timestamp");
    }
    if (!implicit && !detail::parse_double(fields[rating_col], rec.rating)) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": unparseable rating");
    }
    raw.push_back(std::move(rec));
  }
  if (raw.empty()) throw DataError("no interactions in " + path.string());
  return build_log(std::move(raw), effective);
}

// Temporal split --------------------------------------------------------

struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
};

struct ProtocolSplit {
  IndexRange warmup;
  std::vector<IndexRange> periods;
};

inline constexpr std::size_t kDefaultPeriods = 8;

/// Warm-up prefix of ⌊fraction·N⌋ records, the rest in `n_periods`
/// contiguous equal-count intervals; the last interval takes the remainder.
inline ProtocolSplit split_protocol(std::size_t n_records, double warmup_fraction, std::size_t n_periods = kDefaultPeriods) {
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw std::invalid_argument("split_protocol: warm-up fraction must lie in (0, 1)");
  }
  if (n_periods < 1) throw std::invalid_argument("split_protocol: need at least one period");
  const auto warm = static_cast<std::size_t>(std::floor(warmup_fraction * static_cast<double>(n_records)));
  const std::size_t rest = n_records - warm;
  if (warm == 0 || rest < n_periods) {
    throw DataError("log too small: " + std::to_string(n_records) + " records cannot fill a warm-up and " +
                    std::to_string(n_periods) + " periods");
  }
  ProtocolSplit split;
  split.warmup = {0, warm};
  const std::size_t each = rest / n_periods;
  std::size_t start = warm;
  for (std::size_t p = 0; p < n_periods; ++p) {
    const std::size_t end = p + 1 == n_periods ? n_records : start + each;
    split.periods.push_back({start, end});
    start = end;
  }
  return split;
}

inline std::span<const Interaction> slice(const InteractionLog& log, IndexRange range) {
  return std::span<const Interaction>(log.records).subspan(range.begin, range.size());
}

// Truncated SVD features -------------------------------------------------

struct SvdOptions {
  bool binary = true;         // 1 per observed pair instead of the reward
  Index oversample = 10;      // extra block columns beyond the rank
  Index max_iterations = 300;
  double tolerance = 1e-13;   // relative change of the leading values
  std::uint64_t seed = 20240601;
};

struct TruncatedSvd {
  MatrixXd left;    // m×k
  VectorXd values;  // k, descending
  MatrixXd right;   // n×k
  Index iterations = 0;
};

using SparseMatrixD = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Leading k singular triplets of a sparse matrix by block subspace
/// iteration with Rayleigh–Ritz extraction, run until the leading values
/// stop moving.
inline TruncatedSvd truncated_svd(const SparseMatrixD& a, Index k, const SvdOptions& opts = {}) {
  const Index m = a.rows();
  const Index n = a.cols();
  if (k < 1 || k > std::min(m, n)) throw std::invalid_argument("truncated_svd: rank out of range");
  const Index block = std::min({n, m, k + std::max(opts.oversample, k)});

  std::mt19937_64 rng(opts.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXd omega(n, block);
  for (Index j = 0; j < block; ++j)
    for (Index i = 0; i < n; ++i) omega(i, j) = normal(rng);

  auto orthonormal = [](const MatrixXd& y) { return detail::thin_qr(y).q; };
  const SparseMatrixD at = a.transpose();
  MatrixXd q = orthonormal(a * omega);

  TruncatedSvd out;
  VectorXd previous = VectorXd::Constant(k, -1.0);
  for (Index it = 1; it <= opts.max_iterations; ++it) {
    const MatrixXd z = orthonormal(at * q);
    q = orthonormal(a * z);
    // Rayleigh–Ritz: Aᵀq = Qb Rb, so qᵀA = Rbᵀ Qbᵀ.
    const detail::ThinQr bt = detail::thin_qr(at * q);
    Eigen::JacobiSVD<MatrixXd> svd(bt.r.transpose(), Eigen::ComputeFullU | Eigen::ComputeFullV);
    out.values = svd.singularValues().head(k);
    out.left = q * svd.matrixU().leftCols(k);
    out.right = bt.q * svd.matrixV().leftCols(k);
    out.iterations = it;
    const double scale = std::max(out.values(0), 1e-300);
    if ((out.values - previous).cwiseAbs().maxCoeff() <= opts.tolerance * scale) break;
    previous = out.values;
  }
  // Deterministic signs: largest-magnitude entry of each right vector positive.
  for (Index j = 0; j < k; ++j) {
    Index arg = 0;
    out.right.col(j).cwiseAbs().maxCoeff(&arg);
    if (out.right(arg, j) < 0.0) {
      out.right.col(j) *= -1.0;
      out.left.col(j) *= -1.0;
    }
  }
  return out;
}

/// Item embeddings are the leading right singular vectors of the warm-up
/// interaction matrix; user embeddings are the matrix rows projected onto
/// them. Contexts are outer products of the two, of length r′².
struct FeatureModel {
  MatrixXd item_factors;   // n×r′
  MatrixXd user_factors;   // m×r′
  VectorXd singular_values;
  std::vector<std::uint8_t> user_warm;
  std::vector<std::uint8_t> item_warm;

  Index r_prime() const { return item_factors.cols(); }
  Index context_dim() const { return r_prime() * r_prime(); }
  Index n_users() const { return user_factors.rows(); }
  Index n_items() const { return item_factors.rows(); }

  bool user_is_warm(std::int64_t u) const {
    return u >= 0 && u < n_users() && user_warm[static_cast<std::size_t>(u)] != 0;
  }
  bool item_is_warm(std::int64_t i) const {
    return i >= 0 && i < n_items() && item_warm[static_cast<std::size_t>(i)] != 0;
  }
};

inline Index effective_rank(Index requested, Index m, Index n) {
  return std::min(requested, std::min(m, n) - 1);
}

inline SparseMatrixD interaction_matrix(Index m, Index n, std::span<const Interaction> records, bool binary) {
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(records.size());
  for (const Interaction& r : records) triplets.emplace_back(r.user, r.item, binary ? 1.0 : r.reward);
  SparseMatrixD a(m, n);
  if (binary) {
    a.setFromTriplets(triplets.begin(), triplets.end(), [](double x, double) { return x; });
  } else {
    a.setFromTriplets(triplets.begin(), triplets.end());
  }
  return a;
}

/// Fits embeddings on the warm-up records only; `m`, `n` are the id-space
/// sizes of the whole log.
inline FeatureModel fit_svd(Index m, Index n, std::span<const Interaction> warmup, Index r_requested,
                            const SvdOptions& opts = {}) {
  if (r_requested < 1) throw std::invalid_argument("fit_svd: requested rank must be >= 1");
  if (warmup.empty()) throw DataError("fit_svd: no warm-up interactions");
  if (std::min(m, n) < 2) throw DataError("fit_svd: need at least two users and two items");
  const Index r_prime = effective_rank(r_requested, m, n);

  const SparseMatrixD a = interaction_matrix(m, n, warmup, opts.binary);
  const TruncatedSvd svd = truncated_svd(a, r_prime, opts);

  FeatureModel model;
  model.item_factors = svd.right;
  model.user_factors = a * svd.right;
  model.singular_values = svd.values;
  model.user_warm.assign(static_cast<std::size_t>(m), 0);
  model.item_warm.assign(static_cast<std::size_t>(n), 0);
  for (const Interaction& r : warmup) {
    model.user_warm[static_cast<std::size_t>(r.user)] = 1;
    model.item_warm[static_cast<std::size_t>(r.item)] = 1;
  }
  return model;
}

inline FeatureModel fit_svd(const InteractionLog& log, std::span<const Interaction> warmup, Index r_requested,
                            const SvdOptions& opts = {}) {
  return fit_svd(log.n_users(), log.n_items(), warmup, r_requested, opts);
}

/// Writes x_u ⊗ x_a into `out` (length r′²), row-major over the user index:
/// out[i·r′ + j] = x_u[i]·x_a[j].
inline void build_context_into(const FeatureModel& model, std::int64_t user, std::int64_t item,
                               Eigen::Ref<VectorXd> out) {
  if (!model.user_is_warm(user)) throw ColdEntity("build_context: cold user " + std::to_string(user));
  if (!model.item_is_warm(item)) throw ColdEntity("build_context: cold item " + std::to_string(item));
  const Index r = model.r_prime();
  Eigen::Map<MatrixXd> grid(out.data(), r, r);
  grid.noalias() = model.item_factors.row(item).transpose() * model.user_factors.row(user);
}

inline VectorXd build_context(const FeatureModel& model, std::int64_t user, std::int64_t item) {
  VectorXd out(model.context_dim());
  build_context_into(model, user, item, out);
  return out;
}

// Feature snapshot ----------------------------------------------------------

inline constexpr char kFeatureMagic[8] = {'S', 'L', 'U', 'C', 'B', 'F', 'M', '1'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void write_feature_model(const std::filesystem::path& path, const FeatureModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(kFeatureMagic, sizeof(kFeatureMagic));
  io::write_pod<std::uint32_t>(out, kFeatureVersion);
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(model.n_users()));
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(model.n_items()));
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(model.r_prime()));
  io::write_doubles(out, model.singular_values.data(), model.singular_values.size());
  io::write_doubles(out, model.item_factors.data(), model.item_factors.size());
  io::write_doubles(out, model.user_factors.data(), model.user_factors.size());
  out.write(reinterpret_cast<const char*>(model.user_warm.data()), static_cast<std::streamsize>(model.user_warm.size()));
  out.write(reinterpret_cast<const char*>(model.item_warm.data()), static_cast<std::streamsize>(model.item_warm.size()));
}

inline FeatureModel read_feature_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  char magic[sizeof(kFeatureMagic)];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + sizeof(magic), kFeatureMagic)) throw DataError("feature model: bad magic");
  if (io::read_pod<std::uint32_t>(in) != kFeatureVersion) throw DataError("feature model: unsupported version");
  const auto m = static_cast<Index>(io::read_pod<std::uint64_t>(in));
  const auto n = static_cast<Index>(io::read_pod<std::uint64_t>(in));
  const auto r = static_cast<Index>(io::read_pod<std::uint64_t>(in));
  FeatureModel model;
  model.singular_values.resize(r);
  model.item_factors.resize(n, r);
  model.user_factors.resize(m, r);
  io::read_doubles(in, model.singular_values.data(), r);
  io::read_doubles(in, model.item_factors.data(), model.item_factors.size());
  io::read_doubles(in, model.user_factors.data(), model.user_factors.size());
  model.user_warm.resize(static_cast<std::size_t>(m));
  model.item_warm.resize(static_cast<std::size_t>(n));
  in.read(reinterpret_cast<char*>(model.user_warm.data()), m);
  in.read(reinterpret_cast<char*>(model.item_warm.data()), n);
  if (!in) throw DataError("feature model: truncated file");
  return model;
}

}  // namespace scalable_linucb

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/QR>
#include <Eigen/SVD>

namespace scalable_linucb {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Raised when an operation is called in a state that does not allow it
/// (compressing twice, projector-splitting before compression).
class InvalidState : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Whitened columns below this norm carry no information and are dropped.
inline double zero_column_tolerance(Index dim) {
  return 1e-12 * std::sqrt(static_cast<double>(dim));
}

/// Orthonormal basis and core of one symmetric-factorization step:
/// I + X Xᵀ = (I + Q Y Qᵀ)(I + Q Y Qᵀ)ᵀ with C = (Y⁻¹ + I)⁻¹.
struct UpdatePlan {
  MatrixXd q_basis;  // d×p, orthonormal columns, p = numerical rank of the batch
  MatrixXd c_core;   // p×p, lower triangular
};

namespace detail {

struct ThinQr {
  MatrixXd q;  // rows×p
  MatrixXd r;  // p×cols
};

inline ThinQr thin_qr(const Eigen::Ref<const MatrixXd>& a) {
  const Index p = std::min(a.rows(), a.cols());
  Eigen::HouseholderQR<MatrixXd> qr(a);
  ThinQr out;
  out.q = qr.householderQ() * MatrixXd::Identity(a.rows(), p);
  out.r = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  return out;
}

/// One step of the first-order projector-splitting integrator for the
/// factored matrix U Vᵀ (V orthonormal) and increment ΔD, where ΔD is only
/// available through products ΔD·Z and ΔDᵀ·Z with thin matrices Z.
template <class DeltaTimes, class DeltaTransposeTimes>
void projector_splitting(MatrixXd& u, MatrixXd& v, DeltaTimes&& delta_times,
                         DeltaTransposeTimes&& delta_transpose_times) {
  const MatrixXd dv = delta_times(v);
  ThinQr k_step = thin_qr(u + dv);
  const MatrixXd s0 = k_step.r - k_step.q.transpose() * dv;
  const MatrixXd l_factor = v * s0.transpose() + delta_transpose_times(k_step.q);
  ThinQr l_step = thin_qr(l_factor);
  u = k_step.q * l_step.r.transpose();
  v = std::move(l_step.q);
}

/// Rank-revealing thin QR: a = q r with q of numerical-rank width, so r has
/// full row rank. Pivots below rel_tol times the largest one are dropped.
inline ThinQr rank_revealing_qr(const Eigen::Ref<const MatrixXd>& a, double rel_tol) {
  Eigen::ColPivHouseholderQR<MatrixXd> qr(a);
  qr.setThreshold(rel_tol);
  const Index p = std::max<Index>(qr.rank(), 1);
  const MatrixXd r_perm = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  ThinQr out;
  out.q = qr.householderQ() * MatrixXd::Identity(a.rows(), p);
  out.r = r_perm * qr.colsPermutation().transpose();
  return out;
}

inline constexpr double kRankTolerance = 1e-11;

inline void require_length(Index got, Index want, const char* what) {
  if (got != want) {
    throw std::invalid_argument(std::string(what) + ": expected length " + std::to_string(want) +
                                ", got " + std::to_string(got));
  }
}

}  // namespace detail

/// Symmetric factorization of I + X̄X̄ᵀ for a whitened batch. Columns whose
/// norm falls below zero_column_tolerance are dropped before factoring.
///
/// Uses C = I − M⁻¹, which equals (Y⁻¹ + I)⁻¹ for Y = M − I but stays
/// defined when Y is singular.
inline UpdatePlan compute_cq(const Eigen::Ref<const MatrixXd>& x_whitened) {
  const Index dim = x_whitened.rows();
  if (dim < 1 || x_whitened.cols() < 1) {
    throw std::invalid_argument("compute_cq: empty batch");
  }
  const double tol = zero_column_tolerance(dim);
  std::vector<Index> kept;
  for (Index j = 0; j < x_whitened.cols(); ++j) {
    if (x_whitened.col(j).norm() > tol) kept.push_back(j);
  }
  if (kept.empty()) {
    throw std::invalid_argument("compute_cq: all columns are numerically zero");
  }

  UpdatePlan plan;
  if (kept.size() == 1) {
    // Closed form avoids the 1 − 1/√(1+n²) cancellation for small n.
    const auto col = x_whitened.col(kept.front());
    const double n = col.norm();
    const double s = std::sqrt(1.0 + n * n);
    plan.q_basis = col / n;
    plan.c_core = MatrixXd::Constant(1, 1, n * n / (s * (1.0 + s)));
    return plan;
  }

  MatrixXd batch(dim, static_cast<Index>(kept.size()));
  for (Index j = 0; j < batch.cols(); ++j) batch.col(j) = x_whitened.col(kept[j]);

  // Without the column drop a dependent column lets a noise pivot pick an
  // arbitrary direction, and C then gets rank above that of the batch.
  detail::ThinQr qr = detail::rank_revealing_qr(batch, detail::kRankTolerance);
  const Index p = qr.q.cols();
  MatrixXd t = MatrixXd::Identity(p, p);
  t.noalias() += qr.r * qr.r.transpose();
  Eigen::LLT<MatrixXd> llt(t);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("compute_cq: Cholesky of I + R Rᵀ failed");
  }
  const MatrixXd m = llt.matrixL();
  const MatrixXd m_inv = m.triangularView<Eigen::Lower>().solve(MatrixXd::Identity(p, p));
  plan.q_basis = std::move(qr.q);
  plan.c_core = MatrixXd::Identity(p, p) - m_inv;
  return plan;
}

/// Low-rank representation of the inverse root L⁻¹ = (I − U Vᵀ) ε^{1/2} of
/// one regularized design matrix A = ε⁻¹ I + Σ x xᵀ. The ridge parameter is
/// λ = 1/ε. No operation except reconstruct_gram_inverse forms a d×d matrix.
///
/// Columns are appended on every update until the column count reaches the
/// rank cap, at which point the product U Vᵀ is truncated once by SVD. From
/// then on each update is a projector-splitting step at fixed rank. The cap
/// is clamped to d, since a rank-d factor is already exact.
class InverseFactor {
 public:
  InverseFactor(Index dim, double eps, Index rank_cap)
      : dim_(dim), eps_(eps), rank_cap_(rank_cap), u_(dim > 0 ? dim : 0, 0), v_(dim > 0 ? dim : 0, 0) {
    if (dim < 1) throw std::invalid_argument("InverseFactor: dimension must be positive");
    if (rank_cap < 1) throw std::invalid_argument("InverseFactor: rank cap must be positive");
    if (!(eps > 0.0) || !std::isfinite(eps)) {
      throw std::invalid_argument("InverseFactor: eps must be positive and finite");
    }
  }

  /// Rebuilds a factor from stored parts (deserialization, tests).
  static InverseFactor from_parts(MatrixXd u, MatrixXd v, double eps, Index rank_cap, bool compressed) {
    InverseFactor f(u.rows(), eps, rank_cap);
    if (u.rows() != v.rows() || u.cols() != v.cols()) {
      throw std::invalid_argument("InverseFactor: U and V shapes differ");
    }
    f.u_ = std::move(u);
    f.v_ = std::move(v);
    f.compressed_ = compressed;
    return f;
  }

  Index dim() const { return dim_; }
  double eps() const { return eps_; }
  double lambda() const { return 1.0 / eps_; }
  Index rank_cap() const { return rank_cap_; }
  Index effective_rank_cap() const { return std::min(rank_cap_, dim_); }
  Index columns() const { return u_.cols(); }
  bool compressed() const { return compressed_; }
  const MatrixXd& u_factor() const { return u_; }
  const MatrixXd& v_factor() const { return v_; }

  /// Bytes of numeric state held by this factor.
  std::size_t state_bytes() const {
    return static_cast<std::size_t>(u_.size() + v_.size()) * sizeof(double);
  }

  /// x̄ = L⁻¹x = ε^{1/2}(x − U(Vᵀx)).
  VectorXd whiten(const Eigen::Ref<const VectorXd>& x) const {
    detail::require_length(x.size(), dim_, "whiten");
    VectorXd out = x;
    if (u_.cols() > 0) out.noalias() -= u_ * (v_.transpose() * x);
    out *= std::sqrt(eps_);
    return out;
  }

  MatrixXd whiten_batch(const Eigen::Ref<const MatrixXd>& x) const {
    detail::require_length(x.rows(), dim_, "whiten_batch");
    MatrixXd out = x;
    if (u_.cols() > 0) out.noalias() -= u_ * (v_.transpose() * x);
    out *= std::sqrt(eps_);
    return out;
  }

  /// √(xᵀA⁻¹x) = ‖L⁻¹x‖.
  double bonus_norm(const Eigen::Ref<const VectorXd>& x) const { return whiten(x).norm(); }

  /// ε (I − V Uᵀ)(I − U Vᵀ) b, i.e. A⁻¹b while no truncation has happened.
  VectorXd apply_gram_inverse(const Eigen::Ref<const VectorXd>& b) const {
    detail::require_length(b.size(), dim_, "apply_gram_inverse");
    VectorXd y = b;
    if (u_.cols() > 0) {
      y.noalias() -= u_ * (v_.transpose() * b);
      VectorXd z = y;
      z.noalias() -= v_ * (u_.transpose() * y);
      y = std::move(z);
    }
    y *= eps_;
    return y;
  }

  /// Absorbs one context. Returns the number of columns absorbed: 0 when the
  /// whitened context is numerically zero (the factor is left unchanged).
  Index rank1_update(const Eigen::Ref<const VectorXd>& x) {
    detail::require_length(x.size(), dim_, "rank1_update");
    const VectorXd xbar = whiten(x);
    const double n = xbar.norm();
    if (n <= zero_column_tolerance(dim_)) return 0;

    const double s = std::sqrt(1.0 + n * n);
    // α = (s − 1)/n² = 1/(1 + s); β = α/s.
    const double beta = 1.0 / (s * (1.0 + s));
    if (!compressed_) {
      VectorXd v_col = xbar;
      if (u_.cols() > 0) v_col.noalias() -= v_ * (u_.transpose() * xbar);
      append_columns(beta * xbar, v_col);
      return 1;
    }
    UpdatePlan plan{xbar / n, MatrixXd::Constant(1, 1, beta * n * n)};
    psi_step(plan);
    return 1;
  }

  /// Absorbs a d×B batch of contexts. Returns the number of non-zero
  /// whitened columns absorbed (0 means the batch was skipped).
  Index batch_update(const Eigen::Ref<const MatrixXd>& x_batch) {
    detail::require_length(x_batch.rows(), dim_, "batch_update");
    if (x_batch.cols() < 1) throw std::invalid_argument("batch_update: empty batch");
    const MatrixXd xbar = whiten_batch(x_batch);
    const double tol = zero_column_tolerance(dim_);
    Index live = 0;
    for (Index j = 0; j < xbar.cols(); ++j) live += xbar.col(j).norm() > tol ? 1 : 0;
    if (live == 0) return 0;

    const UpdatePlan plan = compute_cq(xbar);
    absorb(plan);
    return live;
  }

  /// Applies a precomputed plan: append (then compress once the cap is
  /// reached) before compression, projector-splitting step after.
  void absorb(const UpdatePlan& plan) {
    if (compressed_) {
      psi_step(plan);
      return;
    }
    const MatrixXd u_new = plan.q_basis * plan.c_core;
    MatrixXd v_new = plan.q_basis;
    if (u_.cols() > 0) v_new.noalias() -= v_ * (u_.transpose() * plan.q_basis);
    append_columns(u_new, v_new);
  }

  /// One-time rank-r truncation of U Vᵀ through QR of both factors and an
  /// SVD of the small core. Afterwards V has orthonormal columns.
  void compress() {
    if (compressed_) throw InvalidState("compress: factor is already compressed");
    const Index r = effective_rank_cap();
    if (u_.cols() < r) throw InvalidState("compress: column count is below the rank cap");

    const detail::ThinQr qu = detail::thin_qr(u_);
    const detail::ThinQr qv = detail::thin_qr(v_);
    const MatrixXd core = qu.r * qv.r.transpose();
    Eigen::JacobiSVD<MatrixXd> svd(core, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sigma = svd.singularValues();
    u_ = qu.q * (svd.matrixU().leftCols(r) * sigma.head(r).asDiagonal());
    v_ = qv.q * svd.matrixV().leftCols(r);
    compressed_ = true;
  }

  /// Projector-splitting step with ΔD = Q C Qᵀ(I − U Vᵀ), applied only
  /// through thin products. Cost O(d(r² + rB)).
  void psi_step(const UpdatePlan& plan) {
    if (!compressed_) throw InvalidState("psi_step: factor has not been compressed yet");
    const MatrixXd& q = plan.q_basis;
    const MatrixXd& c = plan.c_core;
    detail::require_length(q.rows(), dim_, "psi_step");
    if (c.rows() != q.cols() || c.cols() != q.cols()) {
      throw std::invalid_argument("psi_step: core shape does not match basis");
    }
    const MatrixXd qt_u = q.transpose() * u_;
    auto delta_times = [&](const MatrixXd& z) -> MatrixXd {
      const MatrixXd small = q.transpose() * z - qt_u * (v_.transpose() * z);
      return q * (c * small);
    };
    auto delta_transpose_times = [&](const MatrixXd& w) -> MatrixXd {
      const MatrixXd p = q * (c.transpose() * (q.transpose() * w));
      return p - v_ * (u_.transpose() * p);
    };
    detail::projector_splitting(u_, v_, delta_times, delta_transpose_times);
  }

  /// Dense ε(I − V Uᵀ)(I − U Vᵀ). Test and diagnostics only.
  MatrixXd reconstruct_gram_inverse() const {
    if (dim_ > kMaxDenseDim) {
      throw std::invalid_argument("reconstruct_gram_inverse: dimension too large to materialize");
    }
    MatrixXd l_inv = MatrixXd::Identity(dim_, dim_);
    if (u_.cols() > 0) l_inv.noalias() -= u_ * v_.transpose();
    return eps_ * (l_inv.transpose() * l_inv);
  }

  static constexpr Index kMaxDenseDim = 1024;

 private:
  void append_columns(const Eigen::Ref<const MatrixXd>& u_cols, const Eigen::Ref<const MatrixXd>& v_cols) {
    const Index k = u_.cols();
    const Index b = u_cols.cols();
    u_.conservativeResize(Eigen::NoChange, k + b);
    v_.conservativeResize(Eigen::NoChange, k + b);
    u_.rightCols(b) = u_cols;
    v_.rightCols(b) = v_cols;
    if (u_.cols() >= effective_rank_cap()) compress();
  }

  Index dim_;
  double eps_;
  Index rank_cap_;
  MatrixXd u_;
  MatrixXd v_;
  bool compressed_ = false;
};

namespace io {

template <class T>
void write_pod(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("unexpected end of binary record");
  return value;
}

inline void write_doubles(std::ostream& out, const double* data, Index count) {
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
}

inline void read_doubles(std::istream& in, double* data, Index count) {
  in.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(double)));
  if (!in) throw std::runtime_error("unexpected end of binary record");
}

}  // namespace io

/// Flat record: {d: u64, k: u64, r: u64, eps: f64, compressed: u8}, then U
/// and V as column-major f64.
inline void write_factor(std::ostream& out, const InverseFactor& f) {
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(f.dim()));
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(f.columns()));
  io::write_pod<std::uint64_t>(out, static_cast<std::uint64_t>(f.rank_cap()));
  io::write_pod<double>(out, f.eps());
  io::write_pod<std::uint8_t>(out, f.compressed() ? 1 : 0);
  io::write_doubles(out, f.u_factor().data(), f.u_factor().size());
  io::write_doubles(out, f.v_factor().data(), f.v_factor().size());
}

inline InverseFactor read_factor(std::istream& in) {
  const auto d = static_cast<Index>(io::read_pod<std::uint64_t>(in));
  const auto k = static_cast<Index>(io::read_pod<std::uint64_t>(in));
  const auto r = static_cast<Index>(io::read_pod<std::uint64_t>(in));
  const double eps = io::read_pod<double>(in);
  const bool compressed = io::read_pod<std::uint8_t>(in) != 0;
  if (d < 1 || r < 1 || !(eps > 0.0) || static_cast<double>(d) * static_cast<double>(k) > 1e10) {
    throw std::runtime_error("read_factor: corrupt header");
  }
  MatrixXd u(d, k);
  MatrixXd v(d, k);
  io::read_doubles(in, u.data(), u.size());
  io::read_doubles(in, v.data(), v.size());
  return InverseFactor::from_parts(std::move(u), std::move(v), eps, r, compressed);
}

}  // namespace scalable_linucb

#pragma once

// Synthetic linear bandit streams for equivalence checks and benchmarks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "scalable_linucb/bandit_core.hpp"
#include "scalable_linucb/feature_pipeline.hpp"

namespace scalable_linucb {

/// Online problem with planted per-arm parameters. Contexts and reward noise
/// are drawn up front so every policy sees the same reward for the same
/// (step, arm) choice.
struct SyntheticReplay {
  Index n_arms = 0;
  Index dim = 0;
  Index steps = 0;
  MatrixXd true_theta;                // dim × n_arms
  std::vector<MatrixXd> contexts;     // per step: dim × n_arms, unit columns
  std::vector<VectorXd> noise;        // per step: n_arms

  double reward(Index step, ArmId arm) const {
    const auto a = static_cast<Index>(arm);
    return true_theta.col(a).dot(contexts[static_cast<std::size_t>(step)].col(a)) +
           noise[static_cast<std::size_t>(step)](a);
  }
};

inline SyntheticReplay make_synthetic_replay(Index n_arms, Index dim, Index steps, std::uint64_t seed,
                                             double noise_std = 0.1) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto draw = [&](Index rows, Index cols) {
    MatrixXd m(rows, cols);
    for (Index j = 0; j < cols; ++j)
      for (Index i = 0; i < rows; ++i) m(i, j) = normal(rng);
    return m;
  };
  SyntheticReplay out;
  out.n_arms = n_arms;
  out.dim = dim;
  out.steps = steps;
  out.true_theta = draw(dim, n_arms) / std::sqrt(static_cast<double>(dim));
  out.contexts.reserve(static_cast<std::size_t>(steps));
  out.noise.reserve(static_cast<std::size_t>(steps));
  for (Index t = 0; t < steps; ++t) {
    MatrixXd ctx = draw(dim, n_arms);
    ctx.colwise().normalize();
    out.contexts.push_back(std::move(ctx));
    out.noise.push_back(noise_std * draw(n_arms, 1).col(0));
  }
  return out;
}

/// Plays the replay online with rank-1 updates of the chosen arm. Returns
/// the chosen arm at every step.
template <BanditArm Arm>
std::vector<ArmId> play_replay(BanditModel<Arm>& model, const SyntheticReplay& replay, double alpha) {
  std::vector<ArmId> ids(static_cast<std::size_t>(replay.n_arms));
  for (std::size_t a = 0; a < ids.size(); ++a) ids[a] = static_cast<ArmId>(a);
  std::vector<VectorXd> ctx(ids.size());
  std::vector<ArmId> choices;
  choices.reserve(static_cast<std::size_t>(replay.steps));
  for (Index t = 0; t < replay.steps; ++t) {
    const MatrixXd& step_ctx = replay.contexts[static_cast<std::size_t>(t)];
    for (std::size_t a = 0; a < ids.size(); ++a) ctx[a] = step_ctx.col(static_cast<Index>(a));
    const ArmId chosen = select_arm(model, std::span<const ArmId>(ids), std::span<const VectorXd>(ctx), alpha);
    VectorXd r(1);
    r(0) = replay.reward(t, chosen);
    model.arm(chosen).update(step_ctx.col(static_cast<Index>(chosen)), r);
    choices.push_back(chosen);
  }
  return choices;
}

// Planted interaction logs -------------------------------------------------

struct PlantedLogSpec {
  Index n_users = 100;
  Index n_items = 20;
  std::size_t n_interactions = 4000;
  Index latent_dim = 4;
  double temperature = 0.5;      // softmax temperature of the item choice
  double popularity_std = 0.5;   // spread of per-item popularity logits
  bool graded_rewards = false;   // reward = affinity + noise instead of 1
  double reward_noise = 0.0;
  std::uint64_t seed = 1;
};

/// Users pick items by a softmax over latent affinities plus item
/// popularity; one interaction per timestamp tick. With implicit rewards
/// every record has reward 1.
inline InteractionLog make_planted_log(const PlantedLogSpec& spec) {
  if (spec.n_users < 1 || spec.n_items < 1 || spec.latent_dim < 1) {
    throw std::invalid_argument("make_planted_log: sizes must be positive");
  }
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(spec.latent_dim));
  MatrixXd users(spec.latent_dim, spec.n_users);
  MatrixXd items(spec.latent_dim, spec.n_items);
  VectorXd popularity(spec.n_items);
  for (Index j = 0; j < spec.n_users; ++j)
    for (Index i = 0; i < spec.latent_dim; ++i) users(i, j) = normal(rng) * scale;
  for (Index j = 0; j < spec.n_items; ++j)
    for (Index i = 0; i < spec.latent_dim; ++i) items(i, j) = normal(rng);
  for (Index j = 0; j < spec.n_items; ++j) popularity(j) = spec.popularity_std * normal(rng);

  const MatrixXd affinity = users.transpose() * items;  // n_users × n_items
  std::vector<std::discrete_distribution<Index>> choice;
  choice.reserve(static_cast<std::size_t>(spec.n_users));
  std::vector<double> w(static_cast<std::size_t>(spec.n_items));
  for (Index u = 0; u < spec.n_users; ++u) {
    const VectorXd logits = affinity.row(u).transpose() / spec.temperature + popularity;
    const double top = logits.maxCoeff();
    for (Index i = 0; i < spec.n_items; ++i) w[static_cast<std::size_t>(i)] = std::exp(logits(i) - top);
    choice.emplace_back(w.begin(), w.end());
  }

  std::uniform_int_distribution<Index> pick_user(0, spec.n_users - 1);
  std::vector<RawRecord> raw;
  raw.reserve(spec.n_interactions);
  for (std::size_t t = 0; t < spec.n_interactions; ++t) {
    const Index u = pick_user(rng);
    const Index i = choice[static_cast<std::size_t>(u)](rng);
    RawRecord rec;
    rec.user = "u" + std::to_string(u);
    rec.item = "i" + std::to_string(i);
    rec.rating = spec.graded_rewards ? affinity(u, i) + spec.reward_noise * normal(rng) : 1.0;
    rec.timestamp = static_cast<std::int64_t>(t);
    raw.push_back(std::move(rec));
  }
  CsvSchema schema;
  schema.reward_rule = RewardRule::raw;
  return build_log(std::move(raw), schema);
}

}  // namespace scalable_linucb

#pragma once

#include <vector>

#include "avf/net/net.hpp"

namespace avf::objective {

using diff::Var;

inline constexpr double kLogFloor = 1e-7;

/// KL(post || prior) between diagonal Gaussians [N, z]: summed over coordinates, averaged over rows.
Var kl_diag_gauss(const net::Gaussian& post, const net::Gaussian& prior);
/// Sum of per-step KL terms.
Var kl_sequence(const std::vector<net::Gaussian>& posts, const std::vector<net::Gaussian>& priors);

/// Squared error summed over every axis but the first, averaged over the first.
Var recon_loss(const Var& pred, const Var& target);

/// Discriminator probabilities [N, 1] for the six adversarial terms.
struct DiscScores {
  Var real_std;       // D_std(X_t) on a real clip
  Var fake_std;       // D_std(X^_t)
  Var real_md;        // D(X_t | real neighbours, aligned audio)
  Var real_mismatch;  // D(X_t | real neighbours, audio from t' != t)
  Var fake_md;        // D(X^_t | real neighbours, aligned audio)
  Var fake_mismatch;  // D(X^_t | real neighbours, audio from t' != t)
};

/// log(clamp(p)) and log(1 - clamp(p)) averaged over the batch.
Var mean_log(const Var& p);
Var mean_log_complement(const Var& p);

/// Negated six-term adversarial objective; minimised by the discriminator.
Var discriminator_loss(const DiscScores& s);
/// -sum log(1 - D) over the three fake scores. The generator maximises it.
Var generator_adv_term(const Var& fake_std, const Var& fake_md, const Var& fake_mismatch);
/// recon + beta * kl - gamma * adv_g
Var generator_total(const Var& recon, const Var& kl, const Var& adv_g, double beta, double gamma);

struct LossBreakdown {
  double recon = 0.0;
  double kl = 0.0;
  double adv_g = 0.0;
  double total_g = 0.0;
  double total_d = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
};

struct LossParts {
  double recon = 0.0;
  double kl = 0.0;
  double adv_g = 0.0;
  double total_d = 0.0;
};

LossBreakdown total_losses(const LossParts& parts, double beta, double gamma);

}  // namespace avf::objective

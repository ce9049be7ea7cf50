#include "avf/objective/objective.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "avf/diffcore/ops.hpp"

namespace avf::objective {
namespace {

using namespace diff;

Var batch_mean(const Var& total, const Var& like) { return scale(total, 1.0 / like.shape()[0]); }

void require(const Var& v, const char* name) {
  if (!v.valid()) throw std::invalid_argument(std::string("discriminator score missing: ") + name);
}

}  // namespace

Var kl_diag_gauss(const net::Gaussian& post, const net::Gaussian& prior) {
  if (post.mu.shape() != prior.mu.shape() || post.log_var.shape() != prior.log_var.shape() ||
      post.mu.shape() != post.log_var.shape()) {
    throw std::invalid_argument("kl: posterior " + shape_str(post.mu.shape()) + " and prior " +
                                shape_str(prior.mu.shape()) + " differ");
  }
  const Var ratio = exp(sub(post.log_var, prior.log_var));
  const Var dist = mul(square(sub(post.mu, prior.mu)), exp(scale(prior.log_var, -1.0)));
  const Var terms = sub(add(ratio, dist), add_scalar(sub(post.log_var, prior.log_var), 1.0));
  return batch_mean(scale(sum(terms), 0.5), post.mu);
}

Var kl_sequence(const std::vector<net::Gaussian>& posts, const std::vector<net::Gaussian>& priors) {
  if (posts.size() != priors.size() || posts.empty()) throw std::invalid_argument("kl: need matching nonempty sequences");
  Var total = kl_diag_gauss(posts[0], priors[0]);
  for (std::size_t i = 1; i < posts.size(); ++i) total = add(total, kl_diag_gauss(posts[i], priors[i]));
  return total;
}

Var recon_loss(const Var& pred, const Var& target) {
  if (pred.shape() != target.shape()) {
    throw std::invalid_argument("recon: prediction " + shape_str(pred.shape()) + " vs target " + shape_str(target.shape()));
  }
  return batch_mean(sum(square(sub(pred, target))), pred);
}

Var mean_log(const Var& p) { return batch_mean(sum(log(clamp(p, kLogFloor, 1.0 - kLogFloor))), p); }

Var mean_log_complement(const Var& p) {
  return batch_mean(sum(log(add_scalar(scale(clamp(p, kLogFloor, 1.0 - kLogFloor), -1.0), 1.0))), p);
}

Var discriminator_loss(const DiscScores& s) {
  require(s.real_std, "real_std");
  require(s.fake_std, "fake_std");
  require(s.real_md, "real_md");
  require(s.real_mismatch, "real_mismatch");
  require(s.fake_md, "fake_md");
  require(s.fake_mismatch, "fake_mismatch");
  Var total = add(mean_log(s.real_std), mean_log_complement(s.fake_std));
  total = add(total, mean_log(s.real_md));
  total = add(total, mean_log_complement(s.real_mismatch));
  total = add(total, mean_log_complement(s.fake_md));
  total = add(total, mean_log_complement(s.fake_mismatch));
  return scale(total, -1.0);
}

Var generator_adv_term(const Var& fake_std, const Var& fake_md, const Var& fake_mismatch) {
  const Var total = add(add(mean_log_complement(fake_std), mean_log_complement(fake_md)), mean_log_complement(fake_mismatch));
  return scale(total, -1.0);
}

Var generator_total(const Var& recon, const Var& kl, const Var& adv_g, double beta, double gamma) {
  return sub(add(recon, scale(kl, beta)), scale(adv_g, gamma));
}

LossBreakdown total_losses(const LossParts& parts, double beta, double gamma) {
  const std::pair<const char*, double> named[] = {
      {"recon", parts.recon}, {"kl", parts.kl}, {"adv_g", parts.adv_g}, {"total_d", parts.total_d}, {"beta", beta}, {"gamma", gamma}};
  for (const auto& [name, v] : named) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string("loss term ") + name + " is not finite");
  }
  LossBreakdown b{parts.recon, parts.kl, parts.adv_g, 0.0, parts.total_d, beta, gamma};
  b.total_g = parts.recon + beta * parts.kl - gamma * parts.adv_g;
  return b;
}

}  // namespace avf::objective

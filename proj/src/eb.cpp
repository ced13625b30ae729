#include "gradegap/eb.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "gradegap/error.hpp"
#include "gradegap/parallel.hpp"
#include "gradegap/table.hpp"

namespace gradegap {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

GaussianPrior fit_gaussian_prior(const VarianceDecomposition& d, double phi2_floor) {
  return {d.mean, std::max(d.var_weighted, phi2_floor)};
}

std::string_view to_string(PriorKind k) { return k == PriorKind::gaussian ? "gaussian" : "deconvolved"; }

std::vector<PosteriorEstimate> shrink(std::span<const TeacherGapEstimate> gaps, const GaussianPrior& prior) {
  if (!(prior.phi2 > 0)) throw ValidationError("prior variance must be positive");
  std::vector<PosteriorEstimate> out;
  for (const auto& g : gaps) {
    if (!(g.se > 0)) throw ValidationError(fmt::format("teacher '{}': standard error must be positive", g.teacher_id));
    const double prec_s = 1.0 / (g.se * g.se);
    const double prec_p = 1.0 / prior.phi2;
    PosteriorEstimate p;
    p.teacher_id = g.teacher_id;
    p.subject = g.subject;
    p.theta_hat = g.theta_hat;
    p.se = g.se;
    p.theta_star = (g.theta_hat * prec_s + prior.mu * prec_p) / (prec_s + prec_p);
    p.posterior_variance = 1.0 / (prec_s + prec_p);
    p.prior = PriorKind::gaussian;
    out.push_back(p);
  }
  return out;
}

VectorXd make_grid(const GridSpec& spec) {
  if (spec.points < 2 || !(spec.hi > spec.lo)) throw ValidationError("grid needs at least two points and hi > lo");
  return VectorXd::LinSpaced(spec.points, spec.lo, spec.hi);
}

MatrixXd spline_basis(const VectorXd& grid, int p) {
  if (p < 2) throw ValidationError("spline basis needs at least two columns");
  const int k = p + 1;  // knots
  const double lo = grid.minCoeff(), hi = grid.maxCoeff();
  std::vector<double> knots(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) knots[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / (k - 1);
  auto cube = [](double v) { return v > 0 ? v * v * v : 0.0; };
  auto dk = [&](int i, double x) {
    const double last = knots.back();
    return (cube(x - knots[static_cast<std::size_t>(i)]) - cube(x - last)) / (last - knots[static_cast<std::size_t>(i)]);
  };
  MatrixXd q(grid.size(), p);
  for (Index r = 0; r < grid.size(); ++r) {
    const double x = grid(r);
    q(r, 0) = x;
    for (int i = 0; i < k - 2; ++i) q(r, i + 1) = dk(i, x) - dk(k - 2, x);
  }
  for (Index c = 0; c < q.cols(); ++c) {
    q.col(c).array() -= q.col(c).mean();
    q.col(c) /= q.col(c).norm();
  }
  return q;
}

VectorXd softmax_prior(const MatrixXd& basis, const VectorXd& alpha) {
  VectorXd eta = basis * alpha;
  eta.array() -= eta.maxCoeff();
  VectorXd g = eta.array().exp();
  return g / g.sum();
}

double DiscretePrior::mean() const { return g.dot(grid); }

double DiscretePrior::variance() const {
  const double m = mean();
  return g.dot((grid.array() - m).square().matrix());
}

namespace {

constexpr double kLogRoot2Pi = 0.91893853320467274178;  // log(sqrt(2 pi))
constexpr std::size_t kBlocks = 64;  // fixed reduction blocks, independent of threads

void check_inputs(std::span<const double> theta, std::span<const double> se) {
  if (theta.size() != se.size()) throw ValidationError("theta and se lengths differ");
  for (std::size_t j = 0; j < se.size(); ++j) {
    if (!(se[j] > 0)) throw ValidationError(fmt::format("standard error {} must be positive", j));
    if (!std::isfinite(theta[j])) throw ValidationError(fmt::format("non-finite gap estimate at {}", j));
  }
}

// log of g_k N(theta; grid_k, s^2) for every k
void log_terms(double theta, double s, const VectorXd& grid, const VectorXd& log_g, VectorXd& out) {
  const double ls = std::log(s) + kLogRoot2Pi;
  for (Index k = 0; k < grid.size(); ++k) {
    const double z = (theta - grid(k)) / s;
    out(k) = log_g(k) - 0.5 * z * z - ls;
  }
}

// posterior weights over the grid for one teacher; returns the log marginal
double posterior_weights(const VectorXd& terms, VectorXd& w) {
  const double m = terms.maxCoeff();
  if (!std::isfinite(m)) return -std::numeric_limits<double>::infinity();
  w = (terms.array() - m).exp();
  const double s = w.sum();
  w /= s;
  return m + std::log(s);
}

double penalized(double loglik, const VectorXd& alpha, double c0) { return loglik - c0 * alpha.norm(); }

// log sum_k v_k exp(d_k) for a probability vector v, accurate for small d
double log_mean_exp(const VectorXd& v, const VectorXd& d) {
  const double big = d.cwiseAbs().maxCoeff();
  if (big < 0.5) {
    double s = 0.0;
    for (Index k = 0; k < d.size(); ++k) s += v(k) * std::expm1(d(k));
    return std::log1p(s);
  }
  double s = 0.0;
  const double m = d.maxCoeff();
  for (Index k = 0; k < d.size(); ++k) s += v(k) * std::exp(d(k) - m);
  return m + std::log(s);
}

// Change in the penalized objective from alpha to alpha + step, computed from
// posterior weights at alpha so that it stays accurate when the change is far
// below the rounding error of the objective itself.
double objective_change(const VectorXd& alpha, const VectorXd& step, const MatrixXd& basis, const VectorXd& grid,
                        std::span<const double> theta, std::span<const double> se, double c0) {
  const VectorXd g = softmax_prior(basis, alpha);
  const VectorXd log_g = g.array().log();
  const VectorXd delta = basis * step;
  const std::size_t n = theta.size();
  const std::size_t blocks = std::min(kBlocks, std::max<std::size_t>(n, 1));
  std::vector<double> parts(blocks, 0.0);
  parallel_for(blocks, [&](std::size_t b) {
    VectorXd terms(grid.size()), w(grid.size());
    const std::size_t lo = b * n / blocks, hi = (b + 1) * n / blocks;
    for (std::size_t j = lo; j < hi; ++j) {
      log_terms(theta[j], se[j], grid, log_g, terms);
      posterior_weights(terms, w);
      parts[b] += log_mean_exp(w, delta);
    }
  });
  double dl = 0.0;
  for (double v : parts) dl += v;
  dl -= static_cast<double>(n) * log_mean_exp(g, delta);
  // |a + s| - |a| without cancellation
  const VectorXd next = alpha + step;
  const double denom = next.norm() + alpha.norm();
  const double dnorm = denom > 0 ? (2.0 * alpha.dot(step) + step.squaredNorm()) / denom : 0.0;
  return dl - c0 * dnorm;
}

}  // namespace

Likelihood deconv_loglik(const VectorXd& alpha, const MatrixXd& basis, const VectorXd& grid,
                         std::span<const double> theta, std::span<const double> se, bool with_hessian) {
  const VectorXd g = softmax_prior(basis, alpha);
  const VectorXd log_g = g.array().log();
  const Index p = basis.cols();
  const Index kk = grid.size();
  const std::size_t n = theta.size();
  const std::size_t blocks = std::min(kBlocks, std::max<std::size_t>(n, 1));

  struct Partial {
    double value = 0.0;
    VectorXd wsum;   // sum_j w_j over the grid
    MatrixXd outer;  // sum_j (Q'w_j)(Q'w_j)'
    bool finite = true;
  };
  std::vector<Partial> parts(blocks);
  parallel_for(blocks, [&](std::size_t b) {
    Partial& part = parts[b];
    part.wsum = VectorXd::Zero(kk);
    if (with_hessian) part.outer = MatrixXd::Zero(p, p);
    VectorXd terms(kk), w(kk);
    const std::size_t lo = b * n / blocks, hi = (b + 1) * n / blocks;
    for (std::size_t j = lo; j < hi; ++j) {
      log_terms(theta[j], se[j], grid, log_g, terms);
      const double lm = posterior_weights(terms, w);
      if (!std::isfinite(lm)) {
        part.finite = false;
        return;
      }
      part.value += lm;
      part.wsum += w;
      if (with_hessian) {
        const VectorXd qw = basis.transpose() * w;
        part.outer.noalias() += qw * qw.transpose();
      }
    }
  });
  Likelihood out;
  VectorXd wsum = VectorXd::Zero(kk);
  MatrixXd outer = MatrixXd::Zero(p, p);
  for (const auto& part : parts) {
    if (!part.finite)
      throw ValidationError("deconvolution likelihood is not finite; widen the grid to cover the gap estimates");
    out.value += part.value;
    wsum += part.wsum;
    if (with_hessian) outer += part.outer;
  }
  if (!std::isfinite(out.value))
    throw ValidationError("deconvolution likelihood is not finite; widen the grid to cover the gap estimates");
  const double nn = static_cast<double>(n);
  // d/d alpha: Q' sum_j (w_j - g)
  out.gradient = basis.transpose() * (wsum - nn * g);
  if (with_hessian) {
    // -sum_j Q'[(diag g - g g') - (diag w_j - w_j w_j')]Q
    const VectorXd qg = basis.transpose() * g;
    const MatrixXd prior_part = nn * (basis.transpose() * g.asDiagonal() * basis - qg * qg.transpose());
    const MatrixXd post_part = basis.transpose() * wsum.asDiagonal() * basis - outer;
    out.hessian = post_part - prior_part;
  }
  return out;
}

DiscretePrior deconvolve(std::span<const TeacherGapEstimate> gaps, const DeconvOptions& options) {
  std::vector<double> theta, se;
  for (const auto& g : gaps) {
    theta.push_back(g.theta_hat);
    se.push_back(g.se);
  }
  return deconvolve(theta, se, options);
}

DiscretePrior deconvolve(std::span<const double> theta, std::span<const double> se, const DeconvOptions& options) {
  if (theta.empty()) throw ValidationError("deconvolution needs at least one gap estimate");
  check_inputs(theta, se);
  if (options.c0 < 0) throw ValidationError("penalty must be nonnegative");
  DiscretePrior prior;
  prior.grid = make_grid(options.grid);
  if (options.basis.size() > 0) {
    if (options.basis.rows() != prior.grid.size()) throw ValidationError("basis rows must match the grid");
    prior.basis = options.basis;
  } else {
    prior.basis = spline_basis(prior.grid, options.basis_columns);
  }
  prior.c0 = options.c0;
  for (std::size_t j = 0; j < theta.size(); ++j) {
    if (theta[j] < options.grid.lo - 6 * se[j] || theta[j] > options.grid.hi + 6 * se[j])
      throw ValidationError(fmt::format(
          "gap estimate {:.4g} (se {:.3g}) lies outside the grid [{}, {}]; widen the grid", theta[j], se[j],
          options.grid.lo, options.grid.hi));
  }
  const Index p = prior.basis.cols();
  const double c0 = options.c0;
  VectorXd alpha = VectorXd::Zero(p);
  auto eval = [&](const VectorXd& a, bool hess) { return deconv_loglik(a, prior.basis, prior.grid, theta, se, hess); };

  Likelihood cur = eval(alpha, true);
  double f = penalized(cur.value, alpha, c0);
  if (options.on_iterate) options.on_iterate(alpha, softmax_prior(prior.basis, alpha), f);

  auto full_gradient = [&](const VectorXd& a, const Likelihood& l) -> VectorXd {
    const double norm = a.norm();
    if (norm > 0) return l.gradient - c0 * a / norm;
    // subgradient at the kink: zero if the penalty ball absorbs the gradient
    const double gnorm = l.gradient.norm();
    if (gnorm <= c0) return VectorXd::Zero(a.size());
    return l.gradient * (1.0 - c0 / gnorm);
  };
  auto neg_hessian = [&](const VectorXd& a, const Likelihood& l) -> MatrixXd {
    MatrixXd h = -l.hessian;
    const double norm = a.norm();
    if (norm > 0) h += c0 * (MatrixXd::Identity(p, p) / norm - a * a.transpose() / (norm * norm * norm));
    return 0.5 * (h + h.transpose());
  };

  double lambda = 0.0;
  int it = 0;
  prior.converged = false;
  for (; it < options.max_iterations; ++it) {
    const VectorXd grad = full_gradient(alpha, cur);
    if (grad.cwiseAbs().maxCoeff() < options.gradient_tol) {
      prior.converged = true;
      break;
    }
    const MatrixXd h = neg_hessian(alpha, cur);
    const double scale = std::max(h.diagonal().cwiseAbs().maxCoeff(), 1e-12);
    bool moved = false;
    for (int tries = 0; tries < 40 && !moved; ++tries) {
      Eigen::LLT<MatrixXd> llt(h + lambda * scale * MatrixXd::Identity(p, p));
      if (llt.info() != Eigen::Success) {
        lambda = std::max(lambda * 10.0, 1e-8);
        continue;
      }
      const VectorXd dir = llt.solve(grad);
      // backtracking: accept only steps that do not lower the objective
      double t = 1.0;
      for (int ls = 0; ls < 30; ++ls, t *= 0.5) {
        const VectorXd step = t * dir;
        const double df = objective_change(alpha, step, prior.basis, prior.grid, theta, se, c0);
        if (std::isfinite(df) && df >= 0.0) {
          const VectorXd trial = alpha + step;
          moved = (trial - alpha).cwiseAbs().maxCoeff() > 0;
          alpha = trial;
          f += df;
          break;
        }
      }
      if (moved) {
        lambda = t == 1.0 ? lambda * 0.1 : lambda;
        if (lambda < 1e-12) lambda = 0.0;
      } else {
        lambda = std::max(lambda * 10.0, 1e-8);
      }
    }
    if (!moved) {
      // no ascent direction left at machine precision
      prior.converged = grad.cwiseAbs().maxCoeff() < options.gradient_tol;
      cur = eval(alpha, true);
      break;
    }
    cur = eval(alpha, true);
    if (options.on_iterate) options.on_iterate(alpha, softmax_prior(prior.basis, alpha), f);
  }
  prior.iterations = it;
  prior.alpha = alpha;
  prior.g = softmax_prior(prior.basis, alpha);
  prior.objective = penalized(cur.value, alpha, c0);

  if (options.standard_errors) {
    // delta method: cov(alpha) = H^-1 I H^-1 with I the observed information
    // of the unpenalized likelihood and H that of the penalized objective
    const MatrixXd info = -cur.hessian;
    const MatrixXd h = neg_hessian(alpha, cur);
    Eigen::LDLT<MatrixXd> ldlt(h);
    const MatrixXd hinv = ldlt.solve(MatrixXd::Identity(p, p));
    const MatrixXd cov = hinv * info * hinv;
    const MatrixXd jac = (prior.g.asDiagonal() * prior.basis) - prior.g * (prior.g.transpose() * prior.basis);
    prior.g_se = (jac * cov * jac.transpose()).diagonal().cwiseMax(0.0).cwiseSqrt();
  }
  return prior;
}

std::vector<double> default_penalty_scan() {
  std::vector<double> out;
  for (int i = 0; i <= 20; ++i) out.push_back(std::pow(2.0, -4.0 + 0.5 * i));
  return out;
}

Calibration calibrate_penalty(std::span<const TeacherGapEstimate> gaps, const VarianceDecomposition& d,
                              const DeconvOptions& options, std::span<const double> scan) {
  if (gaps.size() < 2) throw ValidationError("penalty calibration needs at least two teachers");
  if (!(d.var_weighted > 0))
    throw ValidationError("bias-corrected variance is zero; there is no variance target to calibrate to");
  std::vector<double> c0s = scan.empty() ? default_penalty_scan() : std::vector<double>(scan.begin(), scan.end());
  std::vector<DiscretePrior> fits(c0s.size());
  // scan points run one after another; each fit parallelizes internally
  for (std::size_t i = 0; i < c0s.size(); ++i) {
    DeconvOptions o = options;
    o.c0 = c0s[i];
    o.on_iterate = nullptr;
    fits[i] = deconvolve(gaps, o);
  }
  Calibration out;
  const double mean_scale = std::max(std::abs(d.mean), d.sd_weighted);
  std::size_t best = 0;
  for (std::size_t i = 0; i < fits.size(); ++i) {
    PenaltyScanPoint pt;
    pt.c0 = c0s[i];
    pt.mean = fits[i].mean();
    pt.variance = fits[i].variance();
    pt.mean_error = (pt.mean - d.mean) / mean_scale;
    pt.variance_error = (pt.variance - d.var_weighted) / d.var_weighted;
    pt.score = pt.mean_error * pt.mean_error + pt.variance_error * pt.variance_error;
    pt.converged = fits[i].converged;
    out.scan.push_back(pt);
    if (pt.score < out.scan[best].score) best = i;
  }
  const auto& b = out.scan[best];
  if (std::max(std::abs(b.mean_error), std::abs(b.variance_error)) >= 0.5) {
    std::string trace;
    for (const auto& pt : out.scan)
      trace += fmt::format(" c0={:.4g}: mean {:.4g}, var {:.4g};", pt.c0, pt.mean, pt.variance);
    throw ValidationError(fmt::format(
        "no penalty reaches a relative moment error below 50% (targets mean {:.4g}, var {:.4g});{}", d.mean,
        d.var_weighted, trace));
  }
  out.c0 = c0s[best];
  out.prior = std::move(fits[best]);
  if (options.standard_errors && out.prior.g_se.size() == 0) {
    DeconvOptions o = options;
    o.c0 = out.c0;
    out.prior = deconvolve(gaps, o);
  }
  return out;
}

std::vector<PosteriorEstimate> posterior_mean_deconv(std::span<const TeacherGapEstimate> gaps,
                                                     const DiscretePrior& prior) {
  if (prior.g.size() != prior.grid.size() || prior.g.size() == 0) throw ValidationError("prior is not normalized");
  if (std::abs(prior.g.sum() - 1.0) > 1e-9 || prior.g.minCoeff() < 0)
    throw ValidationError("prior is not a probability vector");
  VectorXd log_g(prior.g.size());
  for (Index k = 0; k < prior.g.size(); ++k)
    log_g(k) = prior.g(k) > 0 ? std::log(prior.g(k)) : -std::numeric_limits<double>::infinity();
  std::vector<PosteriorEstimate> out(gaps.size());
  parallel_for(gaps.size(), [&](std::size_t j) {
    const auto& g = gaps[j];
    if (!(g.se > 0)) throw ValidationError(fmt::format("teacher '{}': standard error must be positive", g.teacher_id));
    VectorXd terms(prior.grid.size()), w;
    log_terms(g.theta_hat, g.se, prior.grid, log_g, terms);
    posterior_weights(terms, w);
    PosteriorEstimate& p = out[j];
    p.teacher_id = g.teacher_id;
    p.subject = g.subject;
    p.theta_hat = g.theta_hat;
    p.se = g.se;
    p.theta_star = w.dot(prior.grid);
    p.posterior_variance = std::max(0.0, w.dot((prior.grid.array() - p.theta_star).square().matrix()));
    p.prior = PriorKind::deconvolved;
  });
  return out;
}

void write_posteriors(const std::filesystem::path& path, std::span<const PosteriorEstimate> rows, char delimiter) {
  Table t;
  t.header = {"teacher_id", "subject", "theta_hat", "se", "theta_star", "posterior_variance", "prior"};
  for (const auto& r : rows)
    t.rows.push_back({r.teacher_id, std::string(to_string(r.subject)), format_double(r.theta_hat), format_double(r.se),
                      format_double(r.theta_star), format_double(r.posterior_variance), std::string(to_string(r.prior))});
  write_table(path, t, delimiter);
}

std::vector<PosteriorEstimate> load_posteriors(const std::filesystem::path& path, char delimiter) {
  const Table t = read_table(path, delimiter);
  const std::size_t c[7] = {t.require_column("teacher_id"), t.require_column("subject"), t.require_column("theta_hat"),
                            t.require_column("se"), t.require_column("theta_star"),
                            t.require_column("posterior_variance"), t.require_column("prior")};
  std::vector<PosteriorEstimate> out;
  for (std::size_t line = 0; line < t.rows.size(); ++line) {
    const auto& r = t.rows[line];
    auto bad = [&](const char* what) {
      return ValidationError(fmt::format("{}: line {}: bad {}", path.string(), line + 1, what));
    };
    if (r.size() < t.header.size()) throw bad("row length");
    PosteriorEstimate p;
    p.teacher_id = r[c[0]];
    auto s = parse_subject(r[c[1]]);
    if (!s) throw bad("subject");
    p.subject = *s;
    auto th = parse_double(r[c[2]]), se = parse_double(r[c[3]]), ts = parse_double(r[c[4]]), pv = parse_double(r[c[5]]);
    if (!th || !se || !ts || !pv) throw bad("numeric field");
    p.theta_hat = *th;
    p.se = *se;
    p.theta_star = *ts;
    p.posterior_variance = *pv;
    if (r[c[6]] == "gaussian")
      p.prior = PriorKind::gaussian;
    else if (r[c[6]] == "deconvolved")
      p.prior = PriorKind::deconvolved;
    else
      throw bad("prior");
    out.push_back(std::move(p));
  }
  return out;
}

void write_density(const std::filesystem::path& path, const DiscretePrior& prior, char delimiter) {
  Table t;
  t.header = {"grid", "g", "se"};
  for (Index k = 0; k < prior.grid.size(); ++k)
    t.rows.push_back({format_double(prior.grid(k)), format_double(prior.g(k)),
                      prior.g_se.size() == prior.g.size() ? format_double(prior.g_se(k)) : std::string()});
  write_table(path, t, delimiter);
}

}  // namespace gradegap

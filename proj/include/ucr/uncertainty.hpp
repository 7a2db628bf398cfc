#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>

#include "ucr/autodiff.hpp"
#include "ucr/matrix.hpp"
#include "ucr/rng.hpp"

// Uncertainty-aware contrastive objectives: Gaussian feature-jitter
// augmentation of whitened features, InfoNCE, the uncertainty-regularized
// loss that down-weights the contrastive term when feature fluctuation is
// large, the annealed combination of both, and the dropout comparator used
// in ablations. Plain (value-only) and taped (differentiable) forms share
// the same formulas.

namespace ucr {

enum class AugmentTarget { TargetFeature, SourceImageFeature };

struct NoiseConfig {
    double w1 = 1.0;  // scale on alpha's std
    double w2 = 1.0;  // scale on beta's std
    AugmentTarget target = AugmentTarget::TargetFeature;
    std::uint64_t seed = 0;

    void validate() const {
        if (w1 < 0.0 || w2 < 0.0) throw std::invalid_argument("noise scales must be >= 0");
    }
};

// gamma(e) = exp(-gamma0 * e / E), or a fixed constant. gamma0 = +inf is the
// pure-contrastive baseline (gamma identically 0).
struct GammaSchedule {
    enum class Mode { ExponentialAnneal, FixedConstant };
    Mode mode = Mode::ExponentialAnneal;
    double gamma0 = 1.0;
    double fixed_value = 0.0;

    static GammaSchedule exponential(double g0) {
        if (!(g0 > 0.0)) throw std::invalid_argument("gamma0 must be positive (or +inf)");
        return {Mode::ExponentialAnneal, g0, 0.0};
    }
    static GammaSchedule baseline() {
        return {Mode::ExponentialAnneal, std::numeric_limits<double>::infinity(), 0.0};
    }
    static GammaSchedule fixed(double c) {
        if (c < 0.0 || c > 1.0) throw std::invalid_argument("fixed gamma must be in [0,1]");
        return {Mode::FixedConstant, 0.0, c};
    }

    bool is_baseline() const {
        return mode == Mode::ExponentialAnneal && std::isinf(gamma0);
    }
};

inline double gamma_at(const GammaSchedule& s, int epoch, int total_epochs) {
    if (total_epochs < 1) throw std::invalid_argument("total_epochs must be >= 1");
    if (epoch < 0 || epoch > total_epochs)
        throw std::invalid_argument("epoch out of range");
    if (s.mode == GammaSchedule::Mode::FixedConstant) return s.fixed_value;
    if (std::isinf(s.gamma0)) return 0.0;
    return std::exp(-s.gamma0 * static_cast<double>(epoch) /
                    static_cast<double>(total_epochs));
}

struct LossBreakdown {
    double info = 0.0;          // contrastive term on clean features
    double u = 0.0;             // uncertainty-regularized term on jittered features
    double total = 0.0;         // gamma * u + (1 - gamma) * info
    double unified = 0.0;       // same combination with both terms in regularized form
    double gamma = 0.0;
    double sigma_scalar = 0.0;
};

// ---------------------------------------------------------------------------
// feature jittering

// fhat = alpha .* whiten(f) + beta, alpha ~ N(1, (w1*sigma_d)^2),
// beta ~ N(mu_d, (w2*sigma_d)^2), sampled independently per element.
inline Matrix augment(const Matrix& features, const BatchStats& stats,
                      const NoiseConfig& cfg, Rng& rng) {
    cfg.validate();
    if (stats.mu.size() != features.cols)
        throw std::invalid_argument("augment: stats dimension mismatch");
    const Matrix whitened = whiten(features, stats);
    Matrix out(features.rows, features.cols);
    for (std::size_t i = 0; i < features.rows; ++i)
        for (std::size_t j = 0; j < features.cols; ++j) {
            const double alpha = 1.0 + cfg.w1 * stats.sigma[j] * rng.normal();
            const double beta = stats.mu[j] + cfg.w2 * stats.sigma[j] * rng.normal();
            out(i, j) = alpha * whitened(i, j) + beta;
        }
    return out;
}

// Same jitter with the standard-normal draws supplied by the caller, so the
// sampling stays differentiable (reparameterization) and repeatable.
inline ad::Var augment_node(ad::Tape& t, ad::Var features, const ad::StatsVars& st,
                            const NoiseConfig& cfg, const Matrix& eps1,
                            const Matrix& eps2) {
    cfg.validate();
    const Matrix& vf = t.value(features);
    require_shape(eps1, vf.rows, vf.cols, "augment eps1");
    require_shape(eps2, vf.rows, vf.cols, "augment eps2");
    ad::Var whitened = ad::whiten(t, features, st);
    ad::Var alpha = t.add_const(
        t.scale(t.mul_rowvec(t.constant(eps1), st.sigma), cfg.w1), 1.0);
    ad::Var beta = t.add_rowvec(
        t.scale(t.mul_rowvec(t.constant(eps2), st.sigma), cfg.w2), st.mu);
    return t.add(t.mul(alpha, whitened), beta);
}

// ---------------------------------------------------------------------------
// losses

// Batch-wise contrastive loss over pairwise cosine similarities. Row i's
// positive is column i. inv_temperature scales the logits; 1 is the plain
// published form.
inline double info_nce(const Matrix& f_s, const Matrix& f_t,
                       double inv_temperature = 1.0) {
    if (!f_s.same_shape(f_t)) throw std::invalid_argument("info_nce: shape mismatch");
    const std::size_t b = f_s.rows;
    double loss = 0.0;
    std::vector<double> row(b);
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j)
            row[j] = inv_temperature * cosine_sim(f_s.row(i), f_t.row(j));
        loss -= log_softmax_row(row)[i];
    }
    return loss / static_cast<double>(b);
}

inline ad::Var info_nce_node(ad::Tape& t, ad::Var f_s, ad::Var f_t,
                             double inv_temperature = 1.0) {
    ad::Var sims = ad::cosine_matrix(t, f_s, f_t);
    if (inv_temperature != 1.0) sims = t.scale(sims, inv_temperature);
    return t.scale(t.mean_all(t.diag(t.log_softmax_rows(sims))), -1.0);
}

// L_u = L_info(f_s, f_t_hat) / (2 sigma^2) + log(sigma^2) / 2
inline double uncertainty_loss(const Matrix& f_s, const Matrix& f_t_hat, double sigma,
                               double inv_temperature = 1.0) {
    if (!(sigma > 0.0)) throw std::invalid_argument("uncertainty_loss: sigma must be > 0");
    return info_nce(f_s, f_t_hat, inv_temperature) / (2.0 * sigma * sigma) +
           0.5 * std::log(sigma * sigma);
}

inline ad::Var uncertainty_loss_node(ad::Tape& t, ad::Var f_s, ad::Var f_t_hat,
                                     ad::Var sigma_scalar,
                                     double inv_temperature = 1.0) {
    if (!(t.value(sigma_scalar)(0, 0) > 0.0))
        throw std::invalid_argument("uncertainty_loss: sigma must be > 0");
    ad::Var info = info_nce_node(t, f_s, f_t_hat, inv_temperature);
    ad::Var sigma_sq = t.mul(sigma_scalar, sigma_scalar);
    ad::Var weighted = t.div(info, t.scale(sigma_sq, 2.0));
    return t.add(weighted, t.scale(t.log(sigma_sq), 0.5));
}

// Annealed combination, plus the unified rewrite where the plain contrastive
// term is expressed as an uncertainty term at sigma = 1/sqrt(2). The two
// differ by the constant (1 - gamma) * ln(1/2) / 2.
inline LossBreakdown total_loss(const Matrix& f_s, const Matrix& f_t,
                                const Matrix& f_t_hat, double sigma_t, double gamma,
                                double inv_temperature = 1.0) {
    if (gamma < 0.0 || gamma > 1.0)
        throw std::invalid_argument("total_loss: gamma must be in [0,1]");
    LossBreakdown out;
    out.gamma = gamma;
    out.sigma_scalar = sigma_t;
    out.info = info_nce(f_s, f_t, inv_temperature);
    out.u = uncertainty_loss(f_s, f_t_hat, sigma_t, inv_temperature);
    out.total = gamma * out.u + (1.0 - gamma) * out.info;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    out.unified = gamma * out.u +
                  (1.0 - gamma) * uncertainty_loss(f_s, f_t, inv_sqrt2, inv_temperature);
    return out;
}

// ---------------------------------------------------------------------------
// dropout comparator

// Inverted dropout: zero with probability rate, scale survivors by
// 1/(1 - rate); evaluation needs no rescaling.
inline Matrix sample_dropout_mask(std::size_t rows, std::size_t cols, double rate,
                                  Rng& rng) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("dropout rate must be in [0,1)");
    Matrix mask(rows, cols, 1.0);
    if (rate == 0.0) return mask;
    const double keep_scale = 1.0 / (1.0 - rate);
    for (double& v : mask.data) v = rng.bernoulli(rate) ? 0.0 : keep_scale;
    return mask;
}

inline Matrix dropout_mask(const Matrix& features, double rate, Rng& rng) {
    return hadamard(features, sample_dropout_mask(features.rows, features.cols, rate, rng));
}

}  // namespace ucr

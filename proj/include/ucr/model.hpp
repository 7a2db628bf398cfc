#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ucr/autodiff.hpp"
#include "ucr/eval.hpp"
#include "ucr/matrix.hpp"
#include "ucr/rng.hpp"
#include "ucr/synthdata.hpp"
#include "ucr/uncertainty.hpp"

// Toy differentiable retrieval model: image encoder, text encoder, and a
// concat-and-project compositor, trained with plain SGD on the annealed
// uncertainty objective. Deliberately small; the interesting part is the
// loss, not the network.

namespace ucr::model {

// Raised when a step produces non-finite values; carries a diagnostic dump.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Activation { Tanh, Identity };

inline const char* activation_name(Activation a) {
    return a == Activation::Tanh ? "tanh" : "identity";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "tanh") return Activation::Tanh;
    if (s == "identity") return Activation::Identity;
    throw std::invalid_argument("unknown activation: " + s);
}

struct ModelParams {
    Matrix w_img, b_img;   // d_in x d, 1 x d
    Matrix w_txt, b_txt;   // t_in x d, 1 x d
    Matrix w_comp, b_comp; // 2d x d,  1 x d
    Activation activation = Activation::Tanh;
    // Output scale on the nonlinearity: features are scale * tanh(x). Cosine
    // ranking is scale-invariant, but the feature standard deviation is not,
    // and the log-sigma^2 floor of the uncertainty loss needs std to be able
    // to exceed 1 the way unbounded backbone features can.
    double feature_scale = 1.0;

    int d_in() const { return static_cast<int>(w_img.rows); }
    int t_in() const { return static_cast<int>(w_txt.rows); }
    int dim() const { return static_cast<int>(w_img.cols); }

    static ModelParams init(int d_in, int t_in, int d, Activation act, Rng& rng) {
        auto uniform_fan = [&rng](std::size_t fan_in, std::size_t r, std::size_t c) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Matrix m(r, c);
            for (double& v : m.data) v = rng.uniform(-bound, bound);
            return m;
        };
        ModelParams p;
        p.activation = act;
        p.w_img = uniform_fan(d_in, d_in, d);
        p.b_img = uniform_fan(d_in, 1, d);
        p.w_txt = uniform_fan(t_in, t_in, d);
        p.b_txt = uniform_fan(t_in, 1, d);
        p.w_comp = uniform_fan(2 * d, 2 * d, d);
        p.b_comp = uniform_fan(2 * d, 1, d);
        return p;
    }

    std::vector<Matrix*> tensors() {
        return {&w_img, &b_img, &w_txt, &b_txt, &w_comp, &b_comp};
    }
    std::vector<const Matrix*> tensors() const {
        return {&w_img, &b_img, &w_txt, &b_txt, &w_comp, &b_comp};
    }
    static const std::vector<std::string>& tensor_names() {
        static const std::vector<std::string> names{"w_img", "b_img", "w_txt",
                                                    "b_txt", "w_comp", "b_comp"};
        return names;
    }

    bool all_finite() const {
        for (const Matrix* t : tensors())
            if (!ucr::all_finite(*t)) return false;
        return true;
    }
};

struct TrainConfig {
    int epochs = 50;
    int batch_size = 32;
    double lr = 2e-2;
    int lr_decay_epoch = 45;       // 0-based; epochs >= this run at lr / lr_decay_factor
    double lr_decay_factor = 10.0;
    double momentum = 0.0;
    // Logit scale on the cosine similarities inside the training losses.
    // The published form has none (temperature 1), but cosine-bounded logits
    // cap how far the contrastive loss can fall; the trainer defaults to a
    // sharper scale so the baseline can actually drive its loss toward zero.
    double temperature = 0.1;
    int embed_dim = 16;
    Activation activation = Activation::Tanh;
    double feature_scale = 1.0;
    NoiseConfig noise;
    GammaSchedule schedule = GammaSchedule::exponential(1.0);
    bool stop_grad_sigma = false;
    std::optional<double> dropout_rate;
    std::uint64_t seed = 7;
    std::vector<int> eval_ks = {1, 10, 50};

    double inv_temperature() const {
        if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be > 0");
        return 1.0 / temperature;
    }
    void validate() const {
        if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
        if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
        if (lr < 0.0) throw std::invalid_argument("lr must be >= 0");
        if (lr_decay_factor <= 0.0) throw std::invalid_argument("lr_decay_factor must be > 0");
        if (dropout_rate && (*dropout_rate < 0.0 || *dropout_rate >= 1.0))
            throw std::invalid_argument("dropout rate must be in [0,1)");
        if (!(feature_scale > 0.0))
            throw std::invalid_argument("feature_scale must be > 0");
        noise.validate();
        (void)inv_temperature();
    }
};

struct Batch {
    Matrix src;  // B x d_in
    Matrix txt;  // B x t_in
    Matrix tgt;  // B x d_in
};

// ---------------------------------------------------------------------------
// plain forward (evaluation path)

inline Matrix apply_activation(Matrix m, Activation act, double scale) {
    if (act == Activation::Tanh)
        for (double& v : m.data) v = scale * std::tanh(v);
    return m;
}

inline Matrix encode_with(const Matrix& input, const Matrix& w, const Matrix& b,
                          Activation act, double scale) {
    if (input.cols != w.rows)
        throw std::invalid_argument("encoder input dimension mismatch: got " +
                                    std::to_string(input.cols) + ", expected " +
                                    std::to_string(w.rows));
    Matrix out = matmul(input, w);
    for (std::size_t i = 0; i < out.rows; ++i)
        for (std::size_t j = 0; j < out.cols; ++j) out(i, j) += b(0, j);
    return apply_activation(std::move(out), act, scale);
}

inline Matrix encode_images(const ModelParams& p, const Matrix& raw) {
    return encode_with(raw, p.w_img, p.b_img, p.activation, p.feature_scale);
}

inline Matrix encode_text(const ModelParams& p, const Matrix& raw) {
    return encode_with(raw, p.w_txt, p.b_txt, p.activation, p.feature_scale);
}

inline Matrix compose(const ModelParams& p, const Matrix& f_img, const Matrix& f_txt) {
    Matrix cat(f_img.rows, f_img.cols + f_txt.cols);
    for (std::size_t i = 0; i < f_img.rows; ++i) {
        for (std::size_t j = 0; j < f_img.cols; ++j) cat(i, j) = f_img(i, j);
        for (std::size_t j = 0; j < f_txt.cols; ++j) cat(i, f_img.cols + j) = f_txt(i, j);
    }
    return encode_with(cat, p.w_comp, p.b_comp, p.activation, p.feature_scale);
}

// (f_s, f_t): composed query features and target features; the target goes
// through the same image encoder as the source.
inline std::pair<Matrix, Matrix> forward(const ModelParams& p, const Batch& batch) {
    Matrix f_s = compose(p, encode_images(p, batch.src), encode_text(p, batch.txt));
    Matrix f_t = encode_images(p, batch.tgt);
    return {std::move(f_s), std::move(f_t)};
}

// ---------------------------------------------------------------------------
// taped forward + loss graph (training path)

struct LossGraphConfig {
    double gamma = 0.0;
    double inv_temperature = 1.0;
    NoiseConfig noise;
    bool stop_grad_sigma = false;
    Activation activation = Activation::Tanh;
    double feature_scale = 1.0;
    Matrix eps1, eps2;                       // B x d standard-normal draws
    std::optional<Matrix> txt_dropout_mask;  // B x d inverted-dropout mask
    // Frozen statistics snapshots; used by the finite-difference checker to
    // hold the stop-gradient constants fixed across perturbed evaluations.
    const BatchStats* frozen_target_stats = nullptr;
    const BatchStats* frozen_source_stats = nullptr;
};

struct LossGraph {
    ad::Var total, info, u, sigma_scalar;
};

// params order matches ModelParams::tensor_names()
inline LossGraph build_loss_graph(ad::Tape& t, const std::vector<ad::Var>& params,
                                  const Batch& batch, const LossGraphConfig& cfg) {
    if (params.size() != 6) throw std::invalid_argument("expected 6 parameter tensors");
    const ad::Var w_img = params[0], b_img = params[1];
    const ad::Var w_txt = params[2], b_txt = params[3];
    const ad::Var w_comp = params[4], b_comp = params[5];

    auto act = [&](ad::Var v) {
        if (cfg.activation != Activation::Tanh) return v;
        ad::Var y = t.tanh(v);
        return cfg.feature_scale == 1.0 ? y : t.scale(y, cfg.feature_scale);
    };
    auto encode = [&](ad::Var input, ad::Var w, ad::Var b) {
        return act(t.add_rowvec(t.matmul(input, w), b));
    };

    const ad::Var src = t.constant(batch.src);
    const ad::Var txt = t.constant(batch.txt);
    const ad::Var tgt = t.constant(batch.tgt);

    ad::Var f_img = encode(src, w_img, b_img);
    ad::Var f_txt = encode(txt, w_txt, b_txt);
    if (cfg.txt_dropout_mask) f_txt = t.mul(f_txt, t.constant(*cfg.txt_dropout_mask));
    const ad::Var f_s = encode(t.concat_cols(f_img, f_txt), w_comp, b_comp);
    const ad::Var f_t = encode(tgt, w_img, b_img);

    const auto target_stats =
        ad::batch_stats(t, f_t, cfg.stop_grad_sigma, cfg.frozen_target_stats);

    LossGraph out;
    out.sigma_scalar = target_stats.sigma_scalar;
    out.info = info_nce_node(t, f_s, f_t, cfg.inv_temperature);

    if (cfg.noise.target == AugmentTarget::TargetFeature) {
        const ad::Var f_t_hat =
            augment_node(t, f_t, target_stats, cfg.noise, cfg.eps1, cfg.eps2);
        out.u = uncertainty_loss_node(t, f_s, f_t_hat, target_stats.sigma_scalar,
                                      cfg.inv_temperature);
    } else {
        // jitter the source image feature instead; the composed query built
        // from it faces the clean targets
        const auto source_stats =
            ad::batch_stats(t, f_img, cfg.stop_grad_sigma, cfg.frozen_source_stats);
        const ad::Var f_img_hat =
            augment_node(t, f_img, source_stats, cfg.noise, cfg.eps1, cfg.eps2);
        const ad::Var f_s_hat = encode(t.concat_cols(f_img_hat, f_txt), w_comp, b_comp);
        out.u = uncertainty_loss_node(t, f_s_hat, f_t, target_stats.sigma_scalar,
                                      cfg.inv_temperature);
    }

    out.total = t.add(t.scale(out.u, cfg.gamma), t.scale(out.info, 1.0 - cfg.gamma));
    return out;
}

// Statistics of the clean forward pass at the current parameters: what the
// stop-gradient graph inserts as constants, and what a finite-difference
// check of that graph must hold fixed across perturbed evaluations.
struct FrozenStats {
    BatchStats target, source;
};

inline FrozenStats frozen_stats_for(const ModelParams& p, const Batch& batch) {
    return {compute_stats(encode_images(p, batch.tgt)),
            compute_stats(encode_images(p, batch.src))};
}

// ---------------------------------------------------------------------------
// SGD training

inline double effective_lr(const TrainConfig& cfg, int epoch) {
    return epoch >= cfg.lr_decay_epoch ? cfg.lr / cfg.lr_decay_factor : cfg.lr;
}

inline LossBreakdown train_step(ModelParams& params, const Batch& batch,
                                const TrainConfig& cfg, int epoch, Rng& noise_rng,
                                Rng& dropout_rng,
                                std::vector<Matrix>* momentum_buf = nullptr) {
    const double gamma = gamma_at(cfg.schedule, epoch, cfg.epochs);
    const std::size_t b = batch.src.rows;
    const std::size_t d = params.w_img.cols;

    LossGraphConfig gcfg;
    gcfg.gamma = gamma;
    gcfg.inv_temperature = cfg.inv_temperature();
    gcfg.noise = cfg.noise;
    gcfg.stop_grad_sigma = cfg.stop_grad_sigma;
    gcfg.activation = params.activation;
    gcfg.feature_scale = params.feature_scale;
    gcfg.eps1 = Matrix(b, d);
    gcfg.eps2 = Matrix(b, d);
    for (std::size_t i = 0; i < b * d; ++i) {
        gcfg.eps1.data[i] = noise_rng.normal();
        gcfg.eps2.data[i] = noise_rng.normal();
    }
    if (cfg.dropout_rate && *cfg.dropout_rate > 0.0)
        gcfg.txt_dropout_mask = sample_dropout_mask(b, d, *cfg.dropout_rate, dropout_rng);

    LossBreakdown loss;
    loss.gamma = gamma;
    loss.info = loss.u = loss.total = loss.sigma_scalar =
        std::numeric_limits<double>::quiet_NaN();
    auto dump = [&](const std::string& what) {
        std::ostringstream os;
        os << what << " at epoch " << epoch << " (gamma " << gamma << ", lr "
           << effective_lr(cfg, epoch) << "): info " << loss.info << ", u " << loss.u
           << ", total " << loss.total << ", sigma " << loss.sigma_scalar;
        const auto& names = ModelParams::tensor_names();
        auto ts = params.tensors();
        for (std::size_t i = 0; i < ts.size(); ++i) {
            double mx = 0.0;
            for (double v : ts[i]->data) mx = std::max(mx, std::abs(v));
            os << ", |" << names[i] << "|max " << mx;
        }
        return os.str();
    };

    ad::Tape tape;
    std::vector<ad::Var> param_vars;
    for (Matrix* m : params.tensors()) param_vars.push_back(tape.leaf(*m));
    LossGraph graph;
    try {
        graph = build_loss_graph(tape, param_vars, batch, gcfg);
    } catch (const std::domain_error& e) {
        // non-finite intermediates trip the graph's own checks
        throw NumericError(dump(e.what()));
    }

    loss.info = tape.value(graph.info)(0, 0);
    loss.u = tape.value(graph.u)(0, 0);
    loss.total = tape.value(graph.total)(0, 0);
    loss.sigma_scalar = tape.value(graph.sigma_scalar)(0, 0);
    loss.unified = gamma * loss.u + (1.0 - gamma) * (loss.info - 0.5 * std::log(2.0));
    if (!std::isfinite(loss.total)) throw NumericError(dump("non-finite loss"));

    tape.backward(graph.total);

    const double lr = effective_lr(cfg, epoch);
    auto tensors = params.tensors();
    if (momentum_buf && momentum_buf->empty())
        for (Matrix* m : tensors) momentum_buf->emplace_back(m->rows, m->cols);
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const Matrix& g = tape.grad(param_vars[i]);
        if (!ucr::all_finite(g)) throw NumericError(dump("non-finite gradient"));
        if (cfg.momentum != 0.0 && momentum_buf) {
            Matrix& v = (*momentum_buf)[i];
            for (std::size_t k = 0; k < v.data.size(); ++k) {
                v.data[k] = cfg.momentum * v.data[k] + g.data[k];
                tensors[i]->data[k] -= lr * v.data[k];
            }
        } else {
            for (std::size_t k = 0; k < g.data.size(); ++k)
                tensors[i]->data[k] -= lr * g.data[k];
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// epoch loop with per-epoch held-out recall

struct EpochTrace {
    int epoch = 0;
    double gamma = 0.0;
    double lr = 0.0;
    LossBreakdown loss;  // averaged over the epoch's steps
    std::map<int, double> recall_at;
};

struct EvalOutputs {
    eval::RecallReport all, coarse, fine;
};

inline Batch gather_batch(const synth::Dataset& ds,
                          const std::vector<synth::Triplet>& triplets,
                          const std::vector<std::size_t>& idx) {
    const int d_in = ds.spec.d_in, t_in = ds.spec.t_in;
    Batch b{Matrix(idx.size(), d_in), Matrix(idx.size(), t_in), Matrix(idx.size(), d_in)};
    for (std::size_t r = 0; r < idx.size(); ++r) {
        const auto& tr = triplets[idx[r]];
        for (int j = 0; j < d_in; ++j) b.src(r, j) = tr.source_vec[j];
        for (int j = 0; j < t_in; ++j) b.txt(r, j) = tr.text_vec[j];
        const auto tgt = ds.gallery.row(static_cast<std::size_t>(tr.target_id));
        for (int j = 0; j < d_in; ++j) b.tgt(r, j) = tgt[j];
    }
    return b;
}

inline EvalOutputs evaluate(const ModelParams& params, const synth::Dataset& ds,
                            const std::vector<int>& ks) {
    const Matrix gallery_features = encode_images(params, ds.gallery);

    auto rank_queries = [&](const std::vector<synth::Triplet>& queries) {
        std::vector<std::size_t> idx(queries.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        std::vector<std::vector<int>> ranked;
        if (queries.empty()) return ranked;
        Batch b = gather_batch(ds, queries, idx);
        Matrix f_s = compose(params, encode_images(params, b.src), encode_text(params, b.txt));
        ranked.reserve(queries.size());
        for (std::size_t q = 0; q < queries.size(); ++q)
            ranked.push_back(eval::rank(f_s.row(q), gallery_features));
        return ranked;
    };

    auto report_for = [&](const std::vector<synth::Triplet>& queries,
                          eval::Stratum stratum, bool with_any) {
        auto ranked = rank_queries(queries);
        std::vector<int> targets;
        std::vector<std::vector<int>> valid_sets;
        for (const auto& q : queries) {
            targets.push_back(q.target_id);
            valid_sets.push_back(q.valid_targets);
        }
        eval::RecallReport rep = eval::recall_at_k(ranked, targets, ks, stratum);
        if (with_any) rep.per_k_any = eval::recall_any_valid(ranked, valid_sets, ks);
        return rep;
    };

    auto [coarse_queries, fine_queries] = synth::coarse_split(ds.eval_queries);
    EvalOutputs out;
    out.all = report_for(ds.eval_queries, eval::Stratum::All, false);
    out.coarse = report_for(coarse_queries, eval::Stratum::CoarseOnly, true);
    out.fine = report_for(fine_queries, eval::Stratum::FineOnly, false);
    return out;
}

struct TrainResult {
    ModelParams params;
    std::vector<EpochTrace> trace;
};

inline TrainResult train(const TrainConfig& cfg, const synth::Dataset& ds,
                         std::ostream* log = nullptr) {
    cfg.validate();
    Rng base(cfg.seed);
    Rng init_rng = base.stream(0x696e6974);
    Rng shuffle_rng = base.stream(0x73687566);
    Rng dropout_rng = base.stream(0x64726f70);
    Rng noise_rng = Rng(cfg.noise.seed).stream(0x6e6f6973);

    TrainResult result;
    result.params = ModelParams::init(ds.spec.d_in, ds.spec.t_in, cfg.embed_dim,
                                      cfg.activation, init_rng);
    result.params.feature_scale = cfg.feature_scale;
    std::vector<Matrix> momentum_buf;

    std::vector<std::size_t> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);

        // Batches keep target ids unique: a repeated target makes its own
        // positive column ambiguous (an exact ln 2 floor per collision), which
        // is batching noise, not signal. Triplets displaced by the rule spill
        // into later batches of the same epoch.
        std::vector<std::vector<std::size_t>> batches;
        std::vector<std::size_t> remaining = order;
        while (!remaining.empty()) {
            std::vector<std::size_t> taken;
            std::vector<std::size_t> deferred;
            std::set<int> seen_targets;
            for (std::size_t idx : remaining) {
                const int tgt = ds.train[idx].target_id;
                if (taken.size() <
                        static_cast<std::size_t>(cfg.batch_size) &&
                    seen_targets.insert(tgt).second)
                    taken.push_back(idx);
                else
                    deferred.push_back(idx);
            }
            // a lone leftover cannot form a contrastive pair; drop it
            if (taken.size() >= 2) batches.push_back(std::move(taken));
            remaining = std::move(deferred);
        }

        LossBreakdown sum;
        int steps = 0;
        for (const auto& idx : batches) {
            Batch batch = gather_batch(ds, ds.train, idx);
            LossBreakdown step = train_step(result.params, batch, cfg, epoch,
                                            noise_rng, dropout_rng, &momentum_buf);
            sum.info += step.info;
            sum.u += step.u;
            sum.total += step.total;
            sum.unified += step.unified;
            sum.sigma_scalar += step.sigma_scalar;
            sum.gamma = step.gamma;
            ++steps;
        }

        if (steps == 0)
            throw std::invalid_argument("train: dataset yields no batch of size >= 2");

        EpochTrace tr;
        tr.epoch = epoch;
        tr.gamma = sum.gamma;
        tr.lr = effective_lr(cfg, epoch);
        tr.loss.info = sum.info / steps;
        tr.loss.u = sum.u / steps;
        tr.loss.total = sum.total / steps;
        tr.loss.unified = sum.unified / steps;
        tr.loss.sigma_scalar = sum.sigma_scalar / steps;
        tr.loss.gamma = sum.gamma;
        tr.recall_at = evaluate(result.params, ds, cfg.eval_ks).all.per_k;
        result.trace.push_back(tr);
        if (log) {
            *log << "epoch " << epoch << " gamma " << tr.gamma << " lr " << tr.lr
                 << " total " << tr.loss.total << " info " << tr.loss.info;
            for (auto [k, r] : tr.recall_at) *log << " R@" << k << " " << r;
            *log << '\n';
        }
    }
    return result;
}

}  // namespace ucr::model

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "flowage/error.hpp"
#include "flowage/flow.hpp"
#include "flowage/random.hpp"

namespace flowage {

/// How ages enter the loss: standardized by the training mean/std, or raw years.
enum class AgeUnits { normalized, years };

inline const char* to_string(AgeUnits u) noexcept { return u == AgeUnits::normalized ? "normalized" : "years"; }

inline AgeUnits age_units_from_string(const std::string& s)
{
    if (s == "normalized") return AgeUnits::normalized;
    if (s == "years") return AgeUnits::years;
    throw ValidationError("unknown age_units '" + s + "' (expected normalized or years)");
}

struct TrainConfig {
    double sigma = 0.14;
    std::size_t epochs = 20000;
    double learning_rate = 1e-4;
    double weight_decay = 1e-5;
    std::size_t batch = 0; // 0 = full batch
    std::uint64_t seed = 0;
    bool grad_check = false;
    std::size_t record_every = 1;
    AgeUnits age_units = AgeUnits::normalized;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const
    {
        std::string bad;
        if (!(sigma > 0.0) || !std::isfinite(sigma)) bad += " sigma > 0;";
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) bad += " learning_rate > 0;";
        if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) bad += " weight_decay >= 0;";
        if (record_every < 1) bad += " record_every >= 1;";
        if (!(beta1 >= 0.0 && beta1 < 1.0)) bad += " 0 <= beta1 < 1;";
        if (!(beta2 >= 0.0 && beta2 < 1.0)) bad += " 0 <= beta2 < 1;";
        if (!(epsilon > 0.0)) bad += " epsilon > 0;";
        if (!bad.empty()) throw ValidationError("invalid train config, violated:" + bad);
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Per-epoch loss decomposition. z_norm_mean is the mean of ‖z‖², so
/// loss = age_mse / (2 sigma²) + z_norm_mean / 2 - log_det_mean.
struct TrainRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double age_mse = 0.0;
    double z_norm_mean = 0.0;
    double log_det_mean = 0.0;
};

/// Negative log-likelihood of one sample:
/// ½(σ⁻²(a - a_gt)² + ‖z‖²) - log_jac, where log_jac is the log-determinant
/// reported by flow_forward (the log-volume change from coordinates to latent).
inline double nll_loss(double a, const Eigen::VectorXd& z, double a_gt, double sigma, double log_jac)
{
    detail::require(sigma > 0.0, "nll_loss: sigma must be positive");
    const double d = a - a_gt;
    const double loss = 0.5 * (d * d / (sigma * sigma) + z.squaredNorm()) - log_jac;
    if (!std::isfinite(loss)) throw NumericalError("nll_loss: non-finite loss");
    return loss;
}

struct LossTerms {
    double loss = 0.0;
    double age_mse = 0.0;
    double z_norm_mean = 0.0;
    double log_det_mean = 0.0;
};

namespace detail {

struct CouplingTape {
    Eigen::MatrixXd input;                    // u
    std::vector<Eigen::MatrixXd> activations; // MLP layer inputs + output
    Eigen::ArrayXXd clamped;                  // soft-clamped scale logits
};

inline LossTerms loss_terms(const Eigen::MatrixXd& y, const Eigen::VectorXd& log_det, const Eigen::VectorXd& targets,
                            double sigma)
{
    const auto b = static_cast<double>(y.cols());
    LossTerms t;
    double loss = 0.0;
    for (Eigen::Index j = 0; j < y.cols(); ++j) {
        const Eigen::VectorXd z = y.col(j).tail(y.rows() - 1);
        loss += nll_loss(y(0, j), z, targets(j), sigma, log_det(j));
        const double d = y(0, j) - targets(j);
        t.age_mse += d * d;
        t.z_norm_mean += z.squaredNorm();
        t.log_det_mean += log_det(j);
    }
    t.loss = loss / b;
    t.age_mse /= b;
    t.z_norm_mean /= b;
    t.log_det_mean /= b;
    return t;
}

} // namespace detail

/// Mean loss over the batch and its gradient with respect to all trainable parameters,
/// in visit_parameters order. Columns of x are coordinate vectors; targets are ages in
/// the model's latent units.
inline std::pair<LossTerms, Eigen::VectorXd> loss_and_gradient(const FlowModel& model, const Eigen::MatrixXd& x,
                                                               const Eigen::VectorXd& targets, double sigma)
{
    detail::require_rows(x, model.n_sub(), "loss_and_gradient");
    detail::require(x.cols() == targets.size() && x.cols() > 0, "loss_and_gradient: batch/target size mismatch");

    // Forward pass, recording what the backward pass needs.
    std::vector<detail::CouplingTape> tapes;
    Eigen::MatrixXd h = x;
    Eigen::VectorXd log_det = Eigen::VectorXd::Zero(x.cols());
    std::size_t coupling_index = 0;
    for (const auto& step : model.steps) {
        if (const auto* c = std::get_if<CouplingLayer>(&step)) {
            const auto n1 = static_cast<Eigen::Index>(c->transformed);
            const auto n2 = static_cast<Eigen::Index>(c->conditioner);
            detail::CouplingTape tape;
            tape.input = h;
            const Eigen::MatrixXd out = c->net.forward(h.bottomRows(n2), &tape.activations);
            detail::require_finite_matrix(out, coupling_index, "loss_and_gradient");
            tape.clamped = detail::soft_clamp(out.topRows(n1).array(), c->scale_clamp);
            h.topRows(n1) = (tape.clamped.exp() * h.topRows(n1).array() + out.bottomRows(n1).array()).matrix();
            log_det += tape.clamped.colwise().sum().transpose().matrix();
            detail::require_finite_matrix(h, coupling_index, "loss_and_gradient");
            tapes.push_back(std::move(tape));
            ++coupling_index;
        } else {
            h = std::get<MixingTransform>(step).apply(h);
        }
    }

    const LossTerms terms = detail::loss_terms(h, log_det, targets, sigma);

    // dL/dy and dL/dlog_det for each sample.
    const double inv_b = 1.0 / static_cast<double>(x.cols());
    Eigen::MatrixXd g = h * inv_b;
    g.row(0) = (h.row(0) - targets.transpose()) * (inv_b / (sigma * sigma));
    const double g_log_det = -inv_b;

    std::vector<std::vector<Dense>> layer_grads(tapes.size());
    for (auto it = model.steps.rbegin(); it != model.steps.rend(); ++it) {
        if (const auto* m = std::get_if<MixingTransform>(&*it)) {
            g = m->apply_inverse(g); // transpose of an orthogonal map / permutation
            continue;
        }
        const auto& c = std::get<CouplingLayer>(*it);
        const std::size_t idx = --coupling_index;
        const auto& tape = tapes[idx];
        const auto n1 = static_cast<Eigen::Index>(c.transformed);
        const auto n2 = static_cast<Eigen::Index>(c.conditioner);

        const Eigen::ArrayXXd scale = tape.clamped.exp();
        const Eigen::ArrayXXd g_w1 = g.topRows(n1).array();
        Eigen::ArrayXXd g_clamped = g_w1 * scale * tape.input.topRows(n1).array() + g_log_det;
        const Eigen::ArrayXXd ratio = tape.clamped / c.scale_clamp; // tanh(s / c)
        Eigen::MatrixXd g_out(2 * n1, g.cols());
        g_out.topRows(n1) = (g_clamped * (1.0 - ratio.square())).matrix();
        g_out.bottomRows(n1) = g_w1.matrix();

        // Backward through the network.
        auto& grads = layer_grads[idx];
        grads.resize(c.net.layers.size());
        Eigen::MatrixXd g_h = std::move(g_out);
        for (std::size_t l = c.net.layers.size(); l-- > 0;) {
            const Eigen::MatrixXd& act = tape.activations[l];
            grads[l].weight = g_h * act.transpose();
            grads[l].bias = g_h.rowwise().sum();
            Eigen::MatrixXd g_in = c.net.layers[l].weight.transpose() * g_h;
            if (l > 0) g_in = g_in.cwiseProduct((act.array() > 0.0).cast<double>().matrix());
            g_h = std::move(g_in);
        }

        Eigen::MatrixXd g_u(g.rows(), g.cols());
        g_u.topRows(n1) = (g_w1 * scale).matrix();
        g_u.bottomRows(n2) = g.bottomRows(n2) + g_h;
        g = std::move(g_u);
    }

    Eigen::VectorXd flat(static_cast<Eigen::Index>(model.parameter_count()));
    Eigen::Index offset = 0;
    std::size_t tensor = 0;
    std::vector<const double*> sources;
    std::vector<std::size_t> sizes;
    for (const auto& grads : layer_grads) {
        for (const auto& d : grads) {
            sources.push_back(d.weight.data());
            sizes.push_back(static_cast<std::size_t>(d.weight.size()));
            sources.push_back(d.bias.data());
            sizes.push_back(static_cast<std::size_t>(d.bias.size()));
        }
    }
    visit_parameters(model, [&](const std::string& path, const double*, std::size_t n, bool) {
        detail::require(sizes[tensor] == n, "loss_and_gradient: gradient layout mismatch at " + path);
        const Eigen::Map<const Eigen::VectorXd> src(sources[tensor], static_cast<Eigen::Index>(n));
        if (!src.allFinite()) throw NumericalError("non-finite gradient in " + path);
        flat.segment(offset, static_cast<Eigen::Index>(n)) = src;
        offset += static_cast<Eigen::Index>(n);
        ++tensor;
    });
    return {terms, flat};
}

/// Mean loss only (forward pass).
inline LossTerms evaluate_loss(const FlowModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& targets,
                               double sigma)
{
    const FlowBatch r = flow_forward_batch(model, x);
    return detail::loss_terms(r.values, r.log_det, targets, sigma);
}

/// Largest relative error between the analytic gradient and fourth-order central finite
/// differences over `n_probe` parameters (all of them when n_probe == 0).
inline double gradient_check(const FlowModel& model, const Eigen::MatrixXd& x, const Eigen::VectorXd& targets,
                             double sigma, std::size_t n_probe = 0, std::uint64_t seed = 0, double step = 1e-5)
{
    const Eigen::VectorXd analytic = loss_and_gradient(model, x, targets, sigma).second;
    const Eigen::VectorXd theta = flatten_parameters(model);
    std::vector<Eigen::Index> probes(static_cast<std::size_t>(theta.size()));
    std::iota(probes.begin(), probes.end(), Eigen::Index{0});
    if (n_probe > 0 && n_probe < probes.size()) {
        Rng rng(seed, 0x67726164ULL);
        for (std::size_t i = 0; i < n_probe; ++i) {
            const auto j = i + static_cast<std::size_t>(rng.next_u64() % (probes.size() - i));
            std::swap(probes[i], probes[j]);
        }
        probes.resize(n_probe);
    }

    FlowModel probe = model;
    double worst = 0.0;
    for (const Eigen::Index k : probes) {
        Eigen::VectorXd t = theta;
        auto loss_at = [&](double offset) {
            t(k) = theta(k) + offset;
            assign_parameters(probe, t);
            return evaluate_loss(probe, x, targets, sigma).loss;
        };
        const double d1 = loss_at(step) - loss_at(-step);
        const double d2 = loss_at(2.0 * step) - loss_at(-2.0 * step);
        const double numeric = (8.0 * d1 - d2) / (12.0 * step);
        const double denom = std::max({std::abs(numeric), std::abs(analytic(k)), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic(k)) / denom);
    }
    return worst;
}

/// AdamW with decoupled weight decay applied to a masked subset of parameters.
class AdamW {
public:
    AdamW(std::size_t n, double lr, double weight_decay, double beta1, double beta2, double eps,
          std::vector<bool> decay_mask)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps),
          m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
          v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))), decay_mask_(std::move(decay_mask))
    {
    }

    void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad)
    {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (Eigen::Index i = 0; i < params.size(); ++i) {
            if (decay_mask_[static_cast<std::size_t>(i)]) params(i) -= lr_ * wd_ * params(i);
            m_(i) = beta1_ * m_(i) + (1.0 - beta1_) * grad(i);
            v_(i) = beta2_ * v_(i) + (1.0 - beta2_) * grad(i) * grad(i);
            const double m_hat = m_(i) / bc1;
            const double v_hat = v_(i) / bc2;
            params(i) -= lr_ * m_hat / (std::sqrt(v_hat) + eps_);
        }
    }

    std::size_t steps() const noexcept { return t_; }

private:
    double lr_, wd_, beta1_, beta2_, eps_;
    Eigen::VectorXd m_, v_;
    std::vector<bool> decay_mask_;
    std::size_t t_ = 0;
};

/// Weights decay, biases do not. Mixing transforms are not parameters at all.
inline std::vector<bool> weight_decay_mask(const FlowModel& model)
{
    std::vector<bool> mask;
    mask.reserve(model.parameter_count());
    visit_parameters(model, [&](const std::string&, const double*, std::size_t n, bool is_weight) {
        mask.insert(mask.end(), n, is_weight);
    });
    return mask;
}

inline AgeNorm fit_age_norm(const Eigen::VectorXd& ages, AgeUnits units)
{
    if (units == AgeUnits::years) return {0.0, 1.0};
    const double mean = ages.mean();
    const double var = (ages.array() - mean).square().sum() / static_cast<double>(ages.size() - 1);
    detail::require(var > 0.0, "train: training ages have zero variance");
    return {mean, std::sqrt(var)};
}

struct TrainResult {
    FlowModel model;
    std::vector<TrainRecord> records;
};

/// Maximum-likelihood training; only the forward direction of the flow is evaluated.
/// Columns of coords are training samples, ages are in years.
inline TrainResult train(FlowModel model, const Eigen::MatrixXd& coords, const Eigen::VectorXd& ages,
                         const TrainConfig& cfg,
                         const std::function<void(const TrainRecord&, const FlowModel&)>& on_record = {})
{
    cfg.validate();
    detail::require_rows(coords, model.n_sub(), "train");
    detail::require(coords.cols() == ages.size(), "train: coordinate/age count mismatch");
    detail::require(coords.cols() >= 2, "train: need at least 2 samples");
    detail::require(coords.allFinite(), "train: non-finite coordinates");
    detail::require(ages.allFinite(), "train: non-finite ages");

    model.age_norm = fit_age_norm(ages, cfg.age_units);
    const Eigen::VectorXd targets = (ages.array() - model.age_norm.mean) / model.age_norm.std;

    if (cfg.grad_check) {
        const Eigen::Index n = std::min<Eigen::Index>(coords.cols(), 16);
        const double err = gradient_check(model, coords.leftCols(n), targets.head(n), cfg.sigma, 64, cfg.seed);
        if (!(err <= 1e-4)) {
            throw NumericalError("train: gradient check failed, max relative error " + std::to_string(err));
        }
    }

    Eigen::VectorXd theta = flatten_parameters(model);
    AdamW opt(static_cast<std::size_t>(theta.size()), cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2,
              cfg.epsilon, weight_decay_mask(model));

    const auto n = static_cast<std::size_t>(coords.cols());
    const std::size_t batch = (cfg.batch == 0 || cfg.batch >= n) ? n : cfg.batch;
    std::vector<Eigen::Index> order(n);
    std::iota(order.begin(), order.end(), Eigen::Index{0});

    TrainResult result;
    std::size_t last_good = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (batch < n) {
            Rng rng(cfg.seed, epoch);
            for (std::size_t i = n - 1; i > 0; --i) {
                const auto j = static_cast<std::size_t>(rng.next_u64() % (i + 1));
                std::swap(order[i], order[j]);
            }
        }

        LossTerms sum;
        for (std::size_t start = 0; start < n; start += batch) {
            const std::size_t count = std::min(batch, n - start);
            std::pair<LossTerms, Eigen::VectorXd> lg;
            try {
                if (count == n) {
                    lg = loss_and_gradient(model, coords, targets, cfg.sigma);
                } else {
                    Eigen::MatrixXd xb(coords.rows(), static_cast<Eigen::Index>(count));
                    Eigen::VectorXd tb(static_cast<Eigen::Index>(count));
                    for (std::size_t k = 0; k < count; ++k) {
                        xb.col(static_cast<Eigen::Index>(k)) = coords.col(order[start + k]);
                        tb(static_cast<Eigen::Index>(k)) = targets(order[start + k]);
                    }
                    lg = loss_and_gradient(model, xb, tb, cfg.sigma);
                }
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                                     ", last good epoch " + std::to_string(last_good) + ")");
            }
            const double w = static_cast<double>(count) / static_cast<double>(n);
            sum.loss += w * lg.first.loss;
            sum.age_mse += w * lg.first.age_mse;
            sum.z_norm_mean += w * lg.first.z_norm_mean;
            sum.log_det_mean += w * lg.first.log_det_mean;

            opt.step(theta, lg.second);
            if (!theta.allFinite()) {
                throw NumericalError("train: non-finite parameters after update in epoch " + std::to_string(epoch) +
                                     ", last good epoch " + std::to_string(last_good));
            }
            assign_parameters(model, theta);
        }
        if (!std::isfinite(sum.loss)) {
            throw NumericalError("train: non-finite loss in epoch " + std::to_string(epoch) + ", last good epoch " +
                                 std::to_string(last_good));
        }
        last_good = epoch;
        if (epoch % cfg.record_every == 0 || epoch == cfg.epochs) {
            result.records.push_back({epoch, sum.loss, sum.age_mse, sum.z_norm_mean, sum.log_det_mean});
            if (on_record) on_record(result.records.back(), model);
        }
    }
    result.model = std::move(model);
    return result;
}

} // namespace flowage

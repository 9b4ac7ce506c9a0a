#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "flowage/error.hpp"
#include "flowage/random.hpp"

namespace flowage {

/// Where mixing transforms sit between coupling layers.
///   every_layer:  orthogonal after odd layers, reversal after even layers (1-based).
///   every_second: only after even layers, alternating reversal and orthogonal.
enum class MixingSchedule { every_layer, every_second };

inline const char* to_string(MixingSchedule s) noexcept
{
    return s == MixingSchedule::every_layer ? "every_layer" : "every_second";
}

inline MixingSchedule mixing_schedule_from_string(const std::string& s)
{
    if (s == "every_layer") return MixingSchedule::every_layer;
    if (s == "every_second") return MixingSchedule::every_second;
    throw ValidationError("unknown mixing schedule '" + s + "' (expected every_layer or every_second)");
}

struct FlowConfig {
    std::size_t n_sub = 32;
    std::size_t n_lay = 16;
    std::size_t n_hid = 2;
    std::size_t hidden = 32;
    double scale_clamp = 2.0;
    MixingSchedule mixing = MixingSchedule::every_layer;

    void validate() const
    {
        std::string bad;
        if (n_sub < 2) bad += " n_sub >= 2;";
        if (n_lay < 1) bad += " n_lay >= 1;";
        if (n_hid < 1) bad += " n_hid >= 1;";
        if (hidden < 1) bad += " hidden >= 1;";
        if (!(scale_clamp > 0.0) || !std::isfinite(scale_clamp)) bad += " scale_clamp > 0;";
        if (!bad.empty()) throw ValidationError("invalid flow config, violated:" + bad);
    }

    friend bool operator==(const FlowConfig&, const FlowConfig&) = default;
};

struct Dense {
    Eigen::MatrixXd weight; // out x in
    Eigen::VectorXd bias;
};

/// Fully connected ReLU network; no activation after the last layer.
struct Mlp {
    std::vector<Dense> layers;

    /// Columns of x are samples. If `activations` is given it receives the input of
    /// every layer followed by the network output.
    Eigen::MatrixXd forward(const Eigen::MatrixXd& x, std::vector<Eigen::MatrixXd>* activations = nullptr) const
    {
        Eigen::MatrixXd h = x;
        if (activations) activations->clear();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            if (activations) activations->push_back(h);
            Eigen::MatrixXd next = layers[i].weight * h;
            next.colwise() += layers[i].bias;
            if (i + 1 < layers.size()) next = next.cwiseMax(0.0);
            h = std::move(next);
        }
        if (activations) activations->push_back(h);
        return h;
    }

    std::size_t parameter_count() const noexcept
    {
        std::size_t n = 0;
        for (const auto& d : layers) n += static_cast<std::size_t>(d.weight.size() + d.bias.size());
        return n;
    }
};

/// Affine coupling layer. The first `transformed` entries are scaled and shifted by
/// functions of the remaining `conditioner` entries, which pass through unchanged.
/// One two-headed network emits the scale logits (first half of its output) and the
/// translations (second half).
struct CouplingLayer {
    Mlp net;
    std::size_t transformed = 0;
    std::size_t conditioner = 0;
    double scale_clamp = 2.0;

    std::size_t size() const noexcept { return transformed + conditioner; }
};

enum class MixingKind { reverse, orthogonal };

/// Fixed, volume-preserving transform between coupling layers.
struct MixingTransform {
    MixingKind kind = MixingKind::reverse;
    Eigen::MatrixXd matrix; // orthogonal only
    std::uint64_t seed = 0;

    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const
    {
        if (kind == MixingKind::reverse) return x.colwise().reverse();
        return matrix * x;
    }

    Eigen::MatrixXd apply_inverse(const Eigen::MatrixXd& y) const
    {
        if (kind == MixingKind::reverse) return y.colwise().reverse();
        return matrix.transpose() * y;
    }
};

using FlowStep = std::variant<CouplingLayer, MixingTransform>;

/// Normalization of the age slot: years = a * std + mean.
struct AgeNorm {
    double mean = 0.0;
    double std = 1.0;

    double to_years(double a) const noexcept { return a * std + mean; }
    double to_normalized(double years) const noexcept { return (years - mean) / std; }

    friend bool operator==(const AgeNorm&, const AgeNorm&) = default;
};

/// Invertible map from subspace coordinates to the latent code [a, z].
struct FlowModel {
    FlowConfig config;
    std::uint64_t seed = 0;
    std::vector<FlowStep> steps;
    AgeNorm age_norm;

    static constexpr std::size_t age_index = 0;

    std::size_t n_sub() const noexcept { return config.n_sub; }

    std::size_t parameter_count() const noexcept
    {
        std::size_t n = 0;
        for (const auto& s : steps)
            if (const auto* c = std::get_if<CouplingLayer>(&s)) n += c->net.parameter_count();
        return n;
    }
};

/// Latent code: slot 0 carries the normalized age, the rest is nuisance variability.
struct LatentCode {
    double a = 0.0;
    Eigen::VectorXd z;

    Eigen::VectorXd to_vector() const
    {
        Eigen::VectorXd y(z.size() + 1);
        y(0) = a;
        y.tail(z.size()) = z;
        return y;
    }

    static LatentCode from_vector(const Eigen::VectorXd& y)
    {
        return LatentCode{y(0), y.tail(y.size() - 1)};
    }
};

/// Batched result: columns are samples, one log-determinant per column.
struct FlowBatch {
    Eigen::MatrixXd values;
    Eigen::VectorXd log_det;
};

struct CouplingResult {
    Eigen::VectorXd values;
    double log_det = 0.0;
};

namespace detail {

inline void require_finite_matrix(const Eigen::MatrixXd& m, std::size_t layer, const char* where)
{
    if (!m.allFinite()) {
        throw NumericalError(std::string(where) + ": non-finite activations in coupling layer " +
                             std::to_string(layer));
    }
}

inline Eigen::ArrayXXd soft_clamp(const Eigen::ArrayXXd& s, double c) { return c * (s / c).tanh(); }

// Coupling layer evaluated on a batch; `layer_index` is only used in error messages.
inline FlowBatch coupling_forward_batch(const CouplingLayer& layer, const Eigen::MatrixXd& u,
                                        std::size_t layer_index = 0)
{
    const auto n1 = static_cast<Eigen::Index>(layer.transformed);
    const auto n2 = static_cast<Eigen::Index>(layer.conditioner);
    const Eigen::MatrixXd out = layer.net.forward(u.bottomRows(n2));
    require_finite_matrix(out, layer_index, "coupling_forward");
    const Eigen::ArrayXXd s = soft_clamp(out.topRows(n1).array(), layer.scale_clamp);

    FlowBatch r;
    r.values.resize(u.rows(), u.cols());
    r.values.topRows(n1) = (s.exp() * u.topRows(n1).array() + out.bottomRows(n1).array()).matrix();
    r.values.bottomRows(n2) = u.bottomRows(n2);
    r.log_det = s.colwise().sum().transpose().matrix();
    require_finite_matrix(r.values, layer_index, "coupling_forward");
    return r;
}

inline FlowBatch coupling_inverse_batch(const CouplingLayer& layer, const Eigen::MatrixXd& w,
                                        std::size_t layer_index = 0)
{
    const auto n1 = static_cast<Eigen::Index>(layer.transformed);
    const auto n2 = static_cast<Eigen::Index>(layer.conditioner);
    const Eigen::MatrixXd out = layer.net.forward(w.bottomRows(n2));
    require_finite_matrix(out, layer_index, "coupling_inverse");
    const Eigen::ArrayXXd s = soft_clamp(out.topRows(n1).array(), layer.scale_clamp);

    FlowBatch r;
    r.values.resize(w.rows(), w.cols());
    r.values.topRows(n1) = ((-s).exp() * (w.topRows(n1).array() - out.bottomRows(n1).array())).matrix();
    r.values.bottomRows(n2) = w.bottomRows(n2);
    r.log_det = -s.colwise().sum().transpose().matrix();
    require_finite_matrix(r.values, layer_index, "coupling_inverse");
    return r;
}

inline void require_rows(const Eigen::MatrixXd& x, std::size_t n, const char* where)
{
    if (static_cast<std::size_t>(x.rows()) != n) {
        throw ValidationError(std::string(where) + ": expected vectors of length " + std::to_string(n) + ", got " +
                              std::to_string(x.rows()));
    }
}

} // namespace detail

inline CouplingResult coupling_forward(const CouplingLayer& layer, const Eigen::VectorXd& u)
{
    detail::require_rows(u, layer.size(), "coupling_forward");
    auto r = detail::coupling_forward_batch(layer, u);
    return {r.values.col(0), r.log_det(0)};
}

inline CouplingResult coupling_inverse(const CouplingLayer& layer, const Eigen::VectorXd& w)
{
    detail::require_rows(w, layer.size(), "coupling_inverse");
    auto r = detail::coupling_inverse_batch(layer, w);
    return {r.values.col(0), r.log_det(0)};
}

/// Applies the chain in order. Columns of x are coordinate vectors.
inline FlowBatch flow_forward_batch(const FlowModel& model, const Eigen::MatrixXd& x)
{
    detail::require_rows(x, model.n_sub(), "flow_forward");
    FlowBatch acc{x, Eigen::VectorXd::Zero(x.cols())};
    std::size_t coupling_index = 0;
    for (const auto& step : model.steps) {
        if (const auto* c = std::get_if<CouplingLayer>(&step)) {
            auto r = detail::coupling_forward_batch(*c, acc.values, coupling_index++);
            acc.values = std::move(r.values);
            acc.log_det += r.log_det;
        } else {
            acc.values = std::get<MixingTransform>(step).apply(acc.values);
        }
    }
    return acc;
}

/// Applies the inverse chain in reverse order; log_det is log|det ∂f⁻¹/∂y|.
inline FlowBatch flow_inverse_batch(const FlowModel& model, const Eigen::MatrixXd& y)
{
    detail::require_rows(y, model.n_sub(), "flow_inverse");
    FlowBatch acc{y, Eigen::VectorXd::Zero(y.cols())};
    std::size_t coupling_index = 0;
    for (const auto& step : model.steps)
        if (std::holds_alternative<CouplingLayer>(step)) ++coupling_index;
    for (auto it = model.steps.rbegin(); it != model.steps.rend(); ++it) {
        if (const auto* c = std::get_if<CouplingLayer>(&*it)) {
            auto r = detail::coupling_inverse_batch(*c, acc.values, --coupling_index);
            acc.values = std::move(r.values);
            acc.log_det += r.log_det;
        } else {
            acc.values = std::get<MixingTransform>(*it).apply_inverse(acc.values);
        }
    }
    return acc;
}

inline std::pair<LatentCode, double> flow_forward(const FlowModel& model, const Eigen::VectorXd& coords)
{
    auto r = flow_forward_batch(model, coords);
    return {LatentCode::from_vector(r.values.col(0)), r.log_det(0)};
}

inline std::pair<Eigen::VectorXd, double> flow_inverse(const FlowModel& model, const LatentCode& latent)
{
    auto r = flow_inverse_batch(model, latent.to_vector());
    return {r.values.col(0), r.log_det(0)};
}

/// Random orthogonal matrix: Householder QR of a seeded Gaussian matrix, with the
/// columns of Q signed so that diag(R) is positive.
inline Eigen::MatrixXd random_orthogonal(std::size_t n, std::uint64_t seed)
{
    Rng rng(seed);
    const auto m = static_cast<Eigen::Index>(n);
    Eigen::MatrixXd g(m, m);
    for (Eigen::Index j = 0; j < m; ++j)
        for (Eigen::Index i = 0; i < m; ++i) g(i, j) = rng.normal();
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd& r = qr.matrixQR();
    for (Eigen::Index j = 0; j < m; ++j)
        if (r(j, j) < 0.0) q.col(j) = -q.col(j);
    return q;
}

/// Mixing placed after coupling layer `layer` (1-based), if any.
inline std::optional<MixingKind> mixing_after(MixingSchedule schedule, std::size_t layer)
{
    if (schedule == MixingSchedule::every_layer) {
        return layer % 2 == 0 ? MixingKind::reverse : MixingKind::orthogonal;
    }
    if (layer % 2 != 0) return std::nullopt;
    return (layer / 2) % 2 == 1 ? MixingKind::reverse : MixingKind::orthogonal;
}

/// Builds a flow that starts as the identity map: the last layer of every coupling
/// network is zero, the hidden layers are He-uniform initialized from `seed`.
///
/// When the schedule places any mixing transforms, a final orthogonal transform undoes
/// their product, so the untrained chain maps coordinate j to latent slot j.
inline FlowModel build_flow(const FlowConfig& cfg, std::uint64_t seed)
{
    cfg.validate();
    FlowModel model;
    model.config = cfg;
    model.seed = seed;

    const std::size_t transformed = (cfg.n_sub + 1) / 2;
    const std::size_t conditioner = cfg.n_sub / 2;
    std::uint64_t stream = 0;

    for (std::size_t layer = 1; layer <= cfg.n_lay; ++layer) {
        CouplingLayer c;
        c.transformed = transformed;
        c.conditioner = conditioner;
        c.scale_clamp = cfg.scale_clamp;

        Rng rng(seed, stream++);
        std::size_t fan_in = conditioner;
        for (std::size_t h = 0; h <= cfg.n_hid; ++h) {
            const bool last = h == cfg.n_hid;
            const std::size_t fan_out = last ? 2 * transformed : cfg.hidden;
            Dense d;
            d.weight = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(fan_out), static_cast<Eigen::Index>(fan_in));
            d.bias = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fan_out));
            if (!last) {
                const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
                for (Eigen::Index j = 0; j < d.weight.cols(); ++j)
                    for (Eigen::Index i = 0; i < d.weight.rows(); ++i) d.weight(i, j) = rng.uniform(-bound, bound);
            }
            c.net.layers.push_back(std::move(d));
            fan_in = fan_out;
        }
        model.steps.emplace_back(std::move(c));

        if (layer == cfg.n_lay) break;
        if (const auto kind = mixing_after(cfg.mixing, layer)) {
            MixingTransform m;
            m.kind = *kind;
            if (m.kind == MixingKind::orthogonal) {
                m.seed = stream_seed(seed, stream++);
                m.matrix = random_orthogonal(cfg.n_sub, m.seed);
            }
            model.steps.emplace_back(std::move(m));
        }
    }

    const auto n = static_cast<Eigen::Index>(cfg.n_sub);
    Eigen::MatrixXd product = Eigen::MatrixXd::Identity(n, n);
    bool mixed = false;
    for (const auto& step : model.steps) {
        if (const auto* m = std::get_if<MixingTransform>(&step)) {
            product = m->apply(product);
            mixed = true;
        }
    }
    if (mixed) {
        MixingTransform unmix;
        unmix.kind = MixingKind::orthogonal;
        unmix.matrix = product.transpose();
        model.steps.emplace_back(std::move(unmix));
    }
    return model;
}

/// Visits every trainable tensor in a fixed order: for each coupling layer, each dense
/// layer's weight then bias. f(path, data pointer, size, is_weight).
template <class Model, class F>
void visit_parameters(Model& model, F&& f)
{
    std::size_t coupling_index = 0;
    for (auto& step : model.steps) {
        auto* c = std::get_if<CouplingLayer>(&step);
        if (!c) continue;
        for (std::size_t d = 0; d < c->net.layers.size(); ++d) {
            auto& dense = c->net.layers[d];
            const std::string prefix = "coupling[" + std::to_string(coupling_index) + "].dense[" + std::to_string(d) + "]";
            f(prefix + ".weight", dense.weight.data(), static_cast<std::size_t>(dense.weight.size()), true);
            f(prefix + ".bias", dense.bias.data(), static_cast<std::size_t>(dense.bias.size()), false);
        }
        ++coupling_index;
    }
}

inline Eigen::VectorXd flatten_parameters(const FlowModel& model)
{
    Eigen::VectorXd flat(static_cast<Eigen::Index>(model.parameter_count()));
    Eigen::Index offset = 0;
    visit_parameters(model, [&](const std::string&, const double* p, std::size_t n, bool) {
        flat.segment(offset, static_cast<Eigen::Index>(n)) = Eigen::Map<const Eigen::VectorXd>(p, static_cast<Eigen::Index>(n));
        offset += static_cast<Eigen::Index>(n);
    });
    return flat;
}

inline void assign_parameters(FlowModel& model, const Eigen::VectorXd& flat)
{
    detail::require(static_cast<std::size_t>(flat.size()) == model.parameter_count(),
                    "assign_parameters: size mismatch");
    Eigen::Index offset = 0;
    visit_parameters(model, [&](const std::string&, double* p, std::size_t n, bool) {
        Eigen::Map<Eigen::VectorXd>(p, static_cast<Eigen::Index>(n)) = flat.segment(offset, static_cast<Eigen::Index>(n));
        offset += static_cast<Eigen::Index>(n);
    });
}

} // namespace flowage

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "flowage/error.hpp"
#include "flowage/field.hpp"
#include "flowage/flow.hpp"
#include "flowage/geometry.hpp"
#include "flowage/random.hpp"
#include "flowage/subspace.hpp"
#include "flowage/training.hpp"

namespace flowage {

struct Provenance {
    std::uint64_t config_hash = 0;
    std::uint64_t flow_seed = 0;
    std::uint64_t train_seed = 0;
    std::uint64_t data_fingerprint = 0;

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Subspace projection followed by the flow: the full bidirectional model.
struct AgingModel {
    SubspaceModel subspace;
    FlowModel flow;
    Provenance provenance;
    std::optional<TrainConfig> train_config; // as used to train `flow`, if known

    void validate() const
    {
        detail::require(subspace.n_sub() == flow.n_sub(),
                        "aging model: subspace n_sub " + std::to_string(subspace.n_sub()) + " != flow n_sub " +
                            std::to_string(flow.n_sub()));
    }
};

/// FNV-1a over raw bytes; used for data fingerprints and config hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) noexcept
{
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Predicted ages in years for a batch of coordinate vectors (columns).
inline Eigen::VectorXd predict_ages(const FlowModel& flow, const Eigen::MatrixXd& coords)
{
    const FlowBatch r = flow_forward_batch(flow, coords);
    Eigen::VectorXd out(coords.cols());
    for (Eigen::Index j = 0; j < coords.cols(); ++j) out(j) = flow.age_norm.to_years(r.values(0, j));
    return out;
}

inline double predict_age(const AgingModel& m, const VelocityField& v)
{
    m.validate();
    return predict_ages(m.flow, project(m.subspace, v))(0);
}

/// Latent codes with the age slot fixed and z drawn from N(0, I). Draw i uses its own
/// counter-based stream, so any subset of draws can be regenerated independently.
inline Eigen::MatrixXd draw_latents(const FlowModel& flow, double age_years, std::size_t first, std::size_t count,
                                    std::uint64_t seed)
{
    const auto n = static_cast<Eigen::Index>(flow.n_sub());
    Eigen::MatrixXd y(n, static_cast<Eigen::Index>(count));
    const double a = flow.age_norm.to_normalized(age_years);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(seed, first + i);
        const auto col = static_cast<Eigen::Index>(i);
        y(0, col) = a;
        for (Eigen::Index k = 1; k < n; ++k) y(k, col) = rng.normal();
    }
    return y;
}

/// n samples of p(v | age) in subspace coordinates, one per column.
inline Eigen::MatrixXd sample_conditional(const AgingModel& m, double age_years, std::size_t n, std::uint64_t seed)
{
    m.validate();
    detail::require(n >= 1, "sample_conditional: n must be >= 1");
    detail::require(std::isfinite(age_years), "sample_conditional: age must be finite");
    return flow_inverse_batch(m.flow, draw_latents(m.flow, age_years, 0, n, seed)).values;
}

struct ConditionalTemplate {
    double age = 0.0;
    Eigen::VectorXd coords;         // Monte-Carlo estimate of E[coords | age]
    Eigen::VectorXd standard_error; // per coordinate
    VelocityField velocity;
};

/// E[v | age] by Monte-Carlo over the flow's prior, accumulated in fixed-size chunks.
inline ConditionalTemplate conditional_template(const AgingModel& m, double age_years, std::size_t n_samples,
                                                std::uint64_t seed)
{
    m.validate();
    detail::require(n_samples >= 1, "conditional_template: n_samples must be >= 1");
    detail::require(std::isfinite(age_years), "conditional_template: age must be finite");
    constexpr std::size_t chunk = 4096;

    const auto n = static_cast<Eigen::Index>(m.flow.n_sub());
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd sum_sq = Eigen::VectorXd::Zero(n);
    for (std::size_t first = 0; first < n_samples; first += chunk) {
        const std::size_t count = std::min(chunk, n_samples - first);
        const Eigen::MatrixXd x = flow_inverse_batch(m.flow, draw_latents(m.flow, age_years, first, count, seed)).values;
        sum += x.rowwise().sum();
        sum_sq += x.array().square().rowwise().sum().matrix();
    }

    ConditionalTemplate t;
    t.age = age_years;
    const auto ns = static_cast<double>(n_samples);
    t.coords = sum / ns;
    if (n_samples > 1) {
        const Eigen::ArrayXd var = ((sum_sq.array() - ns * t.coords.array().square()) / (ns - 1.0)).max(0.0);
        t.standard_error = (var / ns).sqrt().matrix();
    } else {
        t.standard_error = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    }
    t.velocity = reconstruct(m.subspace, t.coords);
    return t;
}

/// Deformation, warped template and Jacobian-determinant map for a template velocity.
struct TemplateImages {
    DeformationField deformation;
    Volume warped;
    Volume jacobian;
};

inline TemplateImages render_template(const VelocityField& velocity, const Volume& reference,
                                      int n_squarings = default_squarings)
{
    TemplateImages out;
    out.deformation = svf_exp(velocity, n_squarings);
    out.warped = warp(reference, out.deformation);
    out.jacobian = jacobian_det_map(out.deformation);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct AgeBin {
    std::string label;
    std::size_t count = 0;
    std::optional<double> mae; // years; empty when the bin has no subjects
};

struct EvalReport {
    std::vector<AgeBin> per_bin;
    double overall_mae = 0.0;
    std::size_t count = 0;
};

/// Bin edges [lo, hi); the first and last bins are open-ended.
inline constexpr std::array<double, 5> age_bin_edges{40.0, 50.0, 60.0, 70.0, 80.0};
inline const std::array<const char*, 6> age_bin_labels{"<40", "40-50", "50-60", "60-70", "70-80", ">80"};

inline std::size_t age_bin(double age) noexcept
{
    std::size_t b = 0;
    while (b < age_bin_edges.size() && age >= age_bin_edges[b]) ++b;
    return b;
}

inline EvalReport evaluate_predictions(const Eigen::VectorXd& ages, const Eigen::VectorXd& predicted)
{
    detail::require(ages.size() > 0, "evaluate: empty test set");
    detail::require(ages.size() == predicted.size(), "evaluate: ages/predictions size mismatch");
    std::array<double, 6> sum{};
    std::array<std::size_t, 6> count{};
    double total = 0.0;
    for (Eigen::Index i = 0; i < ages.size(); ++i) {
        const double err = std::abs(predicted(i) - ages(i));
        const std::size_t b = age_bin(ages(i));
        sum[b] += err;
        ++count[b];
        total += err;
    }
    EvalReport r;
    r.count = static_cast<std::size_t>(ages.size());
    r.overall_mae = total / static_cast<double>(ages.size());
    for (std::size_t b = 0; b < sum.size(); ++b) {
        AgeBin bin{age_bin_labels[b], count[b], std::nullopt};
        if (count[b] > 0) bin.mae = sum[b] / static_cast<double>(count[b]);
        r.per_bin.push_back(std::move(bin));
    }
    return r;
}

inline EvalReport evaluate(const AgingModel& m, std::span<const std::pair<VelocityField, double>> test)
{
    m.validate();
    detail::require(!test.empty(), "evaluate: empty test set");
    Eigen::MatrixXd coords(static_cast<Eigen::Index>(m.flow.n_sub()), static_cast<Eigen::Index>(test.size()));
    Eigen::VectorXd ages(static_cast<Eigen::Index>(test.size()));
    for (std::size_t i = 0; i < test.size(); ++i) {
        coords.col(static_cast<Eigen::Index>(i)) = project(m.subspace, test[i].first);
        ages(static_cast<Eigen::Index>(i)) = test[i].second;
    }
    return evaluate_predictions(ages, predict_ages(m.flow, coords));
}

// ---------------------------------------------------------------------------
// Linear baseline

struct MLRBaseline {
    Eigen::VectorXd weights;
    double intercept = 0.0;
    bool ridge = false; // true when the ridge fallback was used
};

inline constexpr double mlr_ridge_lambda = 1e-6;

/// Ordinary least squares age ~ coordinates (columns of coords are samples). Falls back
/// to ridge regression (unpenalized intercept) when the design is rank deficient.
inline MLRBaseline fit_mlr(const Eigen::MatrixXd& coords, const Eigen::VectorXd& ages, bool allow_ridge = true)
{
    detail::require(coords.cols() == ages.size() && ages.size() >= 2, "fit_mlr: need matching coords/ages, n >= 2");
    detail::require(coords.allFinite() && ages.allFinite(), "fit_mlr: non-finite input");
    const Eigen::Index n = coords.cols();
    const Eigen::Index p = coords.rows();

    Eigen::MatrixXd design(n, p + 1);
    design.col(0).setOnes();
    design.rightCols(p) = coords.transpose();

    MLRBaseline b;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (n > p && qr.rank() == p + 1) {
        const Eigen::VectorXd w = qr.solve(ages);
        b.intercept = w(0);
        b.weights = w.tail(p);
        return b;
    }
    if (!allow_ridge) throw NumericalError("fit_mlr: singular normal equations (n=" + std::to_string(n) +
                                           ", p=" + std::to_string(p) + ")");
    Eigen::MatrixXd gram = design.transpose() * design;
    gram.diagonal().tail(p).array() += mlr_ridge_lambda;
    const Eigen::VectorXd w = gram.ldlt().solve(design.transpose() * ages);
    if (!w.allFinite()) throw NumericalError("fit_mlr: ridge solve failed");
    b.intercept = w(0);
    b.weights = w.tail(p);
    b.ridge = true;
    return b;
}

inline Eigen::VectorXd predict_mlr(const MLRBaseline& b, const Eigen::MatrixXd& coords)
{
    detail::require(coords.rows() == b.weights.size(), "predict_mlr: coordinate length mismatch");
    return (coords.transpose() * b.weights).array() + b.intercept;
}

inline double predict_mlr(const MLRBaseline& b, const CoordVector& v)
{
    return predict_mlr(b, Eigen::MatrixXd(v))(0);
}

} // namespace flowage

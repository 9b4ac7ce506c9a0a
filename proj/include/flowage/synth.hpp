#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowage/checkpoint.hpp"
#include "flowage/config.hpp"
#include "flowage/error.hpp"
#include "flowage/field.hpp"
#include "flowage/random.hpp"

namespace flowage {

enum class Generator { linear, quadratic, sigmoid };

inline const char* to_string(Generator g) noexcept
{
    switch (g) {
    case Generator::linear: return "linear";
    case Generator::quadratic: return "quadratic";
    case Generator::sigmoid: return "sigmoid";
    }
    return "?";
}

inline Generator generator_from_string(const std::string& s)
{
    if (s == "linear") return Generator::linear;
    if (s == "quadratic") return Generator::quadratic;
    if (s == "sigmoid") return Generator::sigmoid;
    throw ValidationError("unknown generator '" + s + "' (expected linear, quadratic or sigmoid)");
}

/// Synthetic cohort: velocity fields v = sum_j c_j B_j + voxel noise over smooth,
/// mutually orthogonal basis fields B_j. The first k coefficients follow an age-driven
/// mean path g_j(age) plus Gaussian noise; the next n_nuisance are age independent.
struct SynthConfig {
    std::size_t n_train = 2000;
    std::size_t n_test = 400;
    Grid grid{{16, 16, 16}, {1.0, 1.0, 1.0}};
    double age_min = 20.0;
    double age_max = 90.0;
    Generator generator = Generator::sigmoid;
    std::size_t k = 4;
    std::size_t n_nuisance = 28;
    double noise_std = 0.15;       // per age factor, coefficient units
    double nuisance_std = 1.0;     // per nuisance factor
    double voxel_noise_std = 0.02; // mm, i.i.d. per vector component
    double amplitude = 1.0;        // RMS displacement (mm) of a unit coefficient
    double bump_width = 3.0;       // voxels
    double sigmoid_width = 4.0;    // years
    std::uint64_t seed = 1;

    void validate() const
    {
        std::string bad;
        if (n_train < 2) bad += " n_train >= 2;";
        if (k < 1 || k > 16) bad += " 1 <= k <= 16;";
        for (int a = 0; a < 3; ++a)
            if (grid.dims[static_cast<std::size_t>(a)] < 8) bad += " dims >= 8;";
        if (!(age_max > age_min)) bad += " age_max > age_min;";
        if (!(noise_std >= 0.0) || !(nuisance_std >= 0.0) || !(voxel_noise_std >= 0.0)) bad += " noise >= 0;";
        if (!(amplitude > 0.0)) bad += " amplitude > 0;";
        if (!(bump_width > 0.0)) bad += " bump_width > 0;";
        if (!(sigmoid_width > 0.0)) bad += " sigmoid_width > 0;";
        if (k + n_nuisance > 3 * grid.voxel_count()) bad += " k + n_nuisance <= 3*n_vox;";
        if (!bad.empty()) throw ValidationError("invalid synth config, violated:" + bad);
        grid.validate();
    }
};

inline const std::set<std::string>& synth_config_keys()
{
    static const std::set<std::string> keys{"n_train",       "n_test",         "dims",         "spacing",
                                            "age_min",       "age_max",        "generator",    "k",
                                            "n_nuisance",    "noise_std",      "nuisance_std", "voxel_noise_std",
                                            "amplitude",     "bump_width",     "sigmoid_width", "seed"};
    return keys;
}

inline SynthConfig synth_config_from(const KeyValueConfig& kv)
{
    kv.check_keys(synth_config_keys());
    SynthConfig c;
    if (auto v = kv.integer("n_train")) c.n_train = *v;
    if (auto v = kv.integer("n_test")) c.n_test = *v;
    if (auto v = kv.numbers("dims")) {
        if (v->size() != 3) throw ValidationError(kv.where("dims") + ": 'dims' expects 3 comma-separated integers");
        for (std::size_t a = 0; a < 3; ++a) {
            if (!((*v)[a] >= 1.0) || std::floor((*v)[a]) != (*v)[a])
                throw ValidationError(kv.where("dims") + ": 'dims' expects positive integers");
            c.grid.dims[a] = static_cast<std::size_t>((*v)[a]);
        }
    }
    if (auto v = kv.numbers("spacing")) {
        if (v->size() != 3) throw ValidationError(kv.where("spacing") + ": 'spacing' expects 3 comma-separated numbers");
        for (std::size_t a = 0; a < 3; ++a) c.grid.spacing[a] = (*v)[a];
    }
    if (auto v = kv.number("age_min")) c.age_min = *v;
    if (auto v = kv.number("age_max")) c.age_max = *v;
    if (auto v = kv.string("generator")) {
        try {
            c.generator = generator_from_string(*v);
        } catch (const ValidationError& e) {
            throw ValidationError(kv.where("generator") + ": " + e.what());
        }
    }
    if (auto v = kv.integer("k")) c.k = *v;
    if (auto v = kv.integer("n_nuisance")) c.n_nuisance = *v;
    if (auto v = kv.number("noise_std")) c.noise_std = *v;
    if (auto v = kv.number("nuisance_std")) c.nuisance_std = *v;
    if (auto v = kv.number("voxel_noise_std")) c.voxel_noise_std = *v;
    if (auto v = kv.number("amplitude")) c.amplitude = *v;
    if (auto v = kv.number("bump_width")) c.bump_width = *v;
    if (auto v = kv.number("sigmoid_width")) c.sigmoid_width = *v;
    if (auto v = kv.integer("seed")) c.seed = *v;
    try {
        c.validate();
    } catch (const ValidationError& e) {
        throw ValidationError(kv.source() + ": " + e.what());
    }
    return c;
}

/// Everything needed to evaluate the generator analytically.
struct GroundTruth {
    SynthConfig config;
    Eigen::MatrixXd basis; // 3*n_vox x (k + n_nuisance), orthonormal columns
    double scale = 1.0;    // B_j = scale * basis.col(j)
    Eigen::VectorXd factor_amplitude;
    Eigen::VectorXd factor_center; // sigmoid centers (years)

    /// g(age): mean of the k age-driven coefficients.
    Eigen::VectorXd mean_path(double age) const
    {
        const auto k = static_cast<Eigen::Index>(config.k);
        Eigen::VectorXd g(k);
        const double mid = 0.5 * (config.age_min + config.age_max);
        const double half = 0.5 * (config.age_max - config.age_min);
        const double t = (age - mid) / half;
        for (Eigen::Index j = 0; j < k; ++j) {
            const double amp = factor_amplitude(j);
            switch (config.generator) {
            case Generator::linear: g(j) = amp * t; break;
            case Generator::quadratic: g(j) = amp * (t + ((j % 2 == 0) ? 0.4 : -0.4) * t * t); break;
            case Generator::sigmoid:
                g(j) = amp * std::tanh(0.5 * (age - factor_center(j)) / config.sigmoid_width);
                break;
            }
        }
        return g;
    }

    /// E[v | age] as a field: mean path rendered through the basis (nuisance mean is 0).
    VelocityField mean_field(double age) const
    {
        const auto k = static_cast<Eigen::Index>(config.k);
        const Eigen::VectorXd v = scale * (basis.leftCols(k) * mean_path(age));
        return VelocityField{config.grid, std::vector<double>(v.data(), v.data() + v.size())};
    }

    /// Per-factor noise of the sufficient statistic factor_stats(v) - g(age).
    double effective_noise() const
    {
        const double vox = config.voxel_noise_std / scale;
        return std::sqrt(config.noise_std * config.noise_std + vox * vox);
    }

    /// Coefficients of the age-driven factors read back from a field.
    Eigen::VectorXd factor_stats(const VelocityField& v) const
    {
        const auto k = static_cast<Eigen::Index>(config.k);
        const Eigen::Map<const Eigen::VectorXd> x(v.data.data(), static_cast<Eigen::Index>(v.data.size()));
        return basis.leftCols(k).transpose() * x / scale;
    }

    /// Posterior median of age given factor statistics r, under the uniform age prior.
    /// Evaluated by quadrature on a fine age grid.
    double bayes_predict(const Eigen::VectorXd& r, std::size_t grid_points = 2801) const
    {
        const double s = effective_noise();
        const double lo = config.age_min, hi = config.age_max;
        const double step = (hi - lo) / static_cast<double>(grid_points - 1);
        std::vector<double> logp(grid_points);
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < grid_points; ++i) {
            const double a = lo + step * static_cast<double>(i);
            logp[i] = -(r - mean_path(a)).squaredNorm() / (2.0 * s * s);
            best = std::max(best, logp[i]);
        }
        // Trapezoid masses per cell, then linear interpolation of the CDF.
        std::vector<double> w(grid_points);
        for (std::size_t i = 0; i < grid_points; ++i) w[i] = std::exp(logp[i] - best);
        std::vector<double> cdf(grid_points, 0.0);
        for (std::size_t i = 1; i < grid_points; ++i) cdf[i] = cdf[i - 1] + 0.5 * (w[i - 1] + w[i]);
        const double half_mass = 0.5 * cdf.back();
        for (std::size_t i = 1; i < grid_points; ++i) {
            if (cdf[i] >= half_mass) {
                const double f = (half_mass - cdf[i - 1]) / (cdf[i] - cdf[i - 1]);
                return lo + step * (static_cast<double>(i - 1) + f);
            }
        }
        return hi;
    }

    /// Expected absolute error of the Bayes-optimal (posterior median) predictor,
    /// estimated over fresh draws from the generator.
    double bayes_mae(std::size_t n_draws = 20000, std::uint64_t seed = 12345) const
    {
        const double s = effective_noise();
        double total = 0.0;
        for (std::size_t i = 0; i < n_draws; ++i) {
            Rng rng(seed, i);
            const double age = rng.uniform(config.age_min, config.age_max);
            Eigen::VectorXd r = mean_path(age);
            for (Eigen::Index j = 0; j < r.size(); ++j) r(j) += s * rng.normal();
            total += std::abs(bayes_predict(r) - age);
        }
        return total / static_cast<double>(n_draws);
    }
};

struct SynthSubject {
    std::string id;
    double age = 0.0;
    bool test = false;
    VelocityField velocity;
};

struct SynthCohort {
    std::vector<SynthSubject> subjects; // n_train training subjects, then n_test test subjects
    GroundTruth truth;
};

namespace detail {

inline GroundTruth make_ground_truth(const SynthConfig& cfg)
{
    GroundTruth gt;
    gt.config = cfg;
    const Grid& g = cfg.grid;
    const std::size_t n_vox = g.voxel_count();
    const std::size_t m = cfg.k + cfg.n_nuisance;

    Rng rng(cfg.seed, 0xba515ULL);
    Eigen::MatrixXd bumps(static_cast<Eigen::Index>(3 * n_vox), static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < m; ++j) {
        double center[3];
        for (std::size_t a = 0; a < 3; ++a) {
            const double margin = std::min(cfg.bump_width, 0.25 * static_cast<double>(g.dims[a] - 1));
            center[a] = rng.uniform(margin, static_cast<double>(g.dims[a] - 1) - margin);
        }
        double dir[3] = {rng.normal(), rng.normal(), rng.normal()};
        const double norm = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
        for (double& d : dir) d /= norm;
        for (std::size_t z = 0; z < g.dims[2]; ++z)
            for (std::size_t y = 0; y < g.dims[1]; ++y)
                for (std::size_t x = 0; x < g.dims[0]; ++x) {
                    const double dx = static_cast<double>(x) - center[0];
                    const double dy = static_cast<double>(y) - center[1];
                    const double dz = static_cast<double>(z) - center[2];
                    const double w = std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * cfg.bump_width * cfg.bump_width));
                    const auto v = static_cast<Eigen::Index>(g.index(x, y, z));
                    for (int c = 0; c < 3; ++c) bumps(3 * v + c, static_cast<Eigen::Index>(j)) = w * dir[c];
                }
    }
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(bumps);
    gt.basis = qr.householderQ() * Eigen::MatrixXd::Identity(bumps.rows(), bumps.cols());
    const Eigen::MatrixXd& r = qr.matrixQR();
    for (Eigen::Index j = 0; j < gt.basis.cols(); ++j)
        if (r(j, j) < 0.0) gt.basis.col(j) = -gt.basis.col(j);
    gt.scale = cfg.amplitude * std::sqrt(static_cast<double>(n_vox));

    const auto k = static_cast<Eigen::Index>(cfg.k);
    gt.factor_amplitude.resize(k);
    gt.factor_center.resize(k);
    for (Eigen::Index j = 0; j < k; ++j) {
        gt.factor_amplitude(j) = ((j % 2 == 0) ? 1.0 : -1.0) / (1.0 + 0.25 * static_cast<double>(j));
        gt.factor_center(j) =
            cfg.age_min + (cfg.age_max - cfg.age_min) * (static_cast<double>(j) + 0.5) / static_cast<double>(k);
    }
    return gt;
}

} // namespace detail

/// Deterministic given the config: subject i draws from its own counter-based stream.
inline SynthCohort synth_cohort(const SynthConfig& cfg)
{
    cfg.validate();
    SynthCohort cohort;
    cohort.truth = detail::make_ground_truth(cfg);
    const GroundTruth& gt = cohort.truth;
    const auto k = static_cast<Eigen::Index>(cfg.k);
    const auto m = gt.basis.cols();

    const std::size_t total = cfg.n_train + cfg.n_test;
    cohort.subjects.reserve(total);
    for (std::size_t i = 0; i < total; ++i) {
        Rng rng(cfg.seed, 1000 + i);
        SynthSubject s;
        s.test = i >= cfg.n_train;
        s.age = rng.uniform(cfg.age_min, cfg.age_max);
        Eigen::VectorXd coef(m);
        coef.head(k) = gt.mean_path(s.age);
        for (Eigen::Index j = 0; j < k; ++j) coef(j) += cfg.noise_std * rng.normal();
        for (Eigen::Index j = k; j < m; ++j) coef(j) = cfg.nuisance_std * rng.normal();
        Eigen::VectorXd v = gt.scale * (gt.basis * coef);
        for (Eigen::Index d = 0; d < v.size(); ++d) v(d) += cfg.voxel_noise_std * rng.normal();

        char id[32];
        std::snprintf(id, sizeof(id), "%s%05zu", s.test ? "test" : "train", s.test ? i - cfg.n_train : i);
        s.id = id;
        s.velocity = VelocityField{cfg.grid, std::vector<double>(v.data(), v.data() + v.size())};
        cohort.subjects.push_back(std::move(s));
    }
    return cohort;
}

/// Generator record written next to a synthetic cohort, for analytic oracles.
inline std::vector<TensorContainer> ground_truth_records(const GroundTruth& gt)
{
    const auto& c = gt.config;
    TensorContainer meta = detail::meta_record("synth_truth");
    meta.set("n_train", std::to_string(c.n_train));
    meta.set("n_test", std::to_string(c.n_test));
    meta.set("dims", std::to_string(c.grid.dims[0]) + "," + std::to_string(c.grid.dims[1]) + "," +
                         std::to_string(c.grid.dims[2]));
    meta.set("grid_spacing", join_doubles(c.grid.spacing.data(), 3)); // "spacing" is a container header field
    meta.set("age_min", format_double(c.age_min));
    meta.set("age_max", format_double(c.age_max));
    meta.set("generator", to_string(c.generator));
    meta.set("k", std::to_string(c.k));
    meta.set("n_nuisance", std::to_string(c.n_nuisance));
    meta.set("noise_std", format_double(c.noise_std));
    meta.set("nuisance_std", format_double(c.nuisance_std));
    meta.set("voxel_noise_std", format_double(c.voxel_noise_std));
    meta.set("amplitude", format_double(c.amplitude));
    meta.set("bump_width", format_double(c.bump_width));
    meta.set("sigmoid_width", format_double(c.sigmoid_width));
    meta.set("seed", std::to_string(c.seed));
    meta.set("scale", format_double(gt.scale));
    meta.set("effective_noise", format_double(gt.effective_noise()));
    std::vector<TensorContainer> out{std::move(meta)};
    out.push_back(detail::matrix_record("basis", gt.basis));
    out.push_back(detail::vector_record("factor_amplitude", gt.factor_amplitude));
    out.push_back(detail::vector_record("factor_center", gt.factor_center));
    return out;
}

inline GroundTruth read_ground_truth(const std::filesystem::path& path)
{
    detail::RecordIndex idx(read_containers(path), path.string());
    if (idx.meta_string("kind") != "synth_truth") throw ValidationError(path.string() + ": not a synth truth file");
    std::string text;
    for (const auto& key : synth_config_keys())
        text += key + " = " + idx.meta_string(key == "spacing" ? "grid_spacing" : key) + "\n";
    GroundTruth gt;
    gt.config = synth_config_from(KeyValueConfig::parse(text, path.string()));
    gt.scale = idx.meta_double("scale");
    gt.basis = detail::to_matrix(idx.at("basis"), path.string());
    gt.factor_amplitude = detail::to_vector(idx.at("factor_amplitude"), path.string());
    gt.factor_center = detail::to_vector(idx.at("factor_center"), path.string());
    return gt;
}

} // namespace flowage

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <sstream>

#include <sys/wait.h>

#include "flowage/flowage.hpp"

using namespace flowage;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

class Stopwatch {
public:
    double seconds() const
    {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args)
{
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void put(const fs::path& p, const std::string& text)
{
    fs::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary) << text;
}

fs::path work_root()
{
    if (const char* d = std::getenv("FLOWAGE_ACCEPTANCE_DIR")) return d;
    return fs::current_path() / "acceptance_work";
}

void cli(const std::string& args, const fs::path& log)
{
    const std::string cmd = std::string("\"") + FLOWAGE_CLI + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
    const int status = std::system(cmd.c_str());
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    if (code != 0) throw std::runtime_error("flowage " + args.substr(0, args.find(' ')) + " exited with " + std::to_string(code) + ", see " + log.string());
}

Eigen::MatrixXd gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed)
{
    Rng rng(seed);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.normal();
    return m;
}

FlowModel paper_flow(std::size_t n_sub, std::uint64_t seed)
{
    FlowConfig cfg;
    cfg.n_sub = n_sub;
    cfg.n_lay = 16;
    cfg.n_hid = 2;
    cfg.hidden = 32;
    return build_flow(cfg, seed);
}

// Short maximum-likelihood run on Gaussian data with a mildly nonlinear age signal.
FlowModel briefly_trained(FlowModel m, std::size_t n, std::size_t epochs, std::uint64_t seed)
{
    const auto d = static_cast<Eigen::Index>(m.n_sub());
    Eigen::MatrixXd x = gaussian(d, static_cast<Eigen::Index>(n), seed);
    Eigen::VectorXd ages(static_cast<Eigen::Index>(n));
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        ages(j) = 55.0 + 15.0 * x(0, j) + 3.0 * x(1, j) * x(1, j);
        x(d - 1, j) += 0.5 * x(0, j) * x(0, j);
    }
    TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.learning_rate = 1e-3;
    cfg.sigma = 0.3;
    return train(std::move(m), x, ages, cfg).model;
}

// ---------------------------------------------------------------------------

Outcome invertibility()
{
    double worst = 0.0, t = 0.0;
    std::string per;
    for (std::size_t n_sub : {8u, 64u, 500u}) {
        const FlowModel untrained = paper_flow(n_sub, 1);
        const FlowModel trained = briefly_trained(paper_flow(n_sub, 2), 2000, 30, 3);
        for (const FlowModel* m : {&untrained, &trained}) {
            const Eigen::MatrixXd v = gaussian(static_cast<Eigen::Index>(n_sub), 1000, 10 + n_sub);
            Stopwatch clock;
            const Eigen::MatrixXd back = flow_inverse_batch(*m, flow_forward_batch(*m, v).values).values;
            const double err = (back - v).cwiseAbs().maxCoeff();
            t += clock.seconds();
            worst = std::max(worst, err);
            per += fmt(" %zu%s=%.1e", n_sub, m == &untrained ? "u" : "t", err);
        }
    }
    return {worst <= 1e-6 && t < 60.0,
            fmt("max |f^-1(f(v)) - v| = %.2e (limit 1e-6),", worst) + per + fmt(", round trips %.1f s", t)};
}

Outcome log_det_oracle()
{
    Stopwatch clock;
    double worst = 0.0;
    std::size_t points = 0;
    for (std::size_t n_sub : {2u, 4u, 8u, 16u}) {
        FlowConfig cfg;
        cfg.n_sub = n_sub;
        cfg.n_lay = 6;
        cfg.hidden = 16;
        const FlowModel m = briefly_trained(build_flow(cfg, n_sub), 256, 100, n_sub + 5);
        const Eigen::MatrixXd pts = gaussian(static_cast<Eigen::Index>(n_sub), 50, 40 + n_sub);
        for (Eigen::Index p = 0; p < pts.cols(); ++p) {
            const Eigen::VectorXd x = pts.col(p);
            const double h = 1e-5;
            Eigen::MatrixXd j(x.size(), x.size());
            for (Eigen::Index k = 0; k < x.size(); ++k) {
                Eigen::MatrixXd probe(x.size(), 4);
                for (int s = 0; s < 4; ++s) probe.col(s) = x;
                probe(k, 0) += 2 * h;
                probe(k, 1) += h;
                probe(k, 2) -= h;
                probe(k, 3) -= 2 * h;
                const Eigen::MatrixXd y = flow_forward_batch(m, probe).values;
                j.col(k) = (8.0 * (y.col(1) - y.col(2)) - (y.col(0) - y.col(3))) / (12.0 * h);
            }
            const double numeric = std::log(std::abs(j.determinant()));
            const double analytic = flow_forward_batch(m, x).log_det(0);
            worst = std::max(worst, std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric)));
            ++points;
        }
    }
    const double t = clock.seconds();
    return {worst <= 1e-4 && t < 60.0,
            fmt("max relative log|J| error %.2e over %zu points, n_sub 2..16 (limit 1e-4), %.1f s", worst, points, t)};
}

Outcome gradient_oracle()
{
    Stopwatch clock;
    FlowConfig cfg;
    cfg.n_sub = 8;
    cfg.n_lay = 4;
    cfg.hidden = 8;
    FlowModel m = build_flow(cfg, 7);
    Eigen::VectorXd theta = flatten_parameters(m);
    theta += 0.1 * gaussian(theta.size(), 1, 8).col(0);
    assign_parameters(m, theta);
    const double err = gradient_check(m, gaussian(8, 16, 9), gaussian(16, 1, 10).col(0), 0.14);
    const double t = clock.seconds();
    return {err <= 1e-4 && t < 120.0,
            fmt("max relative error %.2e over all %zu parameters (limit 1e-4), %.1f s", err, m.parameter_count(), t)};
}

Outcome loss_spot_values()
{
    const double zero = nll_loss(0.7, Eigen::VectorXd::Zero(31), 0.7, 0.14, 0.0);
    const double half = nll_loss(0.14, Eigen::VectorXd::Zero(31), 0.0, 0.14, 0.0);
    return {zero == 0.0 && std::abs(half - 0.5) <= 1e-12, fmt("loss(a=a_gt, z=0) = %g, sigma boundary = %.15f", zero, half)};
}

template <class Field>
Field smooth_field(const Grid& g, double amp, std::uint64_t seed, double cycles)
{
    Rng rng(seed);
    Field f = Field::zeros(g);
    for (int term = 0; term < 3; ++term) {
        double k[3], ph[3], a[3];
        for (int i = 0; i < 3; ++i) {
            k[i] = 2.0 * std::numbers::pi * rng.uniform(0.3, 1.0) * cycles / static_cast<double>(g.dims[static_cast<std::size_t>(i)]);
            ph[i] = rng.uniform(0.0, 2.0 * std::numbers::pi);
            a[i] = amp / 3.0 * rng.uniform(-1.0, 1.0);
        }
        for (std::size_t z = 0; z < g.dims[2]; ++z)
            for (std::size_t y = 0; y < g.dims[1]; ++y)
                for (std::size_t x = 0; x < g.dims[0]; ++x) {
                    const double s = std::sin(k[0] * static_cast<double>(x) + ph[0]) *
                                     std::cos(k[1] * static_cast<double>(y) + ph[1]) *
                                     std::sin(k[2] * static_cast<double>(z) + ph[2]);
                    for (int c = 0; c < 3; ++c) f.at(g.index(x, y, z), c) += a[c] * s;
                }
    }
    return f;
}

Outcome exp_map_suite()
{
    Stopwatch clock;
    const Grid g{{32, 32, 32}, {1.0, 1.0, 1.0}};

    const DeformationField id = svf_exp(VelocityField::zeros(g), 8);
    bool zero_ok = std::all_of(id.data.begin(), id.data.end(), [](double d) { return d == 0.0; });

    VelocityField c = VelocityField::zeros(g);
    const double t[3] = {1.3, -0.7, 2.1};
    for (std::size_t v = 0; v < g.voxel_count(); ++v)
        for (int k = 0; k < 3; ++k) c.at(v, k) = t[k];
    const DeformationField shift = svf_exp(c, 8);
    double translation_err = 0.0;
    const auto inside = [&](std::size_t x, std::size_t y, std::size_t z, std::size_t m) {
        return x >= m && y >= m && z >= m && x + m < g.dims[0] && y + m < g.dims[1] && z + m < g.dims[2];
    };
    for (std::size_t z = 0; z < 32; ++z)
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x) {
                if (!inside(x, y, z, 4)) continue;
                for (int k = 0; k < 3; ++k)
                    translation_err = std::max(translation_err, std::abs(shift.at(g.index(x, y, z), k) - t[k]) / std::abs(t[k]));
            }

    const auto v = smooth_field<VelocityField>(g, 9.0, 21, 0.2);
    VelocityField neg = v;
    for (double& d : neg.data) d = -d;
    const DeformationField residual = compose(svf_exp(neg, 8), svf_exp(v, 8));
    double inverse_err = 0.0;
    for (std::size_t z = 0; z < 32; ++z)
        for (std::size_t y = 0; y < 32; ++y)
            for (std::size_t x = 0; x < 32; ++x) {
                if (!inside(x, y, z, 8)) continue;
                for (int k = 0; k < 3; ++k) inverse_err = std::max(inverse_err, std::abs(residual.at(g.index(x, y, z), k)));
            }

    const Volume jac = jacobian_det_map(id);
    const bool jac_ok = std::all_of(jac.data.begin(), jac.data.end(), [](double d) { return d == 1.0; });
    const double secs = clock.seconds();
    const bool pass = zero_ok && translation_err <= 1e-6 && inverse_err <= 1e-3 && jac_ok && secs < 60.0;
    return {pass, fmt("zero->identity %s, translation rel err %.1e, exp(v)o exp(-v) residual %.2e mm, det J(id)==1 %s, %.1f s",
                      zero_ok ? "yes" : "no", translation_err, inverse_err, jac_ok ? "yes" : "no", secs)};
}

Outcome pca_suite()
{
    // Planted 5-dim subspace: generator basis with near-zero voxel noise.
    SynthConfig cfg;
    cfg.n_train = 300;
    cfg.n_test = 0;
    cfg.k = 2;
    cfg.n_nuisance = 3;
    cfg.voxel_noise_std = 1e-7;
    cfg.generator = Generator::linear;
    const SynthCohort cohort = synth_cohort(cfg);
    std::vector<VelocityField> fields;
    for (const auto& s : cohort.subjects) fields.push_back(s.velocity);
    const SubspaceModel planted = fit_subspace(fields, 5);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(planted.basis.transpose() * cohort.truth.basis);
    const double angle = std::acos(std::min(1.0, svd.singularValues().minCoeff()));

    // Default cohort, 32 components: in-span round trip and unit variance.
    SynthConfig full;
    full.n_test = 0;
    const SynthCohort big = synth_cohort(full);
    std::vector<VelocityField> train_fields;
    for (const auto& s : big.subjects) train_fields.push_back(s.velocity);
    const SubspaceModel m = fit_subspace(train_fields, 32);
    const auto n = static_cast<Eigen::Index>(train_fields.size());
    Eigen::MatrixXd c(32, n);
    for (Eigen::Index i = 0; i < n; ++i) c.col(i) = project(m, train_fields[static_cast<std::size_t>(i)]);
    double var_err = 0.0;
    for (Eigen::Index j = 0; j < 32; ++j) {
        const double mean = c.row(j).mean();
        var_err = std::max(var_err, std::abs((c.row(j).array() - mean).square().sum() / static_cast<double>(n - 1) - 1.0));
    }
    double roundtrip = 0.0;
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd coords(32);
        for (Eigen::Index j = 0; j < 32; ++j) coords(j) = 2.0 * rng.normal();
        const VelocityField v = reconstruct(m, coords);
        const VelocityField back = reconstruct(m, project(m, v));
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < v.data.size(); ++i) {
            num += (back.data[i] - v.data[i]) * (back.data[i] - v.data[i]);
            den += v.data[i] * v.data[i];
        }
        roundtrip = std::max(roundtrip, std::sqrt(num / den));
    }
    const bool pass = roundtrip <= 1e-8 && angle <= 1e-3 && var_err <= 1e-6;
    return {pass, fmt("in-span round trip %.1e (limit 1e-8), planted principal angle %.1e rad (limit 1e-3), "
                      "max |var - 1| %.1e (limit 1e-6)", roundtrip, angle, var_err)};
}

// ---------------------------------------------------------------------------
// End-to-end pipeline through the CLI.

const char* const e2e_train_config =
    "# small network, heavy weight decay: the 2000-subject cohort overfits larger flows\n"
    "n_lay = 2\n"
    "hidden = 4\n"
    "sigma = 0.02\n"
    "learning_rate = 1e-3\n"
    "weight_decay = 0.3\n"
    "epochs = 5000\n"
    "record_every = 100\n";

struct PipelineResult {
    double nf = 0.0, mlr = 0.0, bayes = 0.0, seconds = 0.0;
    fs::path dir;
};

std::map<std::string, double> overall_mae(const fs::path& csv)
{
    std::map<std::string, double> out;
    std::istringstream in(slurp(csv));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        const auto cells = split(line, ',');
        if (cells.size() == 4 && cells[1] == "All") out[cells[0]] = std::stod(cells[3]);
    }
    return out;
}

PipelineResult run_pipeline(const std::string& generator)
{
    Stopwatch clock;
    PipelineResult r;
    r.dir = work_root() / ("e2e_" + generator);
    fs::remove_all(r.dir);
    fs::create_directories(r.dir);
    const fs::path log = r.dir / "cli.log";
    put(r.dir / "synth.cfg", "generator = " + generator + "\n");
    put(r.dir / "train.cfg", e2e_train_config);
    const std::string d = r.dir.string();
    cli("synth --config " + d + "/synth.cfg --out-dir " + d + "/cohort", log);
    cli("fit-subspace --manifest " + d + "/cohort/manifest.csv --n-sub 32 --out " + d + "/subspace.flowage", log);
    cli("train --manifest " + d + "/cohort/manifest.csv --subspace " + d + "/subspace.flowage --config " + d +
            "/train.cfg --out " + d + "/model.flowage --seed 1 --log " + d + "/train_log.csv",
        log);
    cli("eval --model " + d + "/model.flowage --manifest " + d + "/cohort/manifest.csv --baseline mlr --csv " + d +
            "/eval.csv",
        log);
    r.seconds = clock.seconds();
    const auto mae = overall_mae(r.dir / "eval.csv");
    r.nf = mae.at("nf");
    r.mlr = mae.at("mlr");
    r.bayes = read_ground_truth(r.dir / "cohort/truth.flowage").bayes_mae();
    return r;
}

std::optional<PipelineResult> sigmoid_run;

Outcome end_to_end()
{
    const PipelineResult s = run_pipeline("sigmoid");
    sigmoid_run = s;
    const PipelineResult l = run_pipeline("linear");
    const bool bayes_ok = s.nf <= 1.25 * s.bayes;
    const bool beats = s.nf < s.mlr;
    const bool ties = std::abs(l.nf - l.mlr) <= 0.1 * std::min(l.nf, l.mlr);
    const bool fast = s.seconds < 1800.0 && l.seconds < 1800.0;
    return {bayes_ok && beats && ties && fast,
            fmt("sigmoid NF %.3f vs 1.25 x Bayes %.3f (ratio %.2f) [%s], NF vs MLR %.3f [%s]; "
                "linear NF %.3f vs MLR %.3f (diff %.1f%%) [%s]; %.0f s + %.0f s",
                s.nf, 1.25 * s.bayes, s.nf / s.bayes, bayes_ok ? "ok" : "miss", s.mlr, beats ? "ok" : "miss", l.nf,
                l.mlr, 100.0 * std::abs(l.nf - l.mlr) / std::min(l.nf, l.mlr), ties ? "ok" : "miss", s.seconds,
                l.seconds)};
}

Outcome template_fidelity()
{
    if (!sigmoid_run) return {false, "no trained synthetic model (end-to-end run failed)"};
    Stopwatch clock;
    const AgingModel m = read_aging_model(sigmoid_run->dir / "model.flowage");
    const GroundTruth gt = read_ground_truth(sigmoid_run->dir / "cohort/truth.flowage");
    const std::vector<double> ages{40, 50, 60, 70, 80, 90};

    double worst_z = 0.0, worst_bias = 0.0;
    std::size_t outside = 0, total = 0;
    std::vector<Eigen::VectorXd> factors;
    for (double age : ages) {
        const ConditionalTemplate t = conditional_template(m, age, 10000, 11);
        const Eigen::VectorXd truth = project(m.subspace, gt.mean_field(age));
        for (Eigen::Index j = 0; j < truth.size(); ++j) {
            const double z = std::abs(t.coords(j) - truth(j)) / t.standard_error(j);
            worst_z = std::max(worst_z, z);
            outside += z > 3.0 ? 1 : 0;
            ++total;
        }
        worst_bias = std::max(worst_bias, (t.coords - truth).norm());
        factors.push_back(gt.factor_stats(t.velocity));
    }
    std::size_t monotone_checked = 0, monotone_ok = 0;
    for (Eigen::Index j = 0; j < factors.front().size(); ++j) {
        int g_dir = 0;
        bool g_strict = true;
        for (std::size_t a = 1; a < ages.size(); ++a) {
            const double dg = gt.mean_path(ages[a])(j) - gt.mean_path(ages[a - 1])(j);
            const int s = dg > 0 ? 1 : (dg < 0 ? -1 : 0);
            if (s == 0 || (g_dir != 0 && s != g_dir)) g_strict = false;
            g_dir = s;
        }
        if (!g_strict) continue;
        ++monotone_checked;
        bool ok = true;
        for (std::size_t a = 1; a < ages.size(); ++a)
            ok = ok && (factors[a](j) - factors[a - 1](j)) * g_dir > 0.0;
        monotone_ok += ok ? 1 : 0;
    }
    const double secs = clock.seconds();
    const bool pass = outside == 0 && monotone_ok == monotone_checked && secs < 300.0;
    return {pass, fmt("%zu of %zu template coordinates beyond 3 SE (max %.1f SE, max |E[v|a] - truth| %.2f "
                      "in standardized coordinates); %zu of %zu monotone factors strictly monotone; %.1f s",
                      outside, total, worst_z, worst_bias, monotone_ok, monotone_checked, secs)};
}

Outcome determinism()
{
    const fs::path root = work_root() / "determinism";
    fs::remove_all(root);
    put(root / "synth.cfg", "n_train = 200\nn_test = 50\nseed = 9\n");
    put(root / "train.cfg", "n_lay = 4\nhidden = 8\nepochs = 200\nlearning_rate = 1e-3\nbatch = 64\n");
    const fs::path log = root / "cli.log";
    for (const char* run : {"a", "b"}) {
        const std::string d = (root / run).string(), r = root.string();
        cli("synth --config " + r + "/synth.cfg --out-dir " + d + "/cohort", log);
        cli("fit-subspace --manifest " + d + "/cohort/manifest.csv --n-sub 16 --out " + d + "/sub.flowage", log);
        cli("train --manifest " + d + "/cohort/manifest.csv --subspace " + d + "/sub.flowage --config " + r +
                "/train.cfg --out " + d + "/model.flowage --seed 3 --log " + d + "/log.csv",
            log);
        cli("sample --model " + d + "/model.flowage --age 65 --n 20 --seed 4 --out-dir " + d + "/samples", log);
        cli("template --model " + d + "/model.flowage --ages 40,60,80 --n-samples 2000 --template " + d +
                "/cohort/reference_image.flowage --out-dir " + d + "/templates --emit-jacobian",
            log);
        cli("eval --model " + d + "/model.flowage --manifest " + d + "/cohort/manifest.csv --baseline mlr --csv " + d +
                "/eval.csv",
            log);
    }
    std::size_t compared = 0, differing = 0;
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
        if (!e.is_regular_file()) continue;
        const fs::path other = root / "b" / fs::relative(e.path(), root / "a");
        ++compared;
        // Manifests hold absolute paths into their own run directory.
        std::string x = slurp(e.path()), y = slurp(other);
        if (e.path().extension() == ".csv") {
            for (auto* s : {&x, &y}) {
                for (const std::string& dir : {(root / "a").string(), (root / "b").string()}) {
                    for (auto pos = s->find(dir); pos != std::string::npos; pos = s->find(dir)) s->replace(pos, dir.size(), "<run>");
                }
            }
        }
        differing += x == y ? 0 : 1;
    }
    return {compared > 0 && differing == 0,
            fmt("%zu files compared across two identical-seed runs (checkpoints, samples, templates, reports), %zu differ",
                compared, differing)};
}

} // namespace

int main()
{
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"invertibility", invertibility},
        {"log-det oracle", log_det_oracle},
        {"gradient oracle", gradient_oracle},
        {"loss spot values", loss_spot_values},
        {"exp-map suite", exp_map_suite},
        {"PCA suite", pca_suite},
        {"end-to-end synthetic regression", end_to_end},
        {"conditional template fidelity", template_fidelity},
        {"determinism", determinism},
    };
    fs::create_directories(work_root());
    int failed = 0;
    for (const auto& [name, check] : criteria) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
        std::fflush(stdout);
        failed += o.pass ? 0 : 1;
    }
    return failed == 0 ? 0 : 1;
}

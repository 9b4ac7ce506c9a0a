// flowage: command line front end for the age-conditioned deformation flow.
//
// Exit codes: 0 success, 1 validation error (bad flags, files, shapes), 2 numerical failure.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowage/flowage.hpp"

namespace fs = std::filesystem;
using namespace flowage;

namespace {

std::string age_tag(double age)
{
    std::string s = format_double(age);
    for (char& c : s)
        if (c == '.') c = 'p';
    return s;
}

struct Dataset {
    std::vector<ManifestEntry> entries;
    Eigen::MatrixXd coords;
    Eigen::VectorXd ages;
};

Dataset project_entries(const SubspaceModel& subspace, std::vector<ManifestEntry> entries, const std::string& what)
{
    if (entries.empty()) throw ValidationError(what + ": no subjects selected from manifest");
    Dataset d;
    d.coords.resize(static_cast<Eigen::Index>(subspace.n_sub()), static_cast<Eigen::Index>(entries.size()));
    d.ages.resize(static_cast<Eigen::Index>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto v = read_velocity(entries[i].velocity_path);
        d.coords.col(static_cast<Eigen::Index>(i)) = project(subspace, v);
        d.ages(static_cast<Eigen::Index>(i)) = entries[i].age_years;
    }
    d.entries = std::move(entries);
    return d;
}

std::uint64_t fingerprint(const Eigen::MatrixXd& coords, const Eigen::VectorXd& ages)
{
    std::uint64_t h = fnv1a(coords.data(), static_cast<std::size_t>(coords.size()) * sizeof(double));
    return fnv1a(ages.data(), static_cast<std::size_t>(ages.size()) * sizeof(double), h);
}

// Smooth synthetic reference image: a bright ellipsoid with a dark central cavity.
Volume reference_image(const Grid& g)
{
    Volume v = Volume::filled(g, 0.0);
    const double cx = 0.5 * static_cast<double>(g.dims[0] - 1);
    const double cy = 0.5 * static_cast<double>(g.dims[1] - 1);
    const double cz = 0.5 * static_cast<double>(g.dims[2] - 1);
    for (std::size_t z = 0; z < g.dims[2]; ++z)
        for (std::size_t y = 0; y < g.dims[1]; ++y)
            for (std::size_t x = 0; x < g.dims[0]; ++x) {
                const double dx = (static_cast<double>(x) - cx) / (0.4 * static_cast<double>(g.dims[0]));
                const double dy = (static_cast<double>(y) - cy) / (0.4 * static_cast<double>(g.dims[1]));
                const double dz = (static_cast<double>(z) - cz) / (0.4 * static_cast<double>(g.dims[2]));
                const double r2 = dx * dx + dy * dy + dz * dz;
                v.data[g.index(x, y, z)] = 100.0 / (1.0 + std::exp(8.0 * (r2 - 1.0))) - 60.0 * std::exp(-r2 / 0.05);
            }
    return v;
}

int cmd_synth(const std::string& config_path, const fs::path& out_dir)
{
    const SynthConfig cfg = synth_config_from(KeyValueConfig::load(config_path));
    const SynthCohort cohort = synth_cohort(cfg);
    std::vector<ManifestEntry> entries;
    for (const auto& s : cohort.subjects) {
        const fs::path p = out_dir / "fields" / (s.id + ".flowage");
        write_containers(p, {to_container(s.velocity)});
        entries.push_back({s.id, s.age, p, s.test ? "test" : "train"});
    }
    write_manifest(out_dir / "manifest.csv", entries);
    write_containers(out_dir / "truth.flowage", ground_truth_records(cohort.truth));
    write_containers(out_dir / "reference_image.flowage", {to_container(reference_image(cfg.grid))});
    std::cout << "wrote " << cohort.subjects.size() << " subjects (" << cfg.n_train << " train, " << cfg.n_test
              << " test) to " << out_dir.string() << "\n"
              << "effective factor noise " << cohort.truth.effective_noise() << "\n";
    return 0;
}

int cmd_fit_subspace(const fs::path& manifest_path, std::size_t n_sub, const fs::path& out, bool standardize)
{
    const auto manifest = read_manifest(manifest_path);
    const auto entries = manifest.select("train");
    if (entries.size() < 2) throw ValidationError(manifest_path.string() + ": need at least 2 training subjects");
    std::vector<VelocityField> fields;
    fields.reserve(entries.size());
    for (const auto& e : entries) fields.push_back(read_velocity(e.velocity_path));
    const SubspaceModel model = fit_subspace(fields, n_sub, standardize);
    write_subspace(out, model);
    std::cout << "n_sub " << model.n_sub() << ", variance captured " << model.variance_captured << "\n";
    return 0;
}

int cmd_train(const fs::path& manifest_path, const fs::path& subspace_path, const fs::path& config_path,
              const fs::path& out, std::optional<std::uint64_t> seed, const std::string& log_path)
{
    const KeyValueConfig kv = KeyValueConfig::load(config_path);
    TrainingSetup setup = training_setup_from(kv);
    if (seed) {
        setup.train.seed = *seed;
        setup.flow_seed = *seed;
    }
    const SubspaceModel subspace = read_subspace(subspace_path);
    const Dataset data = project_entries(subspace, read_manifest(manifest_path).select("train"), "train");
    setup.flow.n_sub = subspace.n_sub();

    FlowModel flow = build_flow(setup.flow, setup.flow_seed);
    TrainResult result = train(std::move(flow), data.coords, data.ages, setup.train);

    AgingModel model;
    model.subspace = subspace;
    model.flow = std::move(result.model);
    model.train_config = setup.train;
    const std::string cfg_text = read_file(config_path);
    model.provenance.config_hash = fnv1a(cfg_text.data(), cfg_text.size());
    model.provenance.flow_seed = setup.flow_seed;
    model.provenance.train_seed = setup.train.seed;
    model.provenance.data_fingerprint = fingerprint(data.coords, data.ages);
    write_aging_model(out, model);

    if (!log_path.empty()) {
        std::string csv = "epoch,loss,age_mse,z_norm_mean,log_det_mean\n";
        for (const auto& r : result.records) {
            csv += std::to_string(r.epoch) + "," + format_double(r.loss) + "," + format_double(r.age_mse) + "," +
                   format_double(r.z_norm_mean) + "," + format_double(r.log_det_mean) + "\n";
        }
        write_file_atomic(log_path, csv);
    }
    if (!result.records.empty()) {
        const auto& last = result.records.back();
        std::cout << "epoch " << last.epoch << " loss " << last.loss << " age_mse " << last.age_mse << "\n";
    }
    return 0;
}

int cmd_predict(const fs::path& model_path, const fs::path& input, const std::string& format)
{
    const AgingModel model = read_aging_model(model_path);
    std::vector<std::pair<std::string, double>> rows; // id, prediction
    std::vector<std::optional<double>> known;
    if (input.extension() == ".csv") {
        for (const auto& e : read_manifest(input).entries) {
            rows.emplace_back(e.subject_id, predict_age(model, read_velocity(e.velocity_path)));
            known.push_back(e.age_years);
        }
    } else {
        rows.emplace_back(input.stem().string(), predict_age(model, read_velocity(input)));
        known.push_back(std::nullopt);
    }

    if (format == "json") {
        nlohmann::json j = nlohmann::json::array();
        for (std::size_t i = 0; i < rows.size(); ++i) {
            nlohmann::json r{{"subject_id", rows[i].first}, {"predicted_age_years", rows[i].second}};
            if (known[i]) r["age_years"] = *known[i];
            j.push_back(std::move(r));
        }
        std::cout << j.dump(2) << "\n";
    } else {
        std::cout << "subject_id,age_years,predicted_age_years\n";
        for (std::size_t i = 0; i < rows.size(); ++i) {
            std::cout << rows[i].first << "," << (known[i] ? format_double(*known[i]) : std::string{}) << ","
                      << format_double(rows[i].second) << "\n";
        }
    }
    return 0;
}

int cmd_sample(const fs::path& model_path, double age, std::size_t n, std::uint64_t seed, const fs::path& out_dir)
{
    const AgingModel model = read_aging_model(model_path);
    const Eigen::MatrixXd coords = sample_conditional(model, age, n, seed);
    TensorContainer c;
    c.role = "matrix";
    c.shape = {static_cast<std::size_t>(coords.rows()), static_cast<std::size_t>(coords.cols())};
    c.values.assign(coords.data(), coords.data() + coords.size());
    c.set("age_years", format_double(age));
    c.set("seed", std::to_string(seed));
    write_containers(out_dir / "coords.flowage", {c});
    for (Eigen::Index i = 0; i < coords.cols(); ++i) {
        char name[64];
        std::snprintf(name, sizeof(name), "sample_%06ld.flowage", static_cast<long>(i));
        write_containers(out_dir / name, {to_container(reconstruct(model.subspace, coords.col(i)))});
    }
    std::cout << "wrote " << n << " samples at age " << age << " to " << out_dir.string() << "\n";
    return 0;
}

int cmd_template(const fs::path& model_path, const std::vector<double>& ages, std::size_t n_samples,
                 const fs::path& template_path, const fs::path& out_dir, bool emit_jacobian, std::uint64_t seed,
                 int squarings)
{
    const AgingModel model = read_aging_model(model_path);
    const Volume reference = read_volume(template_path);
    detail::require_same_grid(model.subspace.mean.grid, reference.grid, "template");
    std::string csv = "age_years";
    for (std::size_t j = 0; j < model.subspace.n_sub(); ++j) csv += ",coord_" + std::to_string(j);
    csv += "\n";
    for (double age : ages) {
        const ConditionalTemplate t = conditional_template(model, age, n_samples, seed);
        const TemplateImages img = render_template(t.velocity, reference, squarings);
        const std::string tag = age_tag(age);
        write_containers(out_dir / ("velocity_" + tag + ".flowage"), {to_container(t.velocity)});
        write_containers(out_dir / ("template_" + tag + ".flowage"), {to_container(img.warped)});
        if (emit_jacobian) write_containers(out_dir / ("jacobian_" + tag + ".flowage"), {to_container(img.jacobian)});
        csv += format_double(age);
        for (Eigen::Index j = 0; j < t.coords.size(); ++j) csv += "," + format_double(t.coords(j));
        csv += "\n";
    }
    write_file_atomic(out_dir / "template_coords.csv", csv);
    std::cout << "wrote templates for " << ages.size() << " ages to " << out_dir.string() << "\n";
    return 0;
}

std::string report_table(const std::string& name, const EvalReport& r)
{
    std::ostringstream os;
    os << name << " (" << r.count << " subjects)\n";
    char line[128];
    for (const auto& b : r.per_bin) {
        if (b.mae) std::snprintf(line, sizeof(line), "  %-6s n=%-5zu MAE %.3f years\n", b.label.c_str(), b.count, *b.mae);
        else std::snprintf(line, sizeof(line), "  %-6s n=%-5zu MAE -\n", b.label.c_str(), b.count);
        os << line;
    }
    std::snprintf(line, sizeof(line), "  %-6s n=%-5zu MAE %.3f years\n", "All", r.count, r.overall_mae);
    os << line;
    return os.str();
}

std::string report_csv(const std::string& model, const EvalReport& r)
{
    std::string csv;
    for (const auto& b : r.per_bin) {
        csv += model + "," + b.label + "," + std::to_string(b.count) + "," + (b.mae ? format_double(*b.mae) : "") + "\n";
    }
    csv += model + ",All," + std::to_string(r.count) + "," + format_double(r.overall_mae) + "\n";
    return csv;
}

int cmd_eval(const fs::path& model_path, const fs::path& manifest_path, const std::string& baseline,
             const std::string& csv_path)
{
    const AgingModel model = read_aging_model(model_path);
    const auto manifest = read_manifest(manifest_path);
    const Dataset test = project_entries(model.subspace, manifest.select("test"), "eval");
    const EvalReport nf = evaluate_predictions(test.ages, predict_ages(model.flow, test.coords));
    std::string csv = "model,age_range,count,mae_years\n" + report_csv("nf", nf);
    std::cout << report_table("NF", nf);
    if (baseline == "mlr") {
        const Dataset train_set = project_entries(model.subspace, manifest.select("train"), "eval baseline");
        const MLRBaseline mlr = fit_mlr(train_set.coords, train_set.ages);
        if (mlr.ridge) std::cerr << "warning: MLR design is rank deficient, used ridge fallback\n";
        const EvalReport lr = evaluate_predictions(test.ages, predict_mlr(mlr, test.coords));
        std::cout << report_table("MLR", lr);
        csv += report_csv("mlr", lr);
    }
    if (!csv_path.empty()) write_file_atomic(csv_path, csv);
    return 0;
}

int cmd_exp(const fs::path& velocity, const fs::path& out, int squarings)
{
    write_containers(out, {to_container(svf_exp(read_velocity(velocity), squarings))});
    return 0;
}

int cmd_warp(const fs::path& image, const fs::path& deformation, const fs::path& out, bool nearest)
{
    Volume img = read_volume(image);
    if (nearest) img.interpolation = Interpolation::nearest;
    write_containers(out, {to_container(warp(img, read_deformation(deformation)))});
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Age-conditioned normalizing flow over velocity-field subspaces"};
    app.require_subcommand(1);

    std::string config, out_dir, manifest, out, subspace, log, model, input, format = "csv", template_path,
                                                                          baseline, csv_path, velocity, image,
                                                                          deformation;
    std::size_t n_sub = 0, n = 0, n_samples = 10000;
    std::uint64_t seed = 0;
    std::optional<std::uint64_t> train_seed;
    double age = 0.0;
    std::vector<double> ages{40, 50, 60, 70, 80, 90};
    bool emit_jacobian = false, nearest = false, no_standardize = false;
    int squarings = default_squarings;

    auto* synth = app.add_subcommand("synth", "Generate a synthetic cohort with a known generator");
    synth->add_option("--config", config, "Synth config (key = value)")->required()->check(CLI::ExistingFile);
    synth->add_option("--out-dir", out_dir, "Output directory")->required();

    auto* fit = app.add_subcommand("fit-subspace", "PCA of the training velocity fields");
    fit->add_option("--manifest", manifest, "Cohort CSV")->required()->check(CLI::ExistingFile);
    fit->add_option("--n-sub", n_sub, "Subspace dimension")->required();
    fit->add_option("--out", out, "Subspace checkpoint")->required();
    fit->add_flag("--no-standardize", no_standardize, "Keep raw PCA coordinates (no unit-variance scaling)");

    auto* tr = app.add_subcommand("train", "Maximum-likelihood training of the flow");
    tr->add_option("--manifest", manifest, "Cohort CSV")->required()->check(CLI::ExistingFile);
    tr->add_option("--subspace", subspace, "Subspace checkpoint")->required()->check(CLI::ExistingFile);
    tr->add_option("--config", config, "Training config (key = value)")->required()->check(CLI::ExistingFile);
    tr->add_option("--out", out, "Model checkpoint")->required();
    tr->add_option("--seed", train_seed, "Overrides seed and flow_seed");
    tr->add_option("--log", log, "Training log CSV");

    auto* pred = app.add_subcommand("predict", "Predict ages");
    pred->add_option("--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    pred->add_option("--input", input, "Velocity tensor or manifest CSV")->required()->check(CLI::ExistingFile);
    pred->add_option("--format", format, "Output format")->check(CLI::IsMember({"csv", "json"}));

    auto* samp = app.add_subcommand("sample", "Sample velocity fields conditioned on age");
    samp->add_option("--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    samp->add_option("--age", age, "Age in years")->required();
    samp->add_option("--n", n, "Number of samples")->required()->check(CLI::PositiveNumber);
    samp->add_option("--seed", seed, "Random seed")->required();
    samp->add_option("--out-dir", out_dir, "Output directory")->required();

    auto* tmpl = app.add_subcommand("template", "Monte-Carlo conditional templates E[v | age]");
    tmpl->add_option("--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    tmpl->add_option("--ages", ages, "Comma-separated ages")->delimiter(',');
    tmpl->add_option("--n-samples", n_samples, "Monte-Carlo samples per age")->check(CLI::PositiveNumber);
    tmpl->add_option("--template", template_path, "Reference volume")->required()->check(CLI::ExistingFile);
    tmpl->add_option("--out-dir", out_dir, "Output directory")->required();
    tmpl->add_flag("--emit-jacobian", emit_jacobian, "Also write Jacobian-determinant maps");
    tmpl->add_option("--seed", seed, "Random seed");
    tmpl->add_option("--squarings", squarings, "Scaling-and-squaring steps")->check(CLI::NonNegativeNumber);

    auto* ev = app.add_subcommand("eval", "MAE by age group on the test split");
    ev->add_option("--model", model, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--manifest", manifest, "Cohort CSV")->required()->check(CLI::ExistingFile);
    ev->add_option("--baseline", baseline, "Also evaluate a baseline")->check(CLI::IsMember({"mlr"}));
    ev->add_option("--csv", csv_path, "Write the report as CSV");

    auto* ex = app.add_subcommand("exp", "Exponential of a stationary velocity field");
    ex->add_option("--velocity", velocity, "Velocity tensor")->required()->check(CLI::ExistingFile);
    ex->add_option("--out", out, "Deformation tensor")->required();
    ex->add_option("--squarings", squarings, "Scaling-and-squaring steps")->check(CLI::NonNegativeNumber);

    auto* wp = app.add_subcommand("warp", "Warp a volume with a deformation");
    wp->add_option("--image", image, "Volume")->required()->check(CLI::ExistingFile);
    wp->add_option("--deformation", deformation, "Deformation tensor")->required()->check(CLI::ExistingFile);
    wp->add_option("--out", out, "Output volume")->required();
    wp->add_flag("--nearest", nearest, "Nearest-neighbour interpolation (label maps)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*synth) return cmd_synth(config, out_dir);
        if (*fit) return cmd_fit_subspace(manifest, n_sub, out, !no_standardize);
        if (*tr) return cmd_train(manifest, subspace, config, out, train_seed, log);
        if (*pred) return cmd_predict(model, input, format);
        if (*samp) return cmd_sample(model, age, n, seed, out_dir);
        if (*tmpl) return cmd_template(model, ages, n_samples, template_path, out_dir, emit_jacobian, seed, squarings);
        if (*ev) return cmd_eval(model, manifest, baseline, csv_path);
        if (*ex) return cmd_exp(velocity, out, squarings);
        if (*wp) return cmd_warp(image, deformation, out, nearest);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

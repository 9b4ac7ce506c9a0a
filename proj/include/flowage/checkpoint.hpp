#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "flowage/aging.hpp"
#include "flowage/container.hpp"
#include "flowage/error.hpp"
#include "flowage/flow.hpp"
#include "flowage/subspace.hpp"
#include "flowage/training.hpp"

// Checkpoints are multi-record container files. The first record (name "checkpoint")
// holds scalar metadata in its header; every following record holds one array and is
// identified by its `name` key. All arrays are f64.

namespace flowage {

inline constexpr int checkpoint_version = 1;

namespace detail {

inline TensorContainer array_record(const std::string& name, const std::string& role, std::vector<std::size_t> shape,
                                    const double* data, std::size_t n)
{
    TensorContainer t;
    t.role = role;
    t.shape = std::move(shape);
    t.values.assign(data, data + n);
    t.set("name", name);
    return t;
}

inline TensorContainer matrix_record(const std::string& name, const Eigen::MatrixXd& m)
{
    return array_record(name, "matrix", {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                        m.data(), static_cast<std::size_t>(m.size()));
}

inline TensorContainer vector_record(const std::string& name, const Eigen::VectorXd& v)
{
    return array_record(name, "vector", {static_cast<std::size_t>(v.size())}, v.data(), static_cast<std::size_t>(v.size()));
}

inline Eigen::MatrixXd to_matrix(const TensorContainer& t, const std::string& source)
{
    if (t.role != "matrix" || t.shape.size() != 2) throw ValidationError(source + ": expected a 2-d matrix record");
    return Eigen::Map<const Eigen::MatrixXd>(t.values.data(), static_cast<Eigen::Index>(t.shape[0]),
                                             static_cast<Eigen::Index>(t.shape[1]));
}

inline Eigen::VectorXd to_vector(const TensorContainer& t, const std::string& source)
{
    if (t.role != "vector" || t.shape.size() != 1) throw ValidationError(source + ": expected a 1-d vector record");
    return Eigen::Map<const Eigen::VectorXd>(t.values.data(), static_cast<Eigen::Index>(t.shape[0]));
}

/// Records of a checkpoint file indexed by name.
class RecordIndex {
public:
    RecordIndex(std::vector<TensorContainer> records, std::string source) : source_(std::move(source))
    {
        for (auto& r : records) {
            auto name = r.get("name");
            if (!name) throw ValidationError(source_ + ": checkpoint record without a name");
            if (!records_.emplace(*name, std::move(r)).second)
                throw ValidationError(source_ + ": duplicate checkpoint record '" + *name + "'");
        }
        if (!records_.count("checkpoint")) throw ValidationError(source_ + ": not a checkpoint (no metadata record)");
    }

    const TensorContainer& at(const std::string& name) const
    {
        auto it = records_.find(name);
        if (it == records_.end()) throw ValidationError(source_ + ": checkpoint has no record '" + name + "'");
        return it->second;
    }

    const TensorContainer& meta() const { return at("checkpoint"); }

    std::string meta_string(const std::string& key) const
    {
        auto v = meta().get(key);
        if (!v) throw ValidationError(source_ + ": checkpoint metadata lacks '" + key + "'");
        return *v;
    }

    double meta_double(const std::string& key) const
    {
        auto v = parse_double(meta_string(key));
        if (!v) throw ValidationError(source_ + ": checkpoint metadata '" + key + "' is not a number");
        return *v;
    }

    std::uint64_t meta_uint(const std::string& key) const
    {
        auto v = parse_uint(meta_string(key));
        if (!v) throw ValidationError(source_ + ": checkpoint metadata '" + key + "' is not an integer");
        return *v;
    }

    bool has(const std::string& name) const { return records_.count(name) > 0; }
    const std::string& source() const noexcept { return source_; }

private:
    std::string source_;
    std::map<std::string, TensorContainer> records_;
};

inline TensorContainer meta_record(const std::string& kind)
{
    TensorContainer t;
    t.role = "vector";
    t.shape = {0};
    t.set("name", "checkpoint");
    t.set("format_version", std::to_string(checkpoint_version));
    t.set("kind", kind);
    return t;
}

inline void append_subspace(std::vector<TensorContainer>& out, TensorContainer& meta, const SubspaceModel& s)
{
    meta.set("subspace.n_sub", std::to_string(s.n_sub()));
    meta.set("subspace.variance_captured", format_double(s.variance_captured));
    meta.set("subspace.standardized", s.standardized ? "true" : "false");
    auto mean = to_container(s.mean);
    mean.set("name", "subspace.mean");
    out.push_back(std::move(mean));
    out.push_back(matrix_record("subspace.basis", s.basis));
    out.push_back(vector_record("subspace.singular_values", s.singular_values));
    out.push_back(vector_record("subspace.coord_scale", s.coord_scale));
}

inline SubspaceModel load_subspace(const RecordIndex& idx)
{
    SubspaceModel s;
    s.mean = field_from_container<VelocityField>(idx.at("subspace.mean"), idx.source());
    s.basis = to_matrix(idx.at("subspace.basis"), idx.source());
    s.singular_values = to_vector(idx.at("subspace.singular_values"), idx.source());
    s.coord_scale = to_vector(idx.at("subspace.coord_scale"), idx.source());
    s.variance_captured = idx.meta_double("subspace.variance_captured");
    s.standardized = idx.meta_string("subspace.standardized") == "true";
    const auto n_sub = static_cast<Eigen::Index>(idx.meta_uint("subspace.n_sub"));
    if (s.basis.rows() != static_cast<Eigen::Index>(s.mean.data.size()) || s.basis.cols() != n_sub ||
        s.singular_values.size() != n_sub || s.coord_scale.size() != n_sub) {
        throw ValidationError(idx.source() + ": inconsistent subspace array sizes");
    }
    return s;
}

inline void write_train_config(TensorContainer& meta, const TrainConfig& t)
{
    meta.set("train.sigma", format_double(t.sigma));
    meta.set("train.epochs", std::to_string(t.epochs));
    meta.set("train.learning_rate", format_double(t.learning_rate));
    meta.set("train.weight_decay", format_double(t.weight_decay));
    meta.set("train.batch", t.batch == 0 ? "full" : std::to_string(t.batch));
    meta.set("train.seed", std::to_string(t.seed));
    meta.set("train.grad_check", t.grad_check ? "true" : "false");
    meta.set("train.record_every", std::to_string(t.record_every));
    meta.set("train.age_units", to_string(t.age_units));
    meta.set("train.beta1", format_double(t.beta1));
    meta.set("train.beta2", format_double(t.beta2));
    meta.set("train.epsilon", format_double(t.epsilon));
}

inline TrainConfig read_train_config(const RecordIndex& idx)
{
    TrainConfig t;
    t.sigma = idx.meta_double("train.sigma");
    t.epochs = idx.meta_uint("train.epochs");
    t.learning_rate = idx.meta_double("train.learning_rate");
    t.weight_decay = idx.meta_double("train.weight_decay");
    const auto batch = idx.meta_string("train.batch");
    t.batch = batch == "full" ? 0 : parse_uint(batch).value_or(0);
    t.seed = idx.meta_uint("train.seed");
    t.grad_check = idx.meta_string("train.grad_check") == "true";
    t.record_every = idx.meta_uint("train.record_every");
    t.age_units = age_units_from_string(idx.meta_string("train.age_units"));
    t.beta1 = idx.meta_double("train.beta1");
    t.beta2 = idx.meta_double("train.beta2");
    t.epsilon = idx.meta_double("train.epsilon");
    return t;
}

} // namespace detail

/// Serialized form of a flow: metadata keys go into `meta`, arrays are appended.
inline void append_flow_records(std::vector<TensorContainer>& out, TensorContainer& meta, const FlowModel& f)
{
    meta.set("flow.n_sub", std::to_string(f.config.n_sub));
    meta.set("flow.n_lay", std::to_string(f.config.n_lay));
    meta.set("flow.n_hid", std::to_string(f.config.n_hid));
    meta.set("flow.hidden", std::to_string(f.config.hidden));
    meta.set("flow.scale_clamp", format_double(f.config.scale_clamp));
    meta.set("flow.mixing", to_string(f.config.mixing));
    meta.set("flow.seed", std::to_string(f.seed));
    meta.set("flow.steps", std::to_string(f.steps.size()));
    meta.set("flow.age_norm_mean", format_double(f.age_norm.mean));
    meta.set("flow.age_norm_std", format_double(f.age_norm.std));

    for (std::size_t i = 0; i < f.steps.size(); ++i) {
        const std::string prefix = "flow.step[" + std::to_string(i) + "]";
        if (const auto* c = std::get_if<CouplingLayer>(&f.steps[i])) {
            for (std::size_t d = 0; d < c->net.layers.size(); ++d) {
                const std::string p = prefix + ".dense[" + std::to_string(d) + "]";
                out.push_back(detail::matrix_record(p + ".weight", c->net.layers[d].weight));
                out.push_back(detail::vector_record(p + ".bias", c->net.layers[d].bias));
            }
        } else {
            const auto& m = std::get<MixingTransform>(f.steps[i]);
            TensorContainer t = m.kind == MixingKind::orthogonal
                                    ? detail::matrix_record(prefix + ".mixing", m.matrix)
                                    : detail::array_record(prefix + ".mixing", "vector", {0}, nullptr, 0);
            t.set("kind", m.kind == MixingKind::orthogonal ? "orthogonal" : "reverse");
            t.set("seed", std::to_string(m.seed));
            out.push_back(std::move(t));
        }
    }
}

inline FlowModel load_flow(const detail::RecordIndex& idx)
{
    FlowModel f;
    f.config.n_sub = idx.meta_uint("flow.n_sub");
    f.config.n_lay = idx.meta_uint("flow.n_lay");
    f.config.n_hid = idx.meta_uint("flow.n_hid");
    f.config.hidden = idx.meta_uint("flow.hidden");
    f.config.scale_clamp = idx.meta_double("flow.scale_clamp");
    f.config.mixing = mixing_schedule_from_string(idx.meta_string("flow.mixing"));
    f.config.validate();
    f.seed = idx.meta_uint("flow.seed");
    f.age_norm = {idx.meta_double("flow.age_norm_mean"), idx.meta_double("flow.age_norm_std")};

    const std::size_t transformed = (f.config.n_sub + 1) / 2;
    const std::size_t conditioner = f.config.n_sub / 2;
    const std::size_t n_steps = idx.meta_uint("flow.steps");
    for (std::size_t i = 0; i < n_steps; ++i) {
        const std::string prefix = "flow.step[" + std::to_string(i) + "]";
        if (idx.has(prefix + ".mixing")) {
            const auto& r = idx.at(prefix + ".mixing");
            MixingTransform m;
            m.kind = r.require_key("kind") == "orthogonal" ? MixingKind::orthogonal : MixingKind::reverse;
            m.seed = parse_uint(r.require_key("seed")).value_or(0);
            if (m.kind == MixingKind::orthogonal) {
                m.matrix = detail::to_matrix(r, idx.source());
                if (m.matrix.rows() != static_cast<Eigen::Index>(f.config.n_sub) || m.matrix.cols() != m.matrix.rows())
                    throw ValidationError(idx.source() + ": " + prefix + " mixing matrix has wrong shape");
            }
            f.steps.emplace_back(std::move(m));
            continue;
        }
        CouplingLayer c;
        c.transformed = transformed;
        c.conditioner = conditioner;
        c.scale_clamp = f.config.scale_clamp;
        std::size_t fan_in = conditioner;
        for (std::size_t d = 0; d <= f.config.n_hid; ++d) {
            const std::string p = prefix + ".dense[" + std::to_string(d) + "]";
            Dense dense{detail::to_matrix(idx.at(p + ".weight"), idx.source()),
                        detail::to_vector(idx.at(p + ".bias"), idx.source())};
            const std::size_t fan_out = d == f.config.n_hid ? 2 * transformed : f.config.hidden;
            if (dense.weight.rows() != static_cast<Eigen::Index>(fan_out) ||
                dense.weight.cols() != static_cast<Eigen::Index>(fan_in) ||
                dense.bias.size() != static_cast<Eigen::Index>(fan_out)) {
                throw ValidationError(idx.source() + ": " + p + " has the wrong shape");
            }
            fan_in = fan_out;
            c.net.layers.push_back(std::move(dense));
        }
        f.steps.emplace_back(std::move(c));
    }
    return f;
}

// ---------------------------------------------------------------------------

inline std::vector<TensorContainer> subspace_checkpoint(const SubspaceModel& s)
{
    std::vector<TensorContainer> out;
    TensorContainer meta = detail::meta_record("subspace");
    out.push_back(TensorContainer{});
    detail::append_subspace(out, meta, s);
    out[0] = std::move(meta);
    return out;
}

inline std::vector<TensorContainer> aging_checkpoint(const AgingModel& m)
{
    m.validate();
    std::vector<TensorContainer> out;
    TensorContainer meta = detail::meta_record("aging");
    out.push_back(TensorContainer{});
    detail::append_subspace(out, meta, m.subspace);
    append_flow_records(out, meta, m.flow);
    meta.set("provenance.config_hash", std::to_string(m.provenance.config_hash));
    meta.set("provenance.flow_seed", std::to_string(m.provenance.flow_seed));
    meta.set("provenance.train_seed", std::to_string(m.provenance.train_seed));
    meta.set("provenance.data_fingerprint", std::to_string(m.provenance.data_fingerprint));
    if (m.train_config) detail::write_train_config(meta, *m.train_config);
    out[0] = std::move(meta);
    return out;
}

inline void write_subspace(const std::filesystem::path& path, const SubspaceModel& s)
{
    write_containers(path, subspace_checkpoint(s));
}

inline void write_aging_model(const std::filesystem::path& path, const AgingModel& m)
{
    write_containers(path, aging_checkpoint(m));
}

inline void check_checkpoint_version(const detail::RecordIndex& idx)
{
    const auto v = idx.meta_uint("format_version");
    if (v != static_cast<std::uint64_t>(checkpoint_version)) {
        throw ValidationError(idx.source() + ": unsupported checkpoint version " + std::to_string(v));
    }
}

/// Reads the subspace from either a subspace or a full model checkpoint.
inline SubspaceModel subspace_from_records(std::vector<TensorContainer> records, const std::string& source)
{
    detail::RecordIndex idx(std::move(records), source);
    check_checkpoint_version(idx);
    return detail::load_subspace(idx);
}

inline AgingModel aging_model_from_records(std::vector<TensorContainer> records, const std::string& source)
{
    detail::RecordIndex idx(std::move(records), source);
    check_checkpoint_version(idx);
    if (idx.meta_string("kind") != "aging") throw ValidationError(source + ": not a trained model checkpoint");
    AgingModel m;
    m.subspace = detail::load_subspace(idx);
    m.flow = load_flow(idx);
    m.provenance.config_hash = idx.meta_uint("provenance.config_hash");
    m.provenance.flow_seed = idx.meta_uint("provenance.flow_seed");
    m.provenance.train_seed = idx.meta_uint("provenance.train_seed");
    m.provenance.data_fingerprint = idx.meta_uint("provenance.data_fingerprint");
    if (idx.meta().get("train.sigma")) m.train_config = detail::read_train_config(idx);
    m.validate();
    return m;
}

inline SubspaceModel read_subspace(const std::filesystem::path& path)
{
    return subspace_from_records(read_containers(path), path.string());
}

inline AgingModel read_aging_model(const std::filesystem::path& path)
{
    return aging_model_from_records(read_containers(path), path.string());
}

} // namespace flowage

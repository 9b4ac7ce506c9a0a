#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include <Eigen/Dense>

#include "flowage/error.hpp"
#include "flowage/field.hpp"

namespace flowage {

/// Coordinates of a velocity field in the PCA subspace, scaled by coord_scale.
using CoordVector = Eigen::VectorXd;

/// Affine subspace {mean + Q c} of maximum variation of a set of velocity fields.
struct SubspaceModel {
    VelocityField mean;
    Eigen::MatrixXd basis;           // 3*n_vox x n_sub, orthonormal columns
    Eigen::VectorXd singular_values; // descending, > 0
    Eigen::VectorXd coord_scale;     // sigma_j / sqrt(n_pop - 1), or 1 when not standardized
    double variance_captured = 0.0;
    bool standardized = true;

    std::size_t n_sub() const noexcept { return static_cast<std::size_t>(basis.cols()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(basis.rows()); }
};

namespace detail {

inline Eigen::Map<const Eigen::VectorXd> as_vector(const VelocityField& v)
{
    return {v.data.data(), static_cast<Eigen::Index>(v.data.size())};
}

// Flip each column so its largest-magnitude entry (first one on ties) is positive.
inline void fix_column_signs(Eigen::MatrixXd& q)
{
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index i = 0; i < q.rows(); ++i) {
            const double m = std::abs(q(i, j));
            if (m > best) {
                best = m;
                arg = i;
            }
        }
        if (q(arg, j) < 0.0) q.col(j) = -q.col(j);
    }
}

} // namespace detail

/// PCA of velocity fields.
///
/// The centered data matrix X (3*n_vox x n_pop, one field per column) is reduced by a
/// Householder QR, X = Q_x R, and the small n_pop x n_pop factor R is decomposed with a
/// divide-and-conquer SVD, so the cost is dominated by the QR when 3*n_vox >> n_pop. When the fields
/// have fewer entries than there are samples, the data matrix is decomposed directly.
inline SubspaceModel fit_subspace(std::span<const VelocityField> fields, std::size_t n_sub,
                                  bool standardize_coords = true)
{
    const std::size_t n_pop = fields.size();
    detail::require(n_pop >= 2, "fit_subspace: need at least 2 fields");
    const Grid& grid = fields[0].grid;
    for (std::size_t i = 0; i < n_pop; ++i) {
        fields[i].validate("fit_subspace: field");
        detail::require_same_grid(grid, fields[i].grid, "fit_subspace");
    }
    const std::size_t dim = 3 * grid.voxel_count();
    detail::require(n_sub >= 1 && n_sub <= n_pop - 1 && n_sub <= dim,
                    "fit_subspace: n_sub=" + std::to_string(n_sub) + " must lie in [1, min(n_pop-1, 3*n_vox)] = [1, " +
                        std::to_string(std::min(n_pop - 1, dim)) + "]");

    const auto rows = static_cast<Eigen::Index>(dim);
    const auto cols = static_cast<Eigen::Index>(n_pop);

    Eigen::VectorXd mean = Eigen::VectorXd::Zero(rows);
    for (const auto& f : fields) mean += detail::as_vector(f);
    mean /= static_cast<double>(n_pop);

    Eigen::MatrixXd x(rows, cols);
    for (Eigen::Index i = 0; i < cols; ++i) x.col(i) = detail::as_vector(fields[static_cast<std::size_t>(i)]) - mean;
    const double total = x.squaredNorm();

    Eigen::MatrixXd basis;
    Eigen::VectorXd sv;
    if (rows > cols) {
        Eigen::HouseholderQR<Eigen::Ref<Eigen::MatrixXd>> qr(x);
        const Eigen::MatrixXd r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
        // X = Q_x R and R = U S W^T  =>  X = (Q_x U) S W^T, left singular vectors of X are Q_x U.
        Eigen::BDCSVD<Eigen::MatrixXd> svd(r, Eigen::ComputeFullU);
        sv = svd.singularValues();
        Eigen::MatrixXd u_small = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(n_sub));
        u_small.topRows(cols) = svd.matrixU().leftCols(static_cast<Eigen::Index>(n_sub));
        basis = qr.householderQ() * u_small;
    } else {
        // Fields are rows of X^T here; the right singular vectors span the field space.
        Eigen::MatrixXd xt = x.transpose();
        Eigen::BDCSVD<Eigen::MatrixXd> svd(xt, Eigen::ComputeThinV);
        sv = svd.singularValues();
        basis = svd.matrixV().leftCols(static_cast<Eigen::Index>(n_sub));
    }

    const double largest = sv.size() > 0 ? sv(0) : 0.0;
    if (!(largest > 0.0)) throw NumericalError("fit_subspace: all fields are identical (zero variance)");
    for (std::size_t j = 0; j < n_sub; ++j) {
        const double s = sv(static_cast<Eigen::Index>(j));
        if (!(s >= 1e-12 * largest)) {
            throw NumericalError("fit_subspace: rank deficient data, principal component " + std::to_string(j) +
                                 " has singular value " + std::to_string(s) + " < 1e-12 * " +
                                 std::to_string(largest));
        }
    }
    detail::fix_column_signs(basis);

    SubspaceModel model;
    model.mean = VelocityField{grid, std::vector<double>(mean.data(), mean.data() + mean.size())};
    model.basis = std::move(basis);
    model.singular_values = sv.head(static_cast<Eigen::Index>(n_sub));
    model.standardized = standardize_coords;
    model.coord_scale = standardize_coords
                            ? Eigen::VectorXd(model.singular_values / std::sqrt(static_cast<double>(n_pop - 1)))
                            : Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n_sub));
    model.variance_captured = model.singular_values.squaredNorm() / total;
    return model;
}

inline CoordVector project(const SubspaceModel& model, const VelocityField& v)
{
    v.validate("project: field");
    detail::require_same_grid(model.mean.grid, v.grid, "project");
    const Eigen::VectorXd centered = detail::as_vector(v) - detail::as_vector(model.mean);
    return (model.basis.transpose() * centered).cwiseQuotient(model.coord_scale);
}

inline VelocityField reconstruct(const SubspaceModel& model, const CoordVector& coords)
{
    detail::require(static_cast<std::size_t>(coords.size()) == model.n_sub(),
                    "reconstruct: expected " + std::to_string(model.n_sub()) + " coordinates, got " +
                        std::to_string(coords.size()));
    detail::require(coords.allFinite(), "reconstruct: non-finite coordinates");
    const Eigen::VectorXd v = detail::as_vector(model.mean) + model.basis * coords.cwiseProduct(model.coord_scale);
    return VelocityField{model.mean.grid, std::vector<double>(v.data(), v.data() + v.size())};
}

} // namespace flowage

#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flowage/error.hpp"

namespace flowage {

/// Voxel grid shared by fields and volumes. Data is stored x-fastest.
struct Grid {
    std::array<std::size_t, 3> dims{0, 0, 0};
    std::array<double, 3> spacing{1.0, 1.0, 1.0}; // mm per voxel

    std::size_t voxel_count() const noexcept { return dims[0] * dims[1] * dims[2]; }

    std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept
    {
        return x + dims[0] * (y + dims[1] * z);
    }

    void validate() const
    {
        for (int a = 0; a < 3; ++a) {
            detail::require(dims[a] > 0, "grid dimension " + std::to_string(a) + " is zero");
            detail::require(std::isfinite(spacing[a]) && spacing[a] > 0.0,
                            "grid spacing " + std::to_string(a) + " must be finite and positive");
        }
    }

    friend bool operator==(const Grid&, const Grid&) = default;
};

namespace detail {

inline void require_finite(std::span<const double> values, const char* what)
{
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw ValidationError(std::string(what) + ": non-finite value at element " + std::to_string(i));
        }
    }
}

inline void require_same_grid(const Grid& a, const Grid& b, const char* what)
{
    if (!(a == b)) throw ValidationError(std::string(what) + ": grid dims/spacing mismatch");
}

} // namespace detail

/// Dense field of 3-vectors in mm, one per voxel, components interleaved.
template <class Tag>
struct VectorField {
    Grid grid;
    std::vector<double> data; // size 3 * voxel_count

    static VectorField zeros(const Grid& g)
    {
        g.validate();
        return VectorField{g, std::vector<double>(3 * g.voxel_count(), 0.0)};
    }

    std::size_t voxel_count() const noexcept { return grid.voxel_count(); }

    double& at(std::size_t voxel, int c) { return data[3 * voxel + static_cast<std::size_t>(c)]; }
    double at(std::size_t voxel, int c) const { return data[3 * voxel + static_cast<std::size_t>(c)]; }

    void validate(const char* what = "vector field") const
    {
        grid.validate();
        detail::require(data.size() == 3 * grid.voxel_count(),
                        std::string(what) + ": data length does not match 3*nx*ny*nz");
        detail::require_finite(data, what);
    }

    friend bool operator==(const VectorField&, const VectorField&) = default;
};

struct VelocityTag {};
struct DeformationTag {};

/// Stationary velocity field v; exp(v) is a diffeomorphism.
using VelocityField = VectorField<VelocityTag>;
/// Displacement d of a deformation phi(x) = x + d(x).
using DeformationField = VectorField<DeformationTag>;

enum class Interpolation { trilinear, nearest };

/// Scalar image on a grid: templates, warped outputs, Jacobian-determinant maps.
struct Volume {
    Grid grid;
    std::vector<double> data;
    Interpolation interpolation = Interpolation::trilinear;

    static Volume filled(const Grid& g, double value, Interpolation interp = Interpolation::trilinear)
    {
        g.validate();
        return Volume{g, std::vector<double>(g.voxel_count(), value), interp};
    }

    void validate(const char* what = "volume") const
    {
        grid.validate();
        detail::require(data.size() == grid.voxel_count(),
                        std::string(what) + ": data length does not match nx*ny*nz");
        detail::require_finite(data, what);
    }

    friend bool operator==(const Volume&, const Volume&) = default;
};

} // namespace flowage

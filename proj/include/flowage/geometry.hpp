#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

#include "flowage/error.hpp"
#include "flowage/field.hpp"

namespace flowage {

inline constexpr int default_squarings = 8;

namespace detail {

// Interpolation stencil along one axis. Sample points are clamped to the grid.
struct AxisStencil {
    std::size_t lo;
    std::size_t hi;
    double frac;
};

inline AxisStencil axis_stencil(double p, std::size_t n) noexcept
{
    const double top = static_cast<double>(n - 1);
    if (!(p > 0.0)) return {0, 0, 0.0};
    if (p >= top) return {n - 1, n - 1, 0.0};
    const double fl = std::floor(p);
    const auto lo = static_cast<std::size_t>(fl);
    return {lo, lo + 1, p - fl};
}

// Trilinear interpolation of `components` interleaved channels at voxel coordinate p.
template <int Components>
inline std::array<double, Components> sample_trilinear(const Grid& g, const double* data,
                                                       const std::array<double, 3>& p) noexcept
{
    const AxisStencil sx = axis_stencil(p[0], g.dims[0]);
    const AxisStencil sy = axis_stencil(p[1], g.dims[1]);
    const AxisStencil sz = axis_stencil(p[2], g.dims[2]);

    std::array<double, Components> out{};
    const std::size_t zs[2] = {sz.lo, sz.hi};
    const std::size_t ys[2] = {sy.lo, sy.hi};
    const double wz[2] = {1.0 - sz.frac, sz.frac};
    const double wy[2] = {1.0 - sy.frac, sy.frac};
    for (int c = 0; c < Components; ++c) {
        double acc_z[2];
        for (int k = 0; k < 2; ++k) {
            double acc_y[2];
            for (int j = 0; j < 2; ++j) {
                const double a = data[Components * g.index(sx.lo, ys[j], zs[k]) + c];
                const double b = data[Components * g.index(sx.hi, ys[j], zs[k]) + c];
                acc_y[j] = (1.0 - sx.frac) * a + sx.frac * b;
            }
            acc_z[k] = wy[0] * acc_y[0] + wy[1] * acc_y[1];
        }
        out[c] = wz[0] * acc_z[0] + wz[1] * acc_z[1];
    }
    return out;
}

inline double sample_nearest(const Grid& g, const double* data, const std::array<double, 3>& p) noexcept
{
    std::size_t idx[3];
    for (int a = 0; a < 3; ++a) {
        const double top = static_cast<double>(g.dims[a] - 1);
        const double r = std::round(std::clamp(p[a], 0.0, top));
        idx[a] = static_cast<std::size_t>(r);
    }
    return data[g.index(idx[0], idx[1], idx[2])];
}

// Voxel coordinate reached from grid node (x, y, z) by a displacement in mm.
inline std::array<double, 3> displaced_point(const Grid& g, std::size_t x, std::size_t y, std::size_t z,
                                             const double* disp) noexcept
{
    return {static_cast<double>(x) + disp[0] / g.spacing[0], static_cast<double>(y) + disp[1] / g.spacing[1],
            static_cast<double>(z) + disp[2] / g.spacing[2]};
}

template <class F>
inline void for_each_voxel(const Grid& g, F&& f)
{
    for (std::size_t z = 0; z < g.dims[2]; ++z)
        for (std::size_t y = 0; y < g.dims[1]; ++y)
            for (std::size_t x = 0; x < g.dims[0]; ++x) f(x, y, z, g.index(x, y, z));
}

} // namespace detail

/// Returns outer ∘ inner: d(x) = d_inner(x) + d_outer(x + d_inner(x)).
inline DeformationField compose(const DeformationField& outer, const DeformationField& inner)
{
    outer.validate("compose: outer");
    inner.validate("compose: inner");
    detail::require_same_grid(outer.grid, inner.grid, "compose");

    const Grid& g = inner.grid;
    DeformationField out{g, std::vector<double>(inner.data.size())};
    detail::for_each_voxel(g, [&](std::size_t x, std::size_t y, std::size_t z, std::size_t v) {
        const double* din = &inner.data[3 * v];
        const auto p = detail::displaced_point(g, x, y, z, din);
        const auto dout = detail::sample_trilinear<3>(g, outer.data.data(), p);
        for (int c = 0; c < 3; ++c) out.data[3 * v + c] = din[c] + dout[c];
    });
    return out;
}

/// Group exponential of a stationary velocity field by scaling and squaring.
///
/// The field is scaled by 2^-n_squarings, taken as a small displacement, and
/// composed with itself n_squarings times.
inline DeformationField svf_exp(const VelocityField& v, int n_squarings = default_squarings)
{
    v.validate("svf_exp: velocity");
    detail::require(n_squarings >= 0, "svf_exp: n_squarings must be >= 0");

    const double scale = std::ldexp(1.0, -n_squarings);
    DeformationField phi{v.grid, v.data};
    for (double& d : phi.data) d *= scale;
    for (int i = 0; i < n_squarings; ++i) phi = compose(phi, phi);
    return phi;
}

/// Resamples img at x + d(x). Out-of-grid points read the border voxel.
inline Volume warp(const Volume& img, const DeformationField& phi)
{
    img.validate("warp: image");
    phi.validate("warp: deformation");
    detail::require_same_grid(img.grid, phi.grid, "warp");

    const Grid& g = img.grid;
    Volume out{g, std::vector<double>(img.data.size()), img.interpolation};
    detail::for_each_voxel(g, [&](std::size_t x, std::size_t y, std::size_t z, std::size_t v) {
        const auto p = detail::displaced_point(g, x, y, z, &phi.data[3 * v]);
        out.data[v] = img.interpolation == Interpolation::nearest
                          ? detail::sample_nearest(g, img.data.data(), p)
                          : detail::sample_trilinear<1>(g, img.data.data(), p)[0];
    });
    return out;
}

/// Per-voxel det(∂phi/∂x), central differences inside, one-sided at the borders.
inline Volume jacobian_det_map(const DeformationField& phi)
{
    phi.validate("jacobian_det_map");
    const Grid& g = phi.grid;
    for (int a = 0; a < 3; ++a) {
        detail::require(g.dims[a] >= 2, "jacobian_det_map: every dimension must have at least 2 voxels");
    }

    Volume out{g, std::vector<double>(g.voxel_count()), Interpolation::trilinear};
    detail::for_each_voxel(g, [&](std::size_t x, std::size_t y, std::size_t z, std::size_t v) {
        const std::size_t pos[3] = {x, y, z};
        // m[c][a] = ∂d_c / ∂x_a
        double m[3][3];
        for (int a = 0; a < 3; ++a) {
            std::size_t lo[3] = {x, y, z};
            std::size_t hi[3] = {x, y, z};
            double steps = 2.0;
            if (pos[a] == 0) {
                hi[a] = 1;
                steps = 1.0;
            } else if (pos[a] == g.dims[a] - 1) {
                lo[a] = pos[a] - 1;
                steps = 1.0;
            } else {
                lo[a] = pos[a] - 1;
                hi[a] = pos[a] + 1;
            }
            const double* dlo = &phi.data[3 * g.index(lo[0], lo[1], lo[2])];
            const double* dhi = &phi.data[3 * g.index(hi[0], hi[1], hi[2])];
            const double h = steps * g.spacing[a];
            for (int c = 0; c < 3; ++c) m[c][a] = (dhi[c] - dlo[c]) / h;
        }
        for (int c = 0; c < 3; ++c) m[c][c] += 1.0;

        out.data[v] = m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1] -
                      m[0][2] * m[1][1] * m[2][0] - m[0][1] * m[1][0] * m[2][2] - m[0][0] * m[1][2] * m[2][1];
    });
    return out;
}

} // namespace flowage

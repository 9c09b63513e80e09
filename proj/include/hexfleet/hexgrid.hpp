#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <utility>
#include <vector>

namespace hexfleet {

using CellId = int;

struct Axial {
    int q = 0;
    int r = 0;
    friend bool operator==(const Axial&, const Axial&) = default;
};

/**
 * Rhombus-shaped hexagonal tessellation in axial coordinates.
 *
 * Cell ids are row-major: id = r * cols + q. Adjacency uses the six axial
 * offsets, so interior cells have six neighbours and boundary cells two to
 * five. Station hexes are chosen once at construction; the grid is immutable
 * afterwards.
 */
class HexGrid {
public:
    HexGrid() = default;
    HexGrid(int rows, int cols, double hex_pitch_km);

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    int size() const { return rows_ * cols_; }
    double hex_pitch_km() const { return pitch_km_; }

    bool contains(CellId h) const { return h >= 0 && h < size(); }
    Axial coord(CellId h) const;
    std::optional<CellId> cell_at(Axial a) const;
    const std::vector<CellId>& neighbors(CellId h) const;

    /// Shortest path length in the adjacency graph. Throws on unknown ids.
    int hop_distance(CellId a, CellId b) const;
    double distance_km(CellId a, CellId b) const { return hop_distance(a, b) * pitch_km_; }

    /// Pointy-top hex center in km, origin at cell 0.
    std::pair<double, double> center_km(CellId h) const;
    /// Nearest cell to a planar point, clamped onto the grid.
    CellId locate(double x_km, double y_km) const;

    const std::vector<CellId>& stations() const { return stations_; }
    bool is_station(CellId h) const;
    /// True when the spacing rule could not place every station.
    bool station_spacing_fallback() const { return spacing_fallback_; }
    int exclusion_radius() const { return exclusion_radius_; }

    /// One "h1 h2" line per undirected edge, h1 < h2.
    void write_edge_list(std::ostream& os) const;

private:
    friend HexGrid build_grid(int, int, double, int, std::uint64_t, std::span<const double>, int);

    int rows_ = 0;
    int cols_ = 0;
    double pitch_km_ = 1.0;
    std::vector<std::vector<CellId>> adj_;
    std::vector<CellId> stations_;
    bool spacing_fallback_ = false;
    int exclusion_radius_ = 0;
};

/**
 * Builds a rows x cols grid and places n_stations charging hexes.
 *
 * Stations are taken greedily in descending order of demand_hint, skipping
 * any hex within exclusion_radius hops of an already chosen one. Slots left
 * over when spacing cannot be met are filled by descending demand. Ties in
 * the hint (including the all-uniform case when no hint is given) are broken
 * by a seeded shuffle.
 */
HexGrid build_grid(int rows, int cols, double hex_pitch_km, int n_stations, std::uint64_t seed,
                   std::span<const double> demand_hint = {}, int exclusion_radius = 2);

struct GraphMatrices {
    Eigen::MatrixXd a_hat;              ///< D~^{-1/2} (A + I) D~^{-1/2}
    Eigen::MatrixXd laplacian;          ///< D - A
    Eigen::SparseMatrix<double> q_graph;  ///< blockdiag(L (+) L, L (+) L), size 2m^2
};

GraphMatrices graph_matrices(const HexGrid& grid);

/// Kronecker sum L (+) L = L (x) I + I (x) L.
Eigen::SparseMatrix<double> kronecker_sum(const Eigen::MatrixXd& l);

}  // namespace hexfleet

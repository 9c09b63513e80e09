#include "hexfleet/hexgrid.hpp"

#include "hexfleet/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>

namespace hexfleet {

namespace {

constexpr Axial kOffsets[6] = {{1, 0}, {-1, 0}, {0, 1}, {0, -1}, {1, -1}, {-1, 1}};

}  // namespace

HexGrid::HexGrid(int rows, int cols, double hex_pitch_km)
    : rows_(rows), cols_(cols), pitch_km_(hex_pitch_km) {
    if (rows <= 0 || cols <= 0) {
        throw std::invalid_argument("grid dimensions must be positive, got " + std::to_string(rows) +
                                    "x" + std::to_string(cols));
    }
    if (!(hex_pitch_km > 0.0)) throw std::invalid_argument("hex pitch must be positive");
    adj_.resize(static_cast<std::size_t>(size()));
    for (CellId h = 0; h < size(); ++h) {
        const Axial a = coord(h);
        for (const Axial& d : kOffsets) {
            if (auto n = cell_at({a.q + d.q, a.r + d.r})) adj_[h].push_back(*n);
        }
        std::sort(adj_[h].begin(), adj_[h].end());
    }
}

Axial HexGrid::coord(CellId h) const {
    if (!contains(h)) throw std::invalid_argument("unknown cell id " + std::to_string(h));
    return {h % cols_, h / cols_};
}

std::optional<CellId> HexGrid::cell_at(Axial a) const {
    if (a.q < 0 || a.q >= cols_ || a.r < 0 || a.r >= rows_) return std::nullopt;
    return a.r * cols_ + a.q;
}

const std::vector<CellId>& HexGrid::neighbors(CellId h) const {
    if (!contains(h)) throw std::invalid_argument("unknown cell id " + std::to_string(h));
    return adj_[h];
}

int HexGrid::hop_distance(CellId a, CellId b) const {
    const Axial x = coord(a);
    const Axial y = coord(b);
    // The rhombus is convex in axial space, so graph distance equals hex distance.
    const int dq = x.q - y.q;
    const int dr = x.r - y.r;
    return std::max({std::abs(dq), std::abs(dr), std::abs(dq + dr)});
}

std::pair<double, double> HexGrid::center_km(CellId h) const {
    const Axial a = coord(h);
    return {pitch_km_ * (a.q + 0.5 * a.r), pitch_km_ * (std::sqrt(3.0) / 2.0) * a.r};
}

CellId HexGrid::locate(double x_km, double y_km) const {
    const double fr = y_km / (pitch_km_ * std::sqrt(3.0) / 2.0);
    const double fq = x_km / pitch_km_ - 0.5 * fr;
    const double fs = -fq - fr;
    double rq = std::round(fq), rr = std::round(fr), rs = std::round(fs);
    const double dq = std::abs(rq - fq), dr = std::abs(rr - fr), ds = std::abs(rs - fs);
    if (dq > dr && dq > ds) {
        rq = -rr - rs;
    } else if (dr > ds) {
        rr = -rq - rs;
    }
    const int q = std::clamp(static_cast<int>(rq), 0, cols_ - 1);
    const int r = std::clamp(static_cast<int>(rr), 0, rows_ - 1);
    return r * cols_ + q;
}

bool HexGrid::is_station(CellId h) const {
    return std::find(stations_.begin(), stations_.end(), h) != stations_.end();
}

void HexGrid::write_edge_list(std::ostream& os) const {
    for (CellId h = 0; h < size(); ++h) {
        for (CellId n : adj_[h]) {
            if (h < n) os << h << ' ' << n << '\n';
        }
    }
}

HexGrid build_grid(int rows, int cols, double hex_pitch_km, int n_stations, std::uint64_t seed,
                   std::span<const double> demand_hint, int exclusion_radius) {
    HexGrid grid(rows, cols, hex_pitch_km);
    const int m = grid.size();
    if (n_stations < 0 || n_stations > m) {
        throw std::invalid_argument("n_stations must lie in [0, rows*cols]");
    }
    if (!demand_hint.empty() && static_cast<int>(demand_hint.size()) != m) {
        throw std::invalid_argument("demand_hint must have one entry per cell");
    }
    if (exclusion_radius < 0) throw std::invalid_argument("exclusion radius must be >= 0");
    grid.exclusion_radius_ = exclusion_radius;

    std::vector<CellId> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, 0x57a7));
    std::shuffle(order.begin(), order.end(), rng);
    auto hint = [&](CellId h) { return demand_hint.empty() ? 1.0 : demand_hint[h]; };
    std::stable_sort(order.begin(), order.end(), [&](CellId a, CellId b) { return hint(a) > hint(b); });

    std::vector<CellId> chosen;
    for (CellId h : order) {
        if (static_cast<int>(chosen.size()) == n_stations) break;
        const bool spaced = std::all_of(chosen.begin(), chosen.end(), [&](CellId s) {
            return grid.hop_distance(h, s) > exclusion_radius;
        });
        if (spaced) chosen.push_back(h);
    }
    if (static_cast<int>(chosen.size()) < n_stations) {
        grid.spacing_fallback_ = true;
        for (CellId h : order) {
            if (static_cast<int>(chosen.size()) == n_stations) break;
            if (std::find(chosen.begin(), chosen.end(), h) == chosen.end()) chosen.push_back(h);
        }
    }
    grid.stations_ = std::move(chosen);
    return grid;
}

Eigen::SparseMatrix<double> kronecker_sum(const Eigen::MatrixXd& l) {
    const Eigen::Index m = l.rows();
    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index a = 0; a < m; ++a) {
        for (Eigen::Index b = 0; b < m; ++b) {
            const Eigen::Index row = a * m + b;
            for (Eigen::Index c = 0; c < m; ++c) {
                if (l(a, c) != 0.0) trips.emplace_back(row, c * m + b, l(a, c));
                if (l(b, c) != 0.0) trips.emplace_back(row, a * m + c, l(b, c));
            }
        }
    }
    Eigen::SparseMatrix<double> out(m * m, m * m);
    out.setFromTriplets(trips.begin(), trips.end());
    return out;
}

GraphMatrices graph_matrices(const HexGrid& grid) {
    const int m = grid.size();
    Eigen::MatrixXd adj = Eigen::MatrixXd::Zero(m, m);
    for (CellId h = 0; h < m; ++h) {
        for (CellId n : grid.neighbors(h)) adj(h, n) = 1.0;
    }
    GraphMatrices g;
    const Eigen::MatrixXd a_tilde = adj + Eigen::MatrixXd::Identity(m, m);
    const Eigen::VectorXd inv_sqrt = a_tilde.rowwise().sum().cwiseSqrt().cwiseInverse();
    g.a_hat = inv_sqrt.asDiagonal() * a_tilde * inv_sqrt.asDiagonal();
    g.laplacian = Eigen::MatrixXd(adj.rowwise().sum().asDiagonal()) - adj;

    const Eigen::SparseMatrix<double> ks = kronecker_sum(g.laplacian);
    const Eigen::Index n = ks.rows();
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(2 * ks.nonZeros()));
    for (int block = 0; block < 2; ++block) {
        for (Eigen::Index k = 0; k < ks.outerSize(); ++k) {
            for (Eigen::SparseMatrix<double>::InnerIterator it(ks, k); it; ++it) {
                trips.emplace_back(block * n + it.row(), block * n + it.col(), it.value());
            }
        }
    }
    g.q_graph.resize(2 * n, 2 * n);
    g.q_graph.setFromTriplets(trips.begin(), trips.end());
    return g;
}

}  // namespace hexfleet

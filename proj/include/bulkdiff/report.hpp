#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bulkdiff/estimator.hpp"
#include "bulkdiff/expansion.hpp"

namespace bulkdiff {

/// One CSV row per estimate; shortest round-trip decimals keep output
/// byte-stable across platforms and thread counts.
struct CsvReport {
    static constexpr const char* kHeader =
        "field_id,m,rho0,quantity,value,stderr,n_outer,n_max,grid_h";

    std::vector<std::string> rows;

    void add(uint64_t field_id, int m, double rho0, const std::string& quantity, double value,
             double stderr_, long n_outer, int n_max, double grid_h) {
        std::ostringstream os;
        os << field_id << ',' << m << ',' << format_double(rho0) << ',' << quantity << ','
           << format_double(value) << ',' << format_double(stderr_) << ',' << n_outer << ',' << n_max
           << ',' << format_double(grid_h);
        rows.push_back(os.str());
    }

    std::string str() const {
        std::string out = std::string(kHeader) + "\n";
        for (const auto& r : rows) out += r + "\n";
        return out;
    }

    void write(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f << str();
    }
};

inline nlohmann::json estimate_to_json(const MCEstimate& e) {
    return {{"value", e.value},           {"value_truncated", e.value_truncated},
            {"stderr", e.stderr_},        {"disc_err", e.disc_err},
            {"tail_bound", e.tail_bound}, {"n_outer", e.n_outer},
            {"n_max", e.n_max},           {"points", e.points},
            {"seed", e.seed},             {"unconverged", e.unconverged}};
}

inline nlohmann::json matrix_to_json(const SymMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.dim; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < m.dim; ++j) row.push_back(m.at(i, j));
        rows.push_back(row);
    }
    return rows;
}

/// Two-column gnuplot data: rho  |R_k| (plus a stderr column).
inline void write_remainder_plot(const ExpansionReport& rep, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    f << "# rho  |R_" << rep.k << "|  stderr   (m=" << rep.m << ", rho0=" << format_double(rep.rho0)
      << ", fitted slope " << format_double(rep.fitted_slope) << ")\n";
    for (size_t i = 0; i < rep.rho_grid.size(); ++i)
        f << format_double(rep.rho_grid[i]) << ' ' << format_double(std::abs(rep.remainder[i])) << ' '
          << format_double(rep.remainder_stderr[i]) << '\n';
}

}  // namespace bulkdiff

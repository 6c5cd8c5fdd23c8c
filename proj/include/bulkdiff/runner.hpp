#pragma once

#include <memory>
#include <string>

#include "bulkdiff/config.hpp"
#include "bulkdiff/oracle.hpp"
#include "bulkdiff/report.hpp"

namespace bulkdiff {

struct RunArtifacts {
    CsvReport csv;
    nlohmann::json json;
    std::vector<std::pair<std::string, std::string>> gnuplot_files;  // name -> contents path written later
};

/// Executes every requested quantity of a run config. All randomness flows
/// from (config, seed); output is byte-stable for any thread count.
inline RunArtifacts run_estimate(const RunConfig& rc) {
    RunArtifacts art;
    // a field that fails the locality audit is unusable by the estimator;
    // probe both a lone particle (never masked by near neighbors) and a sampled cloud
    {
        CounterRng rng(rc.mc.seed, 0x10ca117e);
        PointConfiguration lone(rc.dim);
        lone.push(Vec(rc.dim));
        PointConfiguration cloud = sample_poisson(1.0, Box(Vec(rc.dim), 2.0), rng);
        cloud.push(Vec(rc.dim));
        if (!locality_probe(rc.field, rc.dim, lone, 32, rc.mc.seed) ||
            !locality_probe(rc.field, rc.dim, cloud, 32, rc.mc.seed + 1))
            throw InvariantViolation("field '" + rc.field.spec +
                                     "' failed the locality audit (radius 1/2)");
    }
    auto cache = rc.cache_dir.empty() ? std::make_shared<CorrectorCache>("")
                                      : std::make_shared<CorrectorCache>(rc.cache_dir);
    Estimator est(rc.field, rc.dim, cache);
    const uint64_t fid = rc.field.field_id;
    art.json["field"] = rc.field.spec;
    art.json["field_id"] = fid;
    art.json["seed"] = rc.mc.seed;
    art.json["dim"] = rc.dim;
    nlohmann::json results = nlohmann::json::array();

    auto has_q = [&](const std::string& name) {
        for (const auto& qq : rc.quantities)
            if (qq == name) return true;
        return false;
    };

    for (int m : rc.m_list) {
        for (double rho0 : rc.rho0_list) {
            if (has_q("nu_star")) {
                MCEstimate e = estimate_nu_star(est, m, rc.q, rho0, rc.mc);
                art.csv.add(fid, m, rho0, "nu_star", e.value, e.stderr_, e.n_outer, e.n_max, rc.mc.h);
                results.push_back({{"quantity", "nu_star"}, {"m", m}, {"rho0", rho0},
                                   {"estimate", estimate_to_json(e)}});
            }
            if (has_q("nu")) {
                MCEstimate e = estimate_nu(est, m, rc.p, rho0, rc.mc);
                art.csv.add(fid, m, rho0, "nu", e.value, e.stderr_, e.n_outer, e.n_max, rc.mc.h);
                results.push_back(
                    {{"quantity", "nu"}, {"m", m}, {"rho0", rho0}, {"estimate", estimate_to_json(e)}});
            }
            if (has_q("abar")) {
                AbarPair pair = abar_matrices(est, m, rho0, rc.mc);
                for (int i = 0; i < rc.dim; ++i)
                    for (int j = i; j < rc.dim; ++j) {
                        std::string suf = "[" + std::to_string(i) + "][" + std::to_string(j) + "]";
                        art.csv.add(fid, m, rho0, "abar" + suf, pair.abar.at(i, j),
                                    pair.abar_stderr.at(i, j), 0, rc.mc.n_max, rc.mc.h);
                        art.csv.add(fid, m, rho0, "abar_star" + suf, pair.abar_star.at(i, j),
                                    pair.abar_star_stderr.at(i, j), pair.n_outer, rc.mc.n_max, rc.mc.h);
                    }
                results.push_back({{"quantity", "abar"},
                                   {"m", m},
                                   {"rho0", rho0},
                                   {"abar", matrix_to_json(pair.abar)},
                                   {"abar_star", matrix_to_json(pair.abar_star)},
                                   {"tail_nu", pair.tail_nu},
                                   {"tail_nu_star", pair.tail_nu_star}});
            }
            if (has_q("delta")) {
                for (double rho : rc.rho_grid) {
                    MCEstimate d1 = delta_rho_def(est, m, rc.q, rho0, rho, rc.mc);
                    MCEstimate d2 = delta_rho_repr(est, m, rc.q, rho0, rho, rc.mc);
                    art.csv.add(fid, m, rho0, "delta_def(rho=" + format_double(rho) + ")", d1.value,
                                d1.stderr_, d1.n_outer, d1.n_max, rc.mc.h);
                    art.csv.add(fid, m, rho0, "delta_repr(rho=" + format_double(rho) + ")", d2.value,
                                d2.stderr_, d2.n_outer, d2.n_max, rc.mc.h);
                    results.push_back({{"quantity", "delta"},
                                       {"m", m},
                                       {"rho0", rho0},
                                       {"rho", rho},
                                       {"def", estimate_to_json(d1)},
                                       {"repr", estimate_to_json(d2)}});
                }
            }
            if (has_q("c_km")) {
                CkmEstimate ck = c_km(est, m, rc.q, rho0, rc.k, rc.mc, /*with_split=*/rc.k <= 2);
                art.csv.add(fid, m, rho0, "c_" + std::to_string(rc.k) + "m", ck.est.value,
                            ck.est.stderr_, ck.est.n_outer, ck.est.n_max, rc.mc.h);
                nlohmann::json jj = {{"quantity", "c_km"},   {"k", rc.k},
                                     {"m", m},               {"rho0", rho0},
                                     {"estimate", estimate_to_json(ck.est)},
                                     {"quad_converged", ck.quad_converged}};
                for (size_t i = 0; i < ck.split.labels.size(); ++i)
                    jj["leibniz_split"][ck.split.labels[i]] = ck.split.values[i];
                results.push_back(jj);
            }
            if (has_q("expansion")) {
                if (rc.rho_grid.empty())
                    throw ConfigError("expansion requires a rho grid");
                ExpansionReport rep = expansion_report(est, m, rc.q, rho0, rc.rho_grid, rc.k, rc.mc);
                for (size_t i = 0; i < rep.rho_grid.size(); ++i)
                    art.csv.add(fid, m, rho0, "R_" + std::to_string(rc.k) + "(rho=" +
                                                  format_double(rep.rho_grid[i]) + ")",
                                rep.remainder[i], rep.remainder_stderr[i], rep.n_outer, rc.mc.n_max,
                                rc.mc.h);
                art.csv.add(fid, m, rho0, "R_" + std::to_string(rc.k) + "_slope", rep.fitted_slope, 0.0,
                            rep.n_outer, rc.mc.n_max, rc.mc.h);
                nlohmann::json jj = {{"quantity", "expansion"}, {"k", rc.k},
                                     {"m", m},                  {"rho0", rho0},
                                     {"c_values", rep.c_values}, {"c_stderr", rep.c_stderr},
                                     {"rho_grid", rep.rho_grid}, {"remainder", rep.remainder},
                                     {"slope", rep.fitted_slope}, {"noise_dominated", rep.noise_dominated}};
                results.push_back(jj);
                if (!rc.gnuplot_dir.empty()) {
                    std::string path = rc.gnuplot_dir + "/remainder_k" + std::to_string(rc.k) + "_m" +
                                       std::to_string(m) + "_rho0_" + format_double(rho0) + ".dat";
                    write_remainder_plot(rep, path);
                    art.gnuplot_files.push_back({path, ""});
                }
            }
            if (has_q("harmonic")) {
                struct Probe {
                    Subset E, F;
                    const char* name;
                } probes[] = {{0, 0, "harmonic(E={},F={})"},
                              {1, 0, "harmonic(E={1},F={})"},
                              {1, 1, "harmonic(E={1},F={1})"}};
                for (const auto& pr : probes) {
                    double rho = rc.rho_grid.empty() ? 0.0 : rc.rho_grid.front();
                    MCEstimate e = harmonic_residual(est, m, pr.E, pr.F, rc.q, rho0, rho, rc.mc);
                    art.csv.add(fid, m, rho0, pr.name, e.value, e.stderr_, e.n_outer, e.n_max, rc.mc.h);
                    results.push_back({{"quantity", pr.name},
                                       {"m", m},
                                       {"rho0", rho0},
                                       {"estimate", estimate_to_json(e)}});
                }
            }
            if (has_q("key_probe")) {
                for (auto [f, g] : {std::pair<int, int>{0, 0}, {1, 0}, {1, 1}, {2, 0}, {2, 1}, {2, 2}}) {
                    MCEstimate e = key_estimate_probe(est, m, f, g, rc.q, rho0, rc.mc);
                    std::string name =
                        "key_probe(|F|=" + std::to_string(f) + ",|G|=" + std::to_string(g) + ")";
                    art.csv.add(fid, m, rho0, name, e.value, e.stderr_, e.n_outer, e.n_max, rc.mc.h);
                    results.push_back(
                        {{"quantity", name}, {"m", m}, {"rho0", rho0}, {"estimate", estimate_to_json(e)}});
                }
            }
            if (has_q("mecke")) {
                Box U = box_m(m, rc.dim);
                auto emit = [&](const char* name, const MeckeCheck& ck) {
                    art.csv.add(fid, m, rho0, name, ck.residual, ck.stderr_, ck.n_samples, 0, 0);
                    results.push_back({{"quantity", name},
                                       {"m", m},
                                       {"rho0", rho0},
                                       {"residual", ck.residual},
                                       {"stderr", ck.stderr_}});
                };
                long ns = std::max<long>(rc.mc.n_outer, 1000);
                emit("mecke(H=1)", mecke_residual([](const PointConfiguration&, const Vec&) { return 1.0; },
                                                  rho0, U, ns, rc.mc.seed));
                emit("mecke(H=count)",
                     mecke_residual([U](const PointConfiguration& mu, const Vec&) {
                         return static_cast<double>(restrict_to(mu, U).count());
                     }, rho0, U, ns, rc.mc.seed + 1));
                emit("mecke(H=indicator1)",
                     mecke_residual([U](const PointConfiguration& mu, const Vec&) {
                         return restrict_to(mu, U).count() == 1 ? 1.0 : 0.0;
                     }, rho0, U, ns, rc.mc.seed + 2));
            }
        }
        if (has_q("continuity")) {
            ContinuityScan scan = continuity_scan(est, m, rc.rho0_list, rc.mc);
            for (const auto& row : scan.rows)
                for (int i = 0; i < rc.dim; ++i) {
                    art.csv.add(fid, m, row.rho0, "continuity_abar[" + std::to_string(i) + "]",
                                row.pair.abar.at(i, i), row.pair.abar_stderr.at(i, i), 0, rc.mc.n_max,
                                rc.mc.h);
                    art.csv.add(fid, m, row.rho0, "continuity_abar_star[" + std::to_string(i) + "]",
                                row.pair.abar_star.at(i, i), row.pair.abar_star_stderr.at(i, i),
                                row.pair.n_outer, rc.mc.n_max, rc.mc.h);
                }
            nlohmann::json jj = {{"quantity", "continuity"},
                                 {"m", m},
                                 {"ordering_ok", scan.ordering_ok},
                                 {"modulus_abar", scan.modulus_abar},
                                 {"modulus_abar_star", scan.modulus_abar_star}};
            results.push_back(jj);
        }
    }
    art.json["results"] = results;
    auto stats = cache->stats();
    art.json["cache"] = {{"hits", stats.hits}, {"misses", stats.misses}, {"entries", stats.entries}};
    return art;
}

}  // namespace bulkdiff

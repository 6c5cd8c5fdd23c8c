#pragma once

#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bulkdiff/conductance.hpp"
#include "bulkdiff/estimator.hpp"

namespace bulkdiff {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Flat key -> token-list store for the run config text format:
/// `key = values...` lines, `[section]` prefixes, `#` comments. Unknown keys
/// are rejected up front; flags may override any leaf.
class KeyValueConfig {
public:
    static KeyValueConfig parse(const std::string& text) {
        KeyValueConfig cfg;
        std::istringstream is(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            std::string t = strip(line);
            if (t.empty() || t[0] == '#') continue;
            if (t.front() == '[' && t.back() == ']') {
                section = strip(t.substr(1, t.size() - 2));
                continue;
            }
            auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
            std::string key = strip(t.substr(0, eq));
            std::string val = strip(t.substr(eq + 1));
            if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
            std::string full = section.empty() ? key : section + "." + key;
            std::vector<std::string> toks;
            std::istringstream vs(val);
            std::string tok;
            while (vs >> tok) toks.push_back(tok);
            cfg.values_[full] = {toks, lineno};
        }
        return cfg;
    }

    void override_leaf(const std::string& dotted, const std::string& value) {
        std::vector<std::string> toks;
        std::istringstream vs(value);
        std::string tok;
        while (vs >> tok) toks.push_back(tok);
        values_[dotted] = {toks, 0};
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::vector<std::string> tokens(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
        used_.insert(key);
        return it->second.first;
    }

    std::string str(const std::string& key, const std::string& dflt) const {
        if (!has(key)) return dflt;
        auto t = tokens(key);
        if (t.size() != 1) throw ConfigError("key '" + key + "' expects a single value");
        return t[0];
    }

    double num(const std::string& key, double dflt) const {
        if (!has(key)) return dflt;
        auto t = tokens(key);
        if (t.size() != 1) throw ConfigError("key '" + key + "' expects a single number");
        return parse_double(t[0]);
    }

    long integer(const std::string& key, long dflt) const {
        return static_cast<long>(num(key, static_cast<double>(dflt)));
    }

    std::vector<double> num_list(const std::string& key, std::vector<double> dflt = {}) const {
        if (!has(key)) return dflt;
        std::vector<double> out;
        for (const auto& t : tokens(key)) out.push_back(parse_double(t));
        return out;
    }

    void reject_unknown() const {
        for (const auto& [k, v] : values_)
            if (!used_.count(k))
                throw ConfigError("unknown config key '" + k + "' (line " +
                                  std::to_string(v.second) + ")");
    }

private:
    static std::string strip(const std::string& s) {
        size_t a = s.find_first_not_of(" \t\r\n");
        if (a == std::string::npos) return "";
        size_t b = s.find_last_not_of(" \t\r\n");
        return s.substr(a, b - a + 1);
    }
    std::map<std::string, std::pair<std::vector<std::string>, int>> values_;
    mutable std::set<std::string> used_;
};

/// Fully validated run description.
struct RunConfig {
    ConductanceField field;
    int dim = 1;
    std::vector<int> m_list{0};
    std::vector<double> rho0_list{1.0};
    std::vector<double> rho_grid;
    Vec q, p;
    int k = 1;
    std::vector<std::string> quantities;
    McConfig mc;
    // outputs
    std::string csv_path, json_path, gnuplot_dir, cache_dir;

    static RunConfig from_text(const std::string& text,
                               const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
        KeyValueConfig kv = KeyValueConfig::parse(text);
        for (const auto& [k2, v] : overrides) kv.override_leaf(k2, v);
        RunConfig rc;

        std::string fname = kv.str("field", "constant");
        std::map<std::string, double> params;
        for (const char* pkey : {"c", "lambda", "r"})
            if (kv.has(std::string("field.") + pkey))
                params[pkey] = kv.num(std::string("field.") + pkey, 0.0);
        rc.field = make_field(fname, params);

        rc.dim = static_cast<int>(kv.integer("dim", 1));
        if (rc.dim < 1 || rc.dim > 2) throw ConfigError("dim must be 1 or 2");
        rc.m_list.clear();
        for (double v : kv.num_list("m", {0})) {
            int m = static_cast<int>(v);
            if (m < 0 || m > 3) throw ConfigError("m must lie in [0,3]");
            rc.m_list.push_back(m);
        }
        rc.rho0_list = kv.num_list("rho0", {1.0});
        for (double r : rc.rho0_list)
            if (!(r > 0)) throw ConfigError("rho0 must be positive");
        rc.rho_grid = kv.num_list("rho", {});
        for (double r : rc.rho_grid)
            if (!(r > 0)) throw ConfigError("rho grid must be positive");

        auto vec_of = [&](const std::string& key) {
            auto xs = kv.num_list(key, {1.0});
            Vec v(rc.dim);
            for (int i = 0; i < rc.dim && i < static_cast<int>(xs.size()); ++i) v[i] = xs[static_cast<size_t>(i)];
            return v;
        };
        rc.q = vec_of("q");
        rc.p = vec_of("p");
        rc.k = static_cast<int>(kv.integer("k", 1));
        if (rc.k < 0 || rc.k > 3) throw ConfigError("k must lie in [0,3]");

        if (kv.has("quantities"))
            for (const auto& t : kv.tokens("quantities")) rc.quantities.push_back(t);
        else
            rc.quantities = {"nu_star"};
        const std::set<std::string> known_q = {"nu",       "nu_star", "abar",     "delta",
                                               "c_km",     "expansion", "harmonic", "key_probe",
                                               "continuity", "mecke"};
        for (const auto& qq : rc.quantities)
            if (!known_q.count(qq)) throw ConfigError("unknown quantity '" + qq + "'");

        rc.mc.n_outer = kv.integer("mc.n_outer", 64);
        rc.mc.n_max = static_cast<int>(kv.integer("mc.n_max", 3));
        if (rc.mc.n_max < 1 || rc.mc.n_max > 8) throw ConfigError("mc.n_max must lie in [1,8]");
        rc.mc.h = kv.num("mc.h", 1.0 / 64);
        if (!(rc.mc.h > 0) || rc.mc.h > 0.5) throw ConfigError("mc.h must lie in (0, 0.5]");
        rc.mc.tol = kv.num("mc.tol", 1e-10);
        rc.mc.seed = static_cast<uint64_t>(kv.integer("mc.seed", 1));
        std::string ext = kv.str("mc.exterior", "mc");
        if (ext == "mc")
            rc.mc.exterior_mode = ExteriorMode::mc;
        else if (ext == "none")
            rc.mc.exterior_mode = ExteriorMode::none;
        else
            throw ConfigError("mc.exterior must be 'mc' or 'none'");
        rc.mc.refine_levels = static_cast<int>(kv.integer("mc.refine_levels", 1));
        rc.mc.collar_nodes = static_cast<int>(kv.integer("mc.collar_nodes", 8));
        rc.mc.max_unknowns = static_cast<size_t>(kv.integer("mc.max_unknowns", 2'000'000));
        rc.mc.tail_rel_threshold = kv.num("mc.tail_threshold", 0.0);
        rc.mc.threads = static_cast<int>(kv.integer("mc.threads", 0));
        if (rc.mc.n_outer < 1) throw ConfigError("mc.n_outer must be >= 1");

        rc.csv_path = kv.str("out.csv", "");
        rc.json_path = kv.str("out.json", "");
        rc.gnuplot_dir = kv.str("out.gnuplot", "");
        rc.cache_dir = kv.str("out.cache_dir", "");
        kv.reject_unknown();
        return rc;
    }
};

}  // namespace bulkdiff

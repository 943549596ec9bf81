#pragma once

#include <cstdlib>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "enkf/errors.hpp"
#include "enkf/experiments.hpp"
#include "enkf/io.hpp"

namespace enkf {

namespace detail {

inline std::optional<std::string> kv_pop(std::map<std::string, std::string>& kv,
                                         const std::string& key) {
    const auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
}

inline double parse_double_field(const std::string& text, const std::string& origin,
                                 const std::string& key) {
    const char* s = text.c_str();
    char* end = nullptr;
    const double v = std::strtod(s, &end);
    if (end == s || *end != '\0')
        throw ParseError(origin + ": bad number for " + key + ": '" + text + "'");
    return v;
}

inline std::uint64_t parse_u64_field(const std::string& text, const std::string& origin,
                                     const std::string& key) {
    const char* s = text.c_str();
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s, &end, 10);
    if (end == s || *end != '\0' || text.find('-') != std::string::npos)
        throw ParseError(origin + ": bad count for " + key + ": '" + text + "'");
    return static_cast<std::uint64_t>(v);
}

inline std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::size_t at = 0;
    while (at <= text.size()) {
        std::size_t comma = text.find(',', at);
        if (comma == std::string::npos) comma = text.size();
        std::string item = text.substr(at, comma - at);
        const std::size_t b = item.find_first_not_of(" \t");
        const std::size_t e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
        at = comma + 1;
    }
    return out;
}

} // namespace detail

inline FilterVariant make_variant(const std::string& name, DistanceMode mode, std::size_t splits,
                                  std::size_t iterations, std::pair<double, double> bounds,
                                  std::size_t oracle_size) {
    FilterVariant v;
    v.estimator.mode = mode;
    v.estimator.splits = splits;
    v.iterations = iterations;
    v.inflation_bounds = bounds;
    v.oracle_size = oracle_size;
    std::string base = name;
    if (base.rfind("iterative_", 0) == 0) {
        v.kind = FilterVariant::Kind::iterative_hd;
        base = base.substr(10);
    } else if (base == "standard") {
        v.kind = FilterVariant::Kind::standard;
        return v;
    } else if (base == "inflation") {
        v.kind = FilterVariant::Kind::inflation;
        return v;
    } else if (base == "oracle") {
        v.kind = FilterVariant::Kind::oracle;
        return v;
    } else {
        v.kind = FilterVariant::Kind::hd;
    }
    if (base == "banding") v.estimator.kind = CovKind::banding;
    else if (base == "mid_banding") v.estimator.kind = CovKind::mid_banding;
    else if (base == "tapering") v.estimator.kind = CovKind::tapering;
    else if (base == "thresholding") v.estimator.kind = CovKind::thresholding;
    else throw ParseError("unknown filter variant: '" + name + "'");
    return v;
}

// Key=value experiment description. `testbed` picks the defaults; remaining
// keys override them. Unknown keys are rejected.
inline ExperimentConfig experiment_config_from_kv(std::map<std::string, std::string> kv,
                                                  const std::string& origin) {
    using detail::kv_pop;
    using detail::parse_double_field;
    using detail::parse_u64_field;

    ExperimentConfig cfg;
    const auto tb = kv_pop(kv, "testbed");
    if (!tb) throw ParseError(origin + ": missing required key 'testbed'");
    DistanceMode mode = DistanceMode::linear;
    std::string variants_text;
    if (*tb == "l96") {
        cfg.testbed = Testbed::l96;
        cfg.n = 30;
        cfg.total_steps = 2000;
        cfg.burn_in_steps = 1000;
        cfg.replicates = 20;
        mode = DistanceMode::circular;
        variants_text = "standard,inflation,banding,tapering,thresholding";
    } else if (*tb == "swe") {
        cfg.testbed = Testbed::swe;
        cfg.n = 100;
        cfg.total_steps = 5760;
        cfg.burn_in_steps = 2880;
        cfg.replicates = 5;
        variants_text = "standard,inflation,banding,tapering,thresholding";
    } else if (*tb == "linear") {
        cfg.testbed = Testbed::linear_gaussian;
        cfg.n = 200;
        cfg.total_steps = 50;
        cfg.burn_in_steps = 10;
        cfg.replicates = 3;
        variants_text = "standard";
    } else {
        throw ParseError(origin + ": unknown testbed '" + *tb + "'");
    }

    if (const auto v = kv_pop(kv, "name")) cfg.name = *v;

    std::size_t splits = 20;
    std::size_t iterations = 3;
    std::pair<double, double> bounds{1.0, 20.0};
    if (const auto v = kv_pop(kv, "splits"))
        splits = parse_u64_field(*v, origin, "splits");
    if (const auto v = kv_pop(kv, "iterations"))
        iterations = parse_u64_field(*v, origin, "iterations");
    if (const auto v = kv_pop(kv, "inflation_lo"))
        bounds.first = parse_double_field(*v, origin, "inflation_lo");
    if (const auto v = kv_pop(kv, "inflation_hi"))
        bounds.second = parse_double_field(*v, origin, "inflation_hi");
    if (const auto v = kv_pop(kv, "distance_mode")) {
        if (*v == "linear") mode = DistanceMode::linear;
        else if (*v == "circular") mode = DistanceMode::circular;
        else throw ParseError(origin + ": bad distance_mode '" + *v + "'");
    }

    if (const auto v = kv_pop(kv, "p")) cfg.l96.p = parse_u64_field(*v, origin, "p");
    if (const auto v = kv_pop(kv, "q")) cfg.q = parse_u64_field(*v, origin, "q");
    if (const auto v = kv_pop(kv, "n")) cfg.n = parse_u64_field(*v, origin, "n");
    if (const auto v = kv_pop(kv, "f_true")) cfg.f_true = parse_double_field(*v, origin, "f_true");
    if (const auto v = kv_pop(kv, "f_assim")) cfg.l96.F = parse_double_field(*v, origin, "f_assim");
    if (const auto v = kv_pop(kv, "sigma0")) cfg.l96.sigma0 = parse_double_field(*v, origin, "sigma0");
    if (const auto v = kv_pop(kv, "dt")) {
        const double dt = parse_double_field(*v, origin, "dt");
        cfg.l96.dt = dt;
        cfg.swe.dt = dt;
    }
    if (const auto v = kv_pop(kv, "steps_per_window")) {
        const std::size_t spw = parse_u64_field(*v, origin, "steps_per_window");
        cfg.l96.steps_per_window = spw;
        cfg.swe_steps_per_window = spw;
    }
    if (const auto v = kv_pop(kv, "r_rho")) cfg.r_rho = parse_double_field(*v, origin, "r_rho");

    if (const auto v = kv_pop(kv, "nx")) cfg.swe.nx = parse_u64_field(*v, origin, "nx");
    if (const auto v = kv_pop(kv, "ny")) cfg.swe.ny = parse_u64_field(*v, origin, "ny");
    if (const auto v = kv_pop(kv, "dx")) cfg.swe.dx = parse_double_field(*v, origin, "dx");
    if (const auto v = kv_pop(kv, "dy")) cfg.swe.dy = parse_double_field(*v, origin, "dy");
    if (const auto v = kv_pop(kv, "k_diff_true"))
        cfg.k_diff_true = parse_double_field(*v, origin, "k_diff_true");
    if (const auto v = kv_pop(kv, "k_diff_assim"))
        cfg.swe.k_diff = parse_double_field(*v, origin, "k_diff_assim");
    if (const auto v = kv_pop(kv, "pre_steps"))
        cfg.pre_steps = parse_u64_field(*v, origin, "pre_steps");
    if (const auto v = kv_pop(kv, "obs_rows"))
        cfg.obs_rows = parse_u64_field(*v, origin, "obs_rows");
    if (const auto v = kv_pop(kv, "sigma_u2")) cfg.sigma_u2 = parse_double_field(*v, origin, "sigma_u2");
    if (const auto v = kv_pop(kv, "sigma_v2")) cfg.sigma_v2 = parse_double_field(*v, origin, "sigma_v2");
    if (const auto v = kv_pop(kv, "sigma_h2")) cfg.sigma_h2 = parse_double_field(*v, origin, "sigma_h2");
    cfg.swe.L = static_cast<double>(cfg.swe.nx) * cfg.swe.dx;
    cfg.swe.D = static_cast<double>(cfg.swe.ny - 1) * cfg.swe.dy;

    if (const auto v = kv_pop(kv, "total_steps"))
        cfg.total_steps = parse_u64_field(*v, origin, "total_steps");
    if (const auto v = kv_pop(kv, "burn_in_steps"))
        cfg.burn_in_steps = parse_u64_field(*v, origin, "burn_in_steps");
    if (const auto v = kv_pop(kv, "obs_every")) {
        cfg.obs_every = parse_u64_field(*v, origin, "obs_every");
        if (cfg.obs_every == 0) throw ParseError(origin + ": obs_every must be >= 1");
    }
    if (const auto v = kv_pop(kv, "replicates"))
        cfg.replicates = parse_u64_field(*v, origin, "replicates");
    if (const auto v = kv_pop(kv, "seed")) cfg.seed = parse_u64_field(*v, origin, "seed");
    if (const auto v = kv_pop(kv, "oracle_size"))
        cfg.oracle_size = parse_u64_field(*v, origin, "oracle_size");
    if (const auto v = kv_pop(kv, "threads"))
        cfg.threads = parse_u64_field(*v, origin, "threads");
    if (const auto v = kv_pop(kv, "divergence_threshold"))
        cfg.divergence_threshold = parse_double_field(*v, origin, "divergence_threshold");
    if (const auto v = kv_pop(kv, "variants")) variants_text = *v;

    if (!kv.empty()) throw ParseError(origin + ": unknown key '" + kv.begin()->first + "'");

    for (const std::string& name : detail::split_list(variants_text))
        cfg.variants.push_back(
            make_variant(name, mode, splits, iterations, bounds, cfg.oracle_size));
    if (cfg.variants.empty()) throw ParseError(origin + ": empty variant list");
    return cfg;
}

inline ExperimentConfig experiment_config_from_text(const std::string& text,
                                                    const std::string& origin) {
    return experiment_config_from_kv(parse_key_values(text, origin), origin);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    return experiment_config_from_text(read_text_file(path), path);
}

} // namespace enkf

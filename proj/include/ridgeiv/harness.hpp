#pragma once

#include "ridgeiv/estimators.hpp"
#include "ridgeiv/io.hpp"
#include "ridgeiv/model.hpp"
#include "ridgeiv/random.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ridgeiv {

/// One (delta, n, prior) combination of the simulation design.
struct CellSpec {
    double delta = 1.0;
    Index n = 500;
    int prior_id = 1;  // 1-based position in MCSpec::priors
    Vector prior;
    Index reps = 1;

    std::string id() const {
        return "delta=" + format_double(delta) + ",n=" + std::to_string(n) + ",prior=" + std::to_string(prior_id);
    }
    /// Same content, safe as a file name.
    std::string file_stem() const {
        return "d" + format_double(delta) + "_n" + std::to_string(n) + "_p" + std::to_string(prior_id);
    }
};

struct MCSpec {
    std::vector<double> deltas{0.1, 0.25, 0.5, 1.0};
    std::vector<Index> ns{25, 50, 250, 500};
    std::vector<Vector> priors{design_prior(1), design_prior(2), design_prior(3)};
    Index reps = 10'000;
    Index large_n_reps = 1'000;
    Index large_n_threshold = 10'000;
    double tau = 0.7;
    std::uint64_t base_seed = 20240601;

    void validate() const {
        if (reps < 1 || large_n_reps < 1) throw std::invalid_argument("MCSpec: reps must be positive");
        if (deltas.empty() || ns.empty() || priors.empty()) throw std::invalid_argument("MCSpec: empty design");
        for (const auto& p : priors)
            if (p.size() != 2) throw std::invalid_argument("MCSpec: priors must have length 2");
    }

    Index reps_for(Index n) const { return n >= large_n_threshold ? large_n_reps : reps; }

    /// Prior-major, then delta, then n.
    std::vector<CellSpec> cells() const {
        validate();
        std::vector<CellSpec> out;
        for (std::size_t p = 0; p < priors.size(); ++p)
            for (double d : deltas)
                for (Index n : ns) out.push_back({d, n, static_cast<int>(p + 1), priors[p], reps_for(n)});
        return out;
    }
};

inline MCSpec mc_spec_from_json(const json& j) {
    MCSpec s;
    if (j.contains("deltas")) s.deltas = j.at("deltas").get<std::vector<double>>();
    if (j.contains("ns")) s.ns = j.at("ns").get<std::vector<Index>>();
    if (j.contains("prior_sds")) {
        s.priors.clear();
        for (int sd : j.at("prior_sds").get<std::vector<int>>()) s.priors.push_back(design_prior(sd));
    }
    if (j.contains("priors")) {
        s.priors.clear();
        for (const auto& p : j.at("priors")) s.priors.push_back(vector_from_json(p, "priors"));
    }
    s.reps = j.value("reps", s.reps);
    s.large_n_reps = j.value("large_n_reps", s.large_n_reps);
    s.large_n_threshold = j.value("large_n_threshold", s.large_n_threshold);
    s.tau = j.value("tau", s.tau);
    s.base_seed = j.value("base_seed", s.base_seed);
    s.validate();
    return s;
}

inline json mc_spec_to_json(const MCSpec& s) {
    json pri = json::array();
    for (const auto& p : s.priors) pri.push_back(to_json(p));
    return {{"deltas", s.deltas}, {"ns", s.ns}, {"priors", pri}, {"reps", s.reps},
            {"large_n_reps", s.large_n_reps}, {"large_n_threshold", s.large_n_threshold},
            {"tau", s.tau}, {"base_seed", s.base_seed}};
}

/// Selection like "delta=0.1|1.0,n=25,prior=1". Keys not mentioned match anything.
class CellFilter {
public:
    CellFilter() = default;
    explicit CellFilter(std::string_view text) {
        if (text.empty()) return;
        for (auto clause : split_fields(text, ',')) {
            const auto eq = clause.find('=');
            if (eq == std::string_view::npos) throw std::invalid_argument("cell filter: expected key=value");
            const std::string key(clause.substr(0, eq));
            auto& vals = allowed_[key];
            for (auto v : split_fields(clause.substr(eq + 1), '|')) vals.insert(parse_double(v));
            if (key != "delta" && key != "n" && key != "prior")
                throw std::invalid_argument("cell filter: unknown key '" + key + "'");
        }
    }

    bool matches(const CellSpec& c) const {
        return ok("delta", c.delta) && ok("n", static_cast<double>(c.n)) && ok("prior", c.prior_id);
    }

private:
    bool ok(const std::string& key, double v) const {
        const auto it = allowed_.find(key);
        if (it == allowed_.end()) return true;
        for (double a : it->second)
            if (std::abs(a - v) <= 1e-12 * std::max(1.0, std::abs(v))) return true;
        return false;
    }
    std::map<std::string, std::set<double>> allowed_;
};

inline std::uint64_t replication_seed(std::uint64_t base_seed, const CellSpec& cell, Index rep) {
    std::uint64_t h = hash_keys({base_seed, std::bit_cast<std::uint64_t>(cell.delta),
                                 static_cast<std::uint64_t>(cell.n)});
    for (Index i = 0; i < cell.prior.size(); ++i) h = hash_keys({h, std::bit_cast<std::uint64_t>(cell.prior[i])});
    return hash_keys({h, static_cast<std::uint64_t>(rep)});
}

/// Smallest singular value of X'Z/n.
inline double smallest_singular_value(const Dataset& data) {
    const Matrix xz = data.x().transpose() * data.z() / static_cast<double>(data.n());
    Eigen::JacobiSVD<Matrix> svd(xz);
    return svd.singularValues().minCoeff();
}

struct Replication {
    bool ok = false;
    std::string error;
    Vector beta_tsls;
    Vector beta_ridge;
    double alpha_hat = 0.0;
    RegularizationClass alpha_class = RegularizationClass::none;
    double min_singular = 0.0;
};

struct EstimatorSummary {
    Vector bias, sd, mse;
    double combined_mse = 0.0;
};

struct Quantiles {
    double mean = 0.0, sd = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0;
};

struct CellSummary {
    Index reps = 0;
    Index failures = 0;
    EstimatorSummary tsls, ridge;
    Index count_zero = 0, count_interior = 0, count_infinite = 0;
    double p_zero = 0.0, p_interior = 0.0, p_infinite = 0.0;
    Quantiles singular;
};

struct CellResult {
    CellSpec cell;
    std::vector<Replication> reps;
    CellSummary summary;
    /// More than 0.1% of replications raised.
    bool failed = false;
};

inline RidgeConfig harness_ridge_config(double tau, const Vector& prior) {
    RidgeConfig c;
    c.tau = tau;
    c.prior = prior;
    c.keep_trace = false;
    return c;
}

inline Replication run_replication(const ModelSpec& spec, const RidgeConfig& config, std::uint64_t seed) {
    Replication r;
    try {
        const Dataset data = generate_dataset(spec, seed);
        r.min_singular = smallest_singular_value(data);
        const RidgeFit fit = ridge_path_estimate(data, config);
        r.beta_tsls = fit.beta_2sls_full;
        r.beta_ridge = fit.beta_hat;
        r.alpha_hat = fit.alpha_hat;
        r.alpha_class = fit.regularization_class;
        r.ok = true;
    } catch (const SingularDesignError& e) {
        r.error = e.what();
    }
    return r;
}

/// Runs body(i) for i in [0, count) on `threads` workers. Results must be
/// written by index so the outcome is independent of scheduling.
inline void parallel_for(Index count, unsigned threads, const std::function<void(Index)>& body) {
    const Index nthreads = std::clamp<Index>(threads, 1, std::max<Index>(count, 1));
    if (nthreads == 1) {
        for (Index i = 0; i < count; ++i) body(i);
        return;
    }
    std::atomic<Index> next{0};
    std::vector<std::thread> pool;
    std::exception_ptr failure;
    std::atomic<bool> failed{false};
    for (Index t = 0; t < nthreads; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                const Index i = next.fetch_add(1);
                if (i >= count || failed.load()) return;
                try {
                    body(i);
                } catch (...) {
                    if (!failed.exchange(true)) failure = std::current_exception();
                    return;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
}

inline Quantiles quantiles(std::vector<double> v) {
    Quantiles q;
    if (v.empty()) return q;
    const double n = static_cast<double>(v.size());
    double sum = 0.0;
    for (double x : v) sum += x;
    q.mean = sum / n;
    double ss = 0.0;
    for (double x : v) ss += (x - q.mean) * (x - q.mean);
    q.sd = std::sqrt(ss / n);
    std::sort(v.begin(), v.end());
    auto at = [&](double p) {
        const double pos = p * (n - 1.0);
        const auto lo = static_cast<std::size_t>(std::floor(pos));
        const std::size_t hi = std::min(lo + 1, v.size() - 1);
        return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    q.q1 = at(0.25);
    q.median = at(0.5);
    q.q3 = at(0.75);
    return q;
}

/// Bias, SD (divisor = number of draws) and MSE per coordinate around `truth`.
inline EstimatorSummary summarize_estimates(const std::vector<Vector>& draws, const Vector& truth) {
    EstimatorSummary s;
    const Index k = truth.size();
    s.bias = Vector::Zero(k);
    s.sd = Vector::Zero(k);
    s.mse = Vector::Zero(k);
    if (draws.empty()) return s;
    const double n = static_cast<double>(draws.size());
    Vector mean = Vector::Zero(k);
    for (const auto& d : draws) mean += d;
    mean /= n;
    for (const auto& d : draws) {
        s.sd += (d - mean).cwiseAbs2();
        s.mse += (d - truth).cwiseAbs2();
    }
    s.sd = (s.sd / n).cwiseSqrt();
    s.mse /= n;
    s.bias = mean - truth;
    s.combined_mse = s.mse.sum();
    return s;
}

inline CellSummary summarize_cell(const std::vector<Replication>& reps, const Vector& beta0) {
    CellSummary s;
    s.reps = static_cast<Index>(reps.size());
    std::vector<Vector> t, r;
    std::vector<double> sv;
    for (const auto& rep : reps) {
        if (!rep.ok) {
            ++s.failures;
            continue;
        }
        t.push_back(rep.beta_tsls);
        r.push_back(rep.beta_ridge);
        sv.push_back(rep.min_singular);
        switch (rep.alpha_class) {
            case RegularizationClass::none: ++s.count_zero; break;
            case RegularizationClass::some: ++s.count_interior; break;
            case RegularizationClass::infinite: ++s.count_infinite; break;
        }
    }
    s.tsls = summarize_estimates(t, beta0);
    s.ridge = summarize_estimates(r, beta0);
    const Index good = s.reps - s.failures;
    if (good > 0) {
        const double g = static_cast<double>(good);
        s.p_zero = static_cast<double>(s.count_zero) / g;
        s.p_infinite = static_cast<double>(s.count_infinite) / g;
        s.p_interior = static_cast<double>(s.count_interior) / g;
    }
    s.singular = quantiles(std::move(sv));
    return s;
}

inline bool cell_failed(const CellSummary& s) {
    return static_cast<double>(s.failures) > 0.001 * static_cast<double>(s.reps);
}

/// Replications of `cell` drawn from an explicit model; the cell supplies
/// the prior, replication count and seed keys.
inline CellResult run_cell(const ModelSpec& spec, const CellSpec& cell, std::uint64_t base_seed,
                           unsigned threads = 1) {
    if (cell.reps < 1) throw std::invalid_argument("run_cell: reps must be positive");
    const RidgeConfig config = harness_ridge_config(spec.tau, spec.prior);
    CellResult out;
    out.cell = cell;
    out.reps.resize(static_cast<std::size_t>(cell.reps));
    parallel_for(cell.reps, threads, [&](Index i) {
        out.reps[static_cast<std::size_t>(i)] = run_replication(spec, config, replication_seed(base_seed, cell, i));
    });
    out.summary = summarize_cell(out.reps, spec.beta0);
    out.failed = cell_failed(out.summary);
    return out;
}

inline CellResult run_cell(const CellSpec& cell, double tau, std::uint64_t base_seed, unsigned threads = 1) {
    return run_cell(design_spec(cell.delta, cell.n, cell.prior, tau), cell, base_seed, threads);
}

/// Table-4 statistics alone, without running either estimator.
inline Quantiles singular_value_summary(const CellSpec& cell, double tau, std::uint64_t base_seed,
                                        unsigned threads = 1) {
    const ModelSpec spec = design_spec(cell.delta, cell.n, cell.prior, tau);
    std::vector<double> sv(static_cast<std::size_t>(cell.reps));
    parallel_for(cell.reps, threads, [&](Index i) {
        sv[static_cast<std::size_t>(i)] =
            smallest_singular_value(generate_dataset(spec, replication_seed(base_seed, cell, i)));
    });
    return quantiles(std::move(sv));
}

// ---- CSV output -------------------------------------------------------------

inline std::string replications_csv(const CellResult& r) {
    std::ostringstream os;
    os << "rep,status,tsls_1,tsls_2,ridge_1,ridge_2,alpha_hat,alpha_class,min_singular\n";
    for (std::size_t i = 0; i < r.reps.size(); ++i) {
        const Replication& p = r.reps[i];
        os << i << ',';
        if (!p.ok) {
            os << "failed,,,,,,,\n";
            continue;
        }
        os << "ok," << format_double(p.beta_tsls[0]) << ',' << format_double(p.beta_tsls[1]) << ','
           << format_double(p.beta_ridge[0]) << ',' << format_double(p.beta_ridge[1]) << ','
           << format_double(p.alpha_hat) << ',' << to_string(p.alpha_class) << ','
           << format_double(p.min_singular) << '\n';
    }
    return os.str();
}

inline RegularizationClass parse_regularization_class(std::string_view s) {
    if (s == "none") return RegularizationClass::none;
    if (s == "some") return RegularizationClass::some;
    if (s == "infinite") return RegularizationClass::infinite;
    throw std::invalid_argument("unknown regularization class '" + std::string(s) + "'");
}

inline std::vector<Replication> parse_replications_csv(std::istream& is) {
    std::string line;
    std::getline(is, line);
    std::vector<Replication> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_fields(line);
        if (f.size() != 9) throw std::invalid_argument("replications csv: wrong field count");
        Replication r;
        if (f[1] == "ok") {
            r.ok = true;
            r.beta_tsls = Vector(2);
            r.beta_ridge = Vector(2);
            r.beta_tsls << parse_double(f[2]), parse_double(f[3]);
            r.beta_ridge << parse_double(f[4]), parse_double(f[5]);
            r.alpha_hat = parse_double(f[6]);
            r.alpha_class = parse_regularization_class(f[7]);
            r.min_singular = parse_double(f[8]);
        } else {
            r.error = "failed";
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline std::string table1_csv(const std::vector<CellResult>& results, int prior_id) {
    std::ostringstream os;
    os << "delta,n,estimator,bias_1,bias_2,sd_1,sd_2,mse_1,mse_2,combined_mse,reps,failures\n";
    for (const auto& r : results) {
        if (r.cell.prior_id != prior_id) continue;
        for (int e = 0; e < 2; ++e) {
            const EstimatorSummary& s = e == 0 ? r.summary.tsls : r.summary.ridge;
            os << format_double(r.cell.delta) << ',' << r.cell.n << ',' << (e == 0 ? "2sls" : "ridge_path");
            for (const Vector* v : {&s.bias, &s.sd, &s.mse})
                for (Index i = 0; i < v->size(); ++i) os << ',' << format_double((*v)[i]);
            os << ',' << format_double(s.combined_mse) << ',' << r.summary.reps << ',' << r.summary.failures << '\n';
        }
    }
    return os.str();
}

inline std::string table3_csv(const std::vector<CellResult>& results) {
    std::ostringstream os;
    os << "prior,delta,n,p_zero,p_interior,p_infinite,count_zero,count_interior,count_infinite,reps,failures\n";
    for (const auto& r : results) {
        const CellSummary& s = r.summary;
        os << r.cell.prior_id << ',' << format_double(r.cell.delta) << ',' << r.cell.n << ','
           << format_double(s.p_zero) << ',' << format_double(s.p_interior) << ',' << format_double(s.p_infinite)
           << ',' << s.count_zero << ',' << s.count_interior << ',' << s.count_infinite << ',' << s.reps << ','
           << s.failures << '\n';
    }
    return os.str();
}

/// One row per (delta, n), taken from the lowest prior id present.
inline std::string table4_csv(const std::vector<CellResult>& results) {
    std::ostringstream os;
    os << "delta,n,mean,sd,q1,median,q3,reps\n";
    std::set<std::pair<double, Index>> seen;
    std::vector<const CellResult*> order;
    for (const auto& r : results) order.push_back(&r);
    std::stable_sort(order.begin(), order.end(),
                     [](const CellResult* a, const CellResult* b) { return a->cell.prior_id < b->cell.prior_id; });
    std::vector<const CellResult*> rows;
    for (const CellResult* r : order)
        if (seen.insert({r->cell.delta, r->cell.n}).second) rows.push_back(r);
    std::stable_sort(rows.begin(), rows.end(), [](const CellResult* a, const CellResult* b) {
        return a->cell.delta != b->cell.delta ? a->cell.delta < b->cell.delta : a->cell.n < b->cell.n;
    });
    for (const CellResult* r : rows) {
        const Quantiles& q = r->summary.singular;
        os << format_double(r->cell.delta) << ',' << r->cell.n << ',' << format_double(q.mean) << ','
           << format_double(q.sd) << ',' << format_double(q.q1) << ',' << format_double(q.median) << ','
           << format_double(q.q3) << ',' << (r->summary.reps - r->summary.failures) << '\n';
    }
    return os.str();
}

inline std::string scatter_csv(const CellResult& r) {
    std::ostringstream os;
    os << "estimator,beta_1,beta_2,prior_1,prior_2\n";
    const std::string p1 = format_double(r.cell.prior[0]), p2 = format_double(r.cell.prior[1]);
    for (int e = 0; e < 2; ++e)
        for (const auto& rep : r.reps) {
            if (!rep.ok) continue;
            const Vector& b = e == 0 ? rep.beta_tsls : rep.beta_ridge;
            os << (e == 0 ? "2sls" : "ridge_path") << ',' << format_double(b[0]) << ',' << format_double(b[1])
               << ',' << p1 << ',' << p2 << '\n';
        }
    return os.str();
}

inline std::string alpha_histogram_csv(const CellResult& r) {
    std::ostringstream os;
    os << "alpha_hat\n";
    for (const auto& rep : r.reps)
        if (rep.ok) os << format_double(rep.alpha_hat) << '\n';
    return os.str();
}

inline void emit_tables(const std::vector<CellResult>& results, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    std::set<int> prior_ids;
    for (const auto& r : results) prior_ids.insert(r.cell.prior_id);
    for (int p : prior_ids)
        write_text_file((out_dir / ("table1_prior" + std::to_string(p) + ".csv")).string(), table1_csv(results, p));
    write_text_file((out_dir / "table3_alpha.csv").string(), table3_csv(results));
    write_text_file((out_dir / "table4_singular.csv").string(), table4_csv(results));
}

inline void emit_scatter(const CellResult& r, const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    write_text_file((out_dir / ("scatter_" + r.cell.file_stem() + ".csv")).string(), scatter_csv(r));
    write_text_file((out_dir / ("alpha_hist_" + r.cell.file_stem() + ".csv")).string(), alpha_histogram_csv(r));
}

inline void emit_replications(const CellResult& r, const std::filesystem::path& out_dir) {
    const auto dir = out_dir / "replications";
    std::filesystem::create_directories(dir);
    write_text_file((dir / (r.cell.file_stem() + ".csv")).string(), replications_csv(r));
}

}  // namespace ridgeiv

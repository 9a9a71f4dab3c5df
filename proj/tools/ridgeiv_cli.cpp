#include "ridgeiv/asymptotics.hpp"
#include "ridgeiv/estimators.hpp"
#include "ridgeiv/harness.hpp"
#include "ridgeiv/io.hpp"
#include "ridgeiv/model.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace ridgeiv;

namespace {

Vector parse_vector(const std::string& text) {
    std::vector<double> v;
    for (auto f : split_fields(text, ',')) v.push_back(parse_double(f));
    Vector out(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Index>(i)] = v[i];
    return out;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

void write_or_print(const std::string& path, const std::string& text) {
    if (path.empty() || path == "-") std::cout << text;
    else write_text_file(path, text);
}

int cmd_generate(const std::string& spec_path, std::optional<Index> n, std::uint64_t seed, const std::string& out) {
    json j = read_json_file(spec_path);
    if (n) j["n"] = *n;
    const ModelSpec spec = spec_from_json(j);
    std::ostringstream os;
    write_dataset_csv(os, generate_dataset(spec, seed));
    write_or_print(out, os.str());
    return 0;
}

int cmd_estimate(const std::string& data_path, double tau, const std::string& prior, std::uint64_t seed,
                 const std::string& out, bool trace) {
    std::ifstream in(data_path);
    if (!in) throw std::runtime_error("cannot open " + data_path);
    const Dataset data = read_dataset_csv(in, tau);
    RidgeConfig config;
    config.tau = tau;
    config.prior = prior.empty() ? Vector::Zero(data.k()) : parse_vector(prior);
    config.keep_trace = trace;
    const RidgeFit fit = ridge_path_estimate(data, config);
    json j = fit_to_json(fit, trace);
    j["seed"] = seed;
    j["tau"] = tau;
    j["prior"] = to_json(config.prior);
    j["n"] = data.n();
    write_or_print(out, dump(j));
    return 0;
}

int cmd_asymptotics(const std::string& spec_path, Index draws, std::uint64_t seed, const std::string& out,
                    const std::string& summary_path, const std::string& v_mode, Index v_reps, unsigned threads) {
    const ModelSpec spec = spec_from_json(read_json_file(spec_path));
    const AsymptoticLaw law = build_law(spec, parse_v_mode(v_mode), v_reps);
    const LimitLawDraws r = simulate_limit_law(law, draws, seed, threads);

    if (!out.empty()) {
        std::ostringstream os;
        os << "draw";
        for (Index c = 0; c < law.layout.size(); ++c) os << ",lambda_" << c + 1;
        os << ",at_boundary\n";
        for (std::size_t i = 0; i < r.samples.size(); ++i) {
            os << i;
            for (Index c = 0; c < law.layout.size(); ++c) os << ',' << format_double(r.samples[i].lambda_hat[c]);
            os << ',' << (r.samples[i].at_boundary ? 1 : 0) << '\n';
        }
        write_text_file(out, os.str());
    }
    json s{{"mass_at_zero", r.mass_at_zero},
           {"draws", draws},
           {"seed", seed},
           {"v_mode", std::string(to_string(law.v_mode))},
           {"alpha_coordinate", law.layout.alpha_coordinate()},
           {"dimension", law.layout.size()},
           {"delta_tilde", law.delta_tilde},
           {"degenerate_prior", law.degenerate_prior}};
    write_or_print(summary_path, dump(s));
    return 0;
}

json manifest_entry(const CellResult& r) {
    return {{"id", r.cell.id()},          {"file", r.cell.file_stem() + ".csv"}, {"delta", r.cell.delta},
            {"n", r.cell.n},              {"prior_id", r.cell.prior_id},         {"prior", to_json(r.cell.prior)},
            {"reps", r.cell.reps},        {"failures", r.summary.failures},      {"failed", r.failed}};
}

json summary_entry(const CellResult& r) {
    auto est = [](const EstimatorSummary& s) {
        return json{{"bias", to_json(s.bias)}, {"sd", to_json(s.sd)}, {"mse", to_json(s.mse)},
                    {"combined_mse", s.combined_mse}};
    };
    const CellSummary& s = r.summary;
    return {{"id", r.cell.id()},
            {"tsls", est(s.tsls)},
            {"ridge_path", est(s.ridge)},
            {"alpha", {{"p_zero", s.p_zero}, {"p_interior", s.p_interior}, {"p_infinite", s.p_infinite}}},
            {"min_singular",
             {{"mean", s.singular.mean}, {"sd", s.singular.sd}, {"q1", s.singular.q1},
              {"median", s.singular.median}, {"q3", s.singular.q3}}},
            {"reps", s.reps},
            {"failures", s.failures}};
}

int cmd_simulate(const std::string& spec_path, std::optional<Index> reps, std::optional<Index> large_reps,
                 std::optional<std::uint64_t> seed, const std::string& out, const std::string& cells,
                 unsigned threads, bool scatter) {
    MCSpec spec = spec_path.empty() ? MCSpec{} : mc_spec_from_json(read_json_file(spec_path));
    if (reps) spec.reps = *reps;
    if (large_reps) spec.large_n_reps = *large_reps;
    if (seed) spec.base_seed = *seed;
    spec.validate();
    const CellFilter filter(cells);
    const fs::path dir(out);
    fs::create_directories(dir);

    std::vector<CellResult> results;
    json manifest = json::array(), summary = json::array();
    bool any_failed = false;
    for (const CellSpec& c : spec.cells()) {
        if (!filter.matches(c)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        CellResult r = run_cell(c, spec.tau, spec.base_seed, threads);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::cerr << c.id() << ": " << c.reps << " reps, " << r.summary.failures << " failures, " << secs << " s"
                  << (r.failed ? "  FAILED" : "") << '\n';
        any_failed = any_failed || r.failed;
        emit_replications(r, dir);
        if (scatter) emit_scatter(r, dir);
        manifest.push_back(manifest_entry(r));
        summary.push_back(summary_entry(r));
        results.push_back(std::move(r));
    }
    if (results.empty()) throw std::invalid_argument("cell filter matched no cells");
    emit_tables(results, dir);
    write_text_file((dir / "cells.json").string(), dump(json{{"spec", mc_spec_to_json(spec)}, {"cells", manifest}}));
    write_text_file((dir / "summary.json").string(), dump(summary));
    return any_failed ? 2 : 0;
}

int cmd_tables(const std::string& in, const std::string& out) {
    const fs::path src(in);
    const json manifest = read_json_file((src / "cells.json").string());
    std::vector<CellResult> results;
    for (const auto& e : manifest.at("cells")) {
        CellResult r;
        r.cell = {e.at("delta").get<double>(), e.at("n").get<Index>(), e.at("prior_id").get<int>(),
                  vector_from_json(e.at("prior"), "prior"), e.at("reps").get<Index>()};
        std::ifstream f(src / "replications" / e.at("file").get<std::string>());
        if (!f) throw std::runtime_error("missing replications for " + r.cell.id());
        r.reps = parse_replications_csv(f);
        r.summary = summarize_cell(r.reps, Vector::Zero(2));
        r.failed = cell_failed(r.summary);
        results.push_back(std::move(r));
    }
    emit_tables(results, out);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Ridge-path IV estimation, asymptotic law simulation and Monte Carlo tables"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("generate", "draw a dataset from a model spec");
    std::string gen_spec, gen_out;
    std::optional<Index> gen_n;
    std::uint64_t gen_seed = 1;
    gen->add_option("--spec", gen_spec, "model spec JSON")->required()->check(CLI::ExistingFile);
    gen->add_option("--n", gen_n, "override sample size");
    gen->add_option("--seed", gen_seed, "random seed");
    gen->add_option("--out", gen_out, "output CSV (stdout if omitted)");

    auto* est = app.add_subcommand("estimate", "fit the ridge path estimator to a dataset CSV");
    std::string est_data, est_prior, est_out;
    double est_tau = 0.7;
    std::uint64_t est_seed = 0;
    bool est_no_trace = false;
    est->add_option("data", est_data, "dataset CSV with header y,x1..,z1..")->required()->check(CLI::ExistingFile);
    est->add_option("--tau", est_tau, "training fraction")->check(CLI::Range(0.0, 1.0));
    est->add_option("--prior", est_prior, "prior as v1,v2,... (zero if omitted)");
    est->add_option("--seed", est_seed, "recorded in the output; the fit itself is deterministic");
    est->add_option("--out", est_out, "fit JSON (stdout if omitted)");
    est->add_flag("--no-trace", est_no_trace, "omit the alpha search trace");

    auto* asy = app.add_subcommand("asymptotics", "simulate the cone-projected limit law");
    std::string asy_spec, asy_out, asy_summary, asy_mode = "monte-carlo";
    Index asy_draws = 100'000, asy_vreps = kDefaultVReps;
    std::uint64_t asy_seed = 1;
    unsigned asy_threads = default_thread_count();
    asy->add_option("--spec", asy_spec, "model spec JSON")->required()->check(CLI::ExistingFile);
    asy->add_option("--draws", asy_draws, "number of limit draws");
    asy->add_option("--seed", asy_seed, "random seed");
    asy->add_option("--out", asy_out, "samples CSV");
    asy->add_option("--summary", asy_summary, "summary JSON (stdout if omitted)");
    asy->add_option("--v-mode", asy_mode, "monte-carlo or analytic-gaussian");
    asy->add_option("--v-reps", asy_vreps, "observations for the monte-carlo covariance");
    asy->add_option("--threads", asy_threads, "worker threads");

    auto* sim = app.add_subcommand("simulate", "run Monte Carlo cells and write tables");
    std::string sim_spec, sim_out, sim_cells;
    std::optional<Index> sim_reps, sim_large;
    std::optional<std::uint64_t> sim_seed;
    unsigned sim_threads = default_thread_count();
    bool sim_no_scatter = false;
    sim->add_option("--spec", sim_spec, "Monte Carlo spec JSON (defaults to the 48-cell design)")
        ->check(CLI::ExistingFile);
    sim->add_option("--reps", sim_reps, "replications per cell");
    sim->add_option("--large-n-reps", sim_large, "replications for cells at or above the large-n threshold");
    sim->add_option("--seed", sim_seed, "base seed");
    sim->add_option("--out", sim_out, "output directory")->required();
    sim->add_option("--cells", sim_cells, "filter such as delta=0.1|1.0,n=25,prior=1");
    sim->add_option("--threads", sim_threads, "worker threads");
    sim->add_flag("--no-scatter", sim_no_scatter, "skip per-cell scatter and histogram files");

    auto* tab = app.add_subcommand("tables", "rebuild table CSVs from a simulate output directory");
    std::string tab_in, tab_out;
    tab->add_option("--in", tab_in, "simulate output directory")->required()->check(CLI::ExistingDirectory);
    tab->add_option("--out", tab_out, "table directory")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_generate(gen_spec, gen_n, gen_seed, gen_out);
        if (*est) return cmd_estimate(est_data, est_tau, est_prior, est_seed, est_out, !est_no_trace);
        if (*asy)
            return cmd_asymptotics(asy_spec, asy_draws, asy_seed, asy_out, asy_summary, asy_mode, asy_vreps,
                                   asy_threads);
        if (*sim)
            return cmd_simulate(sim_spec, sim_reps, sim_large, sim_seed, sim_out, sim_cells, sim_threads,
                                !sim_no_scatter);
        if (*tab) return cmd_tables(tab_in, tab_out);
    } catch (const SingularDesignError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}

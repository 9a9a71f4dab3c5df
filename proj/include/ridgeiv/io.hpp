#pragma once

#include "ridgeiv/estimators.hpp"
#include "ridgeiv/linalg.hpp"
#include "ridgeiv/model.hpp"

#include <nlohmann/json.hpp>

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace ridgeiv {

using json = nlohmann::json;

/// Shortest decimal text that parses back to the same double.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    if (res.ec != std::errc()) throw std::runtime_error("format_double: conversion failed");
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw std::invalid_argument("not a number: '" + std::string(s) + "'");
    return v;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t pos = line.find(sep, start);
        out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline std::string dataset_header(Index k, Index m) {
    std::string h = "y";
    for (Index j = 1; j <= k; ++j) h += ",x" + std::to_string(j);
    for (Index j = 1; j <= m; ++j) h += ",z" + std::to_string(j);
    return h;
}

inline void write_dataset_csv(std::ostream& os, const Dataset& data) {
    os << dataset_header(data.k(), data.m()) << '\n';
    for (Index i = 0; i < data.n(); ++i) {
        os << format_double(data.y()[i]);
        for (Index j = 0; j < data.k(); ++j) os << ',' << format_double(data.x()(i, j));
        for (Index j = 0; j < data.m(); ++j) os << ',' << format_double(data.z()(i, j));
        os << '\n';
    }
}

/// Reads the y,x1..xk,z1..zm layout; k and m come from the header.
inline Dataset read_dataset_csv(std::istream& is, double tau) {
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("dataset csv: empty input");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto head = split_fields(line);
    Index k = 0, m = 0;
    if (head.empty() || head[0] != "y") throw std::invalid_argument("dataset csv: first column must be y");
    for (std::size_t i = 1; i < head.size(); ++i) {
        const std::string_view f = head[i];
        if (!f.empty() && f[0] == 'x' && m == 0 && f == "x" + std::to_string(k + 1)) ++k;
        else if (!f.empty() && f[0] == 'z' && f == "z" + std::to_string(m + 1)) ++m;
        else throw std::invalid_argument("dataset csv: unexpected column '" + std::string(f) + "'");
    }
    if (k < 1 || m < k) throw std::invalid_argument("dataset csv: need 1 <= k <= m columns");

    std::vector<double> vals;
    Index rows = 0;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_fields(line);
        if (static_cast<Index>(f.size()) != 1 + k + m)
            throw std::invalid_argument("dataset csv: row " + std::to_string(rows + 1) + " has wrong field count");
        for (auto v : f) vals.push_back(parse_double(v));
        ++rows;
    }
    const Index width = 1 + k + m;
    Vector y(rows);
    Matrix x(rows, k), z(rows, m);
    for (Index i = 0; i < rows; ++i) {
        const double* r = vals.data() + i * width;
        y[i] = r[0];
        for (Index j = 0; j < k; ++j) x(i, j) = r[1 + j];
        for (Index j = 0; j < m; ++j) z(i, j) = r[1 + k + j];
    }
    return Dataset(std::move(y), std::move(x), std::move(z), split_index(tau, rows));
}

inline json to_json(const Vector& v) {
    json a = json::array();
    for (Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline json to_json(const Matrix& mat) {
    json a = json::array();
    for (Index i = 0; i < mat.rows(); ++i) {
        json row = json::array();
        for (Index j = 0; j < mat.cols(); ++j) row.push_back(mat(i, j));
        a.push_back(std::move(row));
    }
    return a;
}

inline Vector vector_from_json(const json& j, const char* what) {
    if (!j.is_array()) throw std::invalid_argument(std::string(what) + ": expected an array");
    Vector v(static_cast<Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Index>(i)] = j[i].get<double>();
    return v;
}

inline Matrix matrix_from_json(const json& j, const char* what) {
    if (!j.is_array() || j.empty() || !j[0].is_array())
        throw std::invalid_argument(std::string(what) + ": expected an array of rows");
    const std::size_t r = j.size(), c = j[0].size();
    Matrix out(static_cast<Index>(r), static_cast<Index>(c));
    for (std::size_t i = 0; i < r; ++i) {
        if (j[i].size() != c) throw std::invalid_argument(std::string(what) + ": ragged rows");
        for (std::size_t q = 0; q < c; ++q) out(static_cast<Index>(i), static_cast<Index>(q)) = j[i][q].get<double>();
    }
    return out;
}

inline json spec_to_json(const ModelSpec& s) {
    return {{"n", s.n},         {"k", s.k},         {"m", s.m},
            {"beta0", to_json(s.beta0)}, {"gamma0", to_json(s.gamma0)}, {"prior", to_json(s.prior)},
            {"tau", s.tau},     {"err_cov", to_json(s.err_cov)}, {"rz", to_json(s.rz)}};
}

/// Either the full description or the simulation-design shortcut
/// {"delta": d, "n": n, "prior": [...] , "tau": t}. Explicit keys override the shortcut.
inline ModelSpec spec_from_json(const json& j) {
    ModelSpec s;
    if (j.contains("delta")) {
        const Vector prior = j.contains("prior") ? vector_from_json(j.at("prior"), "prior") : design_prior(1);
        s = design_spec(j.at("delta").get<double>(), j.value("n", Index{500}), prior, j.value("tau", 0.7));
    }
    if (j.contains("n")) s.n = j.at("n").get<Index>();
    if (j.contains("tau")) s.tau = j.at("tau").get<double>();
    if (j.contains("beta0")) s.beta0 = vector_from_json(j.at("beta0"), "beta0");
    if (j.contains("gamma0")) s.gamma0 = matrix_from_json(j.at("gamma0"), "gamma0");
    if (j.contains("prior")) s.prior = vector_from_json(j.at("prior"), "prior");
    if (j.contains("err_cov")) s.err_cov = matrix_from_json(j.at("err_cov"), "err_cov");
    if (j.contains("rz")) s.rz = matrix_from_json(j.at("rz"), "rz");
    s.k = s.gamma0.cols();
    s.m = s.gamma0.rows();
    if (j.contains("k") && j.at("k").get<Index>() != s.k) throw std::invalid_argument("spec: k disagrees with gamma0");
    if (j.contains("m") && j.at("m").get<Index>() != s.m) throw std::invalid_argument("spec: m disagrees with gamma0");
    s.validate();
    return s;
}

inline json fit_to_json(const RidgeFit& f, bool with_trace = true) {
    json j{{"beta_hat", to_json(f.beta_hat)},
           {"alpha_hat", f.alpha_hat},
           {"q_hat", f.q_hat},
           {"beta_2sls_full", to_json(f.beta_2sls_full)},
           {"cov_2sls", to_json(f.cov_2sls)},
           {"regularization_class", std::string(to_string(f.regularization_class))},
           {"split_at", f.split_at},
           {"refined", f.refined}};
    if (with_trace) {
        json t = json::array();
        for (const auto& p : f.search_trace) t.push_back({p.alpha, p.q});
        j["search_trace"] = std::move(t);
    }
    return j;
}

inline json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return json::parse(in);
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace ridgeiv

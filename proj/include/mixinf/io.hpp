#pragma once

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mixinf/errors.hpp"
#include "mixinf/lmm.hpp"

namespace mixinf::io {

using json = nlohmann::json;

/// Malformed input files or configuration documents.
class InputError : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;  // rows[k] is data line k + 1 (header excluded)
};

/// RFC 4180 reader: quoted fields, doubled quotes, CRLF or LF line ends, optional UTF-8 BOM.
inline CsvTable parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> records;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, field_started = false, any = false;
    std::size_t k = 0;
    if (text.rfind("\xEF\xBB\xBF", 0) == 0) k = 3;
    auto end_field = [&] {
        rec.push_back(field);
        field.clear();
        field_started = false;
    };
    auto end_record = [&] {
        end_field();
        if (!(rec.size() == 1 && rec[0].empty())) records.push_back(rec);
        rec.clear();
    };
    for (; k < text.size(); ++k) {
        const char c = text[k];
        any = true;
        if (quoted) {
            if (c == '"') {
                if (k + 1 < text.size() && text[k + 1] == '"') {
                    field.push_back('"');
                    ++k;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        if (c == '"') {
            if (field_started && !field.empty())
                throw InputError("CSV: stray quote inside an unquoted field on record " +
                                 std::to_string(records.size() + 1));
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            end_field();
        } else if (c == '\r') {
            if (k + 1 < text.size() && text[k + 1] == '\n') ++k;
            end_record();
        } else if (c == '\n') {
            end_record();
        } else {
            field.push_back(c);
            field_started = true;
        }
    }
    if (quoted) throw InputError("CSV: unterminated quoted field");
    if (any && (!field.empty() || !rec.empty())) end_record();
    if (records.empty()) throw InputError("CSV: no header line");
    CsvTable t;
    t.header = records.front();
    for (std::size_t r = 1; r < records.size(); ++r) {
        if (records[r].size() != t.header.size())
            throw InputError("CSV: row " + std::to_string(r) + " has " + std::to_string(records[r].size()) +
                             " fields, header has " + std::to_string(t.header.size()));
        t.rows.push_back(records[r]);
    }
    return t;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

/// Shortest decimal form that round-trips exactly.
inline std::string format_double(double x) {
    if (std::isnan(x)) return "nan";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

inline bool parse_double(const std::string& raw, double& out) {
    std::size_t b = 0, e = raw.size();
    while (b < e && std::isspace(static_cast<unsigned char>(raw[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(raw[e - 1]))) --e;
    if (b == e) return false;
    if (raw[b] == '+') ++b;
    const auto res = std::from_chars(raw.data() + b, raw.data() + e, out);
    return res.ec == std::errc() && res.ptr == raw.data() + e && std::isfinite(out);
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write '" + path + "'");
    out << content;
}

/// Columns cluster, y and optional x1..xp; an intercept column is prepended to the covariates.
inline NerSpec read_input_table(const std::string& text) {
    const CsvTable t = parse_csv(text);
    Index cluster_col = -1, y_col = -1;
    std::vector<std::pair<int, Index>> xcols;  // (k, column)
    std::set<std::string> seen;
    for (Index c = 0; c < static_cast<Index>(t.header.size()); ++c) {
        const std::string& h = t.header[static_cast<std::size_t>(c)];
        if (!seen.insert(h).second) throw InputError("CSV: duplicate column '" + h + "'");
        if (h == "cluster") {
            cluster_col = c;
        } else if (h == "y") {
            y_col = c;
        } else if (h.size() > 1 && h[0] == 'x' && h.find_first_not_of("0123456789", 1) == std::string::npos &&
                   h[1] != '0') {
            xcols.emplace_back(std::stoi(h.substr(1)), c);
        } else {
            throw InputError("CSV: unexpected column '" + h + "' (allowed: cluster, y, x1..xp)");
        }
    }
    if (cluster_col < 0) throw InputError("CSV: missing required column 'cluster'");
    if (y_col < 0) throw InputError("CSV: missing required column 'y'");
    std::sort(xcols.begin(), xcols.end());
    for (std::size_t k = 0; k < xcols.size(); ++k)
        if (xcols[k].first != static_cast<int>(k) + 1)
            throw InputError("CSV: covariate columns must be x1..xp without gaps");
    if (t.rows.empty()) throw InputError("CSV: no data rows");

    NerSpec spec;
    spec.x_names.push_back("intercept");
    for (const auto& xc : xcols) spec.x_names.push_back(t.header[static_cast<std::size_t>(xc.second)]);
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = "CSV row " + std::to_string(r + 1);
        NerRow nr;
        nr.cluster = row[static_cast<std::size_t>(cluster_col)];
        if (nr.cluster.empty()) throw InputError(where + ": missing value in column 'cluster'");
        if (!parse_double(row[static_cast<std::size_t>(y_col)], nr.y))
            throw InputError(where + ": missing or non-numeric value in column 'y'");
        nr.x.resize(static_cast<Index>(xcols.size()) + 1);
        nr.x(0) = 1.0;
        for (std::size_t k = 0; k < xcols.size(); ++k) {
            double v = 0.0;
            if (!parse_double(row[static_cast<std::size_t>(xcols[k].second)], v))
                throw InputError(where + ": missing or non-numeric value in column '" +
                                 t.header[static_cast<std::size_t>(xcols[k].second)] + "'");
            nr.x(static_cast<Index>(k) + 1) = v;
        }
        spec.rows.push_back(std::move(nr));
    }
    return spec;
}

/// Inverse of read_input_table for datasets whose first covariate is the intercept.
inline std::string write_input_table(const LmmDataset& data) {
    std::ostringstream out;
    out << "cluster,y";
    const Index p = data.p();
    const bool intercept = !data.x_names().empty() && data.x_names().front() == "intercept";
    for (Index j = intercept ? 1 : 0; j < p; ++j) out << ",x" << (intercept ? j : j + 1);
    out << "\n";
    for (const auto& b : data.blocks()) {
        for (Index k = 0; k < b.size(); ++k) {
            out << csv_escape(b.id) << "," << format_double(b.y(k));
            for (Index j = intercept ? 1 : 0; j < p; ++j) out << "," << format_double(b.X(k, j));
            out << "\n";
        }
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

inline json to_json(const VectorXd& v) {
    json a = json::array();
    for (Index k = 0; k < v.size(); ++k) a.push_back(v(k));
    return a;
}

inline json to_json(const MatrixXd& m) {
    json a = json::array();
    for (Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        a.push_back(row);
    }
    return a;
}

inline VectorXd vector_from_json(const json& j, const std::string& what) {
    if (!j.is_array()) throw InputError(what + ": expected an array of numbers");
    VectorXd v(static_cast<Index>(j.size()));
    for (std::size_t k = 0; k < j.size(); ++k) {
        if (!j[k].is_number()) throw InputError(what + ": entry " + std::to_string(k) + " is not a number");
        v(static_cast<Index>(k)) = j[k].get<double>();
    }
    return v;
}

inline MatrixXd matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) throw InputError(what + ": expected a non-empty list of rows");
    const std::size_t cols = j[0].is_array() ? j[0].size() : 0;
    MatrixXd m(static_cast<Index>(j.size()), static_cast<Index>(cols));
    for (std::size_t r = 0; r < j.size(); ++r) {
        if (!j[r].is_array() || j[r].size() != cols) throw InputError(what + ": ragged row " + std::to_string(r));
        m.row(static_cast<Index>(r)) = vector_from_json(j[r], what).transpose();
    }
    return m;
}

inline void reject_unknown_keys(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw InputError(where + ": expected an object");
    for (const auto& [k, _] : obj.items())
        if (!allowed.count(k)) throw InputError(where + ": unknown key '" + k + "'");
}

inline json parse_json(const std::string& text, const std::string& what) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw InputError(what + ": invalid JSON (" + e.what() + ")");
    }
}

}  // namespace mixinf::io

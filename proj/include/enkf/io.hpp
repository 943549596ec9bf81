#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "enkf/errors.hpp"
#include "enkf/matrix.hpp"

namespace enkf {

// Shortest round-trip decimal representation of a double. %.17g always
// round-trips but is noisy; try ascending precision first.
inline std::string format_double(double v) {
    char buf[40];
    for (int prec = 6; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

// Matrix interchange format: one header line "rows,cols", then one CSV line
// per row. Used for ensembles (members as rows) and covariances.
inline void write_matrix_csv(const std::string& path, const Matrix& m) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << m.rows << "," << m.cols << "\n";
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) {
            if (j) out << ",";
            out << format_double(m(i, j));
        }
        out << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

inline Matrix read_matrix_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty matrix file: " + path);
    std::size_t rows = 0, cols = 0;
    {
        std::istringstream hdr(line);
        char comma = 0;
        if (!(hdr >> rows >> comma >> cols) || comma != ',' || rows < 1 || cols < 1)
            throw ParseError("bad matrix header (want rows,cols): " + path);
    }
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
        if (!std::getline(in, line)) throw ParseError("truncated matrix file: " + path);
        const char* s = line.c_str();
        char* end = nullptr;
        for (std::size_t j = 0; j < cols; ++j) {
            m(i, j) = std::strtod(s, &end);
            if (end == s) throw ParseError("bad number in matrix file: " + path);
            s = end;
            if (*s == ',') ++s;
        }
    }
    return m;
}

// Flat key=value configuration text; '#' starts a comment, blank lines are
// skipped. Later keys override earlier ones.
inline std::map<std::string, std::string> parse_key_values(const std::string& text,
                                                           const std::string& origin) {
    std::map<std::string, std::string> kv;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        std::size_t e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = line.substr(0, eq);
        std::string val = line.substr(eq + 1);
        const auto trim = [](std::string& s) {
            const std::size_t b2 = s.find_first_not_of(" \t");
            const std::size_t e2 = s.find_last_not_of(" \t");
            s = (b2 == std::string::npos) ? std::string() : s.substr(b2, e2 - b2 + 1);
        };
        trim(key);
        trim(val);
        if (key.empty()) throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
        kv[key] = val;
    }
    return kv;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

} // namespace enkf

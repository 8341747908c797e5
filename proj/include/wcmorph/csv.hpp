#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "wcmorph/errors.hpp"
#include "wcmorph/sphere.hpp"

namespace wcm {

// Round-trip-exact double formatting for all text artifacts.
inline std::string fmt_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct CsvFile {
    std::vector<std::string> comments;  // leading '#' lines, without the marker
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline void write_csv(const std::string& path, const CsvFile& csv) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ArgumentError("csv: cannot open " + path + " for writing");
    for (const auto& c : csv.comments) out << "# " << c << "\n";
    for (std::size_t i = 0; i < csv.header.size(); ++i) {
        if (i) out << ',';
        out << csv.header[i];
    }
    out << "\n";
    for (const auto& row : csv.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << ',';
            out << row[i];
        }
        out << "\n";
    }
}

inline CsvFile read_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StageDependencyError("missing csv file: " + path);
    CsvFile csv;
    std::string line;
    bool header_done = false;
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string field;
        std::istringstream is(s);
        while (std::getline(is, field, ',')) out.push_back(field);
        if (!s.empty() && s.back() == ',') out.emplace_back();
        return out;
    };
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::size_t start = line.find_first_not_of("# ");
            csv.comments.push_back(start == std::string::npos ? "" : line.substr(start));
            continue;
        }
        if (!header_done) {
            csv.header = split(line);
            header_done = true;
        } else {
            auto row = split(line);
            if (row.size() != csv.header.size()) {
                throw FormatError(path + ": row width " + std::to_string(row.size()) +
                                  " does not match header width " +
                                  std::to_string(csv.header.size()));
            }
            csv.rows.push_back(std::move(row));
        }
    }
    if (!header_done) throw FormatError(path + ": empty csv");
    return csv;
}

// Embedding container: one embedding per row, `id,dim0..dimN`.
inline void save_embeddings_csv(const std::string& path,
                                const std::vector<std::pair<std::string, Embedding>>& rows,
                                const std::vector<std::string>& comments = {}) {
    if (rows.empty()) throw ArgumentError("embeddings csv: nothing to write");
    CsvFile csv;
    csv.comments = comments;
    csv.header.push_back("id");
    for (std::size_t d = 0; d < rows.front().second.dim(); ++d) {
        csv.header.push_back("dim" + std::to_string(d));
    }
    for (const auto& [id, e] : rows) {
        std::vector<std::string> row{id};
        for (std::size_t d = 0; d < e.dim(); ++d) row.push_back(fmt_double(e[d]));
        csv.rows.push_back(std::move(row));
    }
    write_csv(path, csv);
}

// Norms are validated on load: a row that is not unit-norm is rejected.
inline std::vector<std::pair<std::string, Embedding>> load_embeddings_csv(
    const std::string& path) {
    CsvFile csv = read_csv(path);
    if (csv.header.size() < 2 || csv.header[0] != "id" || csv.header[1] != "dim0") {
        throw FormatError(path + ": expected header id,dim0..dimN");
    }
    std::vector<std::pair<std::string, Embedding>> out;
    for (const auto& row : csv.rows) {
        std::vector<double> v;
        v.reserve(row.size() - 1);
        for (std::size_t i = 1; i < row.size(); ++i) v.push_back(std::stod(row[i]));
        try {
            out.emplace_back(row[0], Embedding::unit(std::move(v)));
        } catch (const InvariantError& e) {
            throw FormatError(path + ": embedding '" + row[0] + "' " + e.what());
        }
    }
    return out;
}

} // namespace wcm

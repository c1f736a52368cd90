#include "calpa/util.hpp"

#include "calpa/rng.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace calpa {

std::string bytes_digest_hex(const void* data, std::size_t n) {
    std::uint64_t h = fnv1a64(data, n);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string file_digest_hex(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("digest: cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string s = ss.str();
    return bytes_digest_hex(s.data(), s.size());
}

std::string percent_3sig(double num, double den) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3g%%", 100.0 * num / den);
    return buf;
}

std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot read " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
}

std::string format_table(const std::vector<std::vector<std::string>>& rows) {
    if (rows.empty()) return "";
    std::vector<std::size_t> width(rows[0].size(), 0);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    std::string out;
    for (const auto& r : rows) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out += r[i];
            if (i + 1 < r.size()) out.append(width[i] - r[i].size() + 2, ' ');
        }
        out += "\n";
    }
    return out;
}

} // namespace calpa

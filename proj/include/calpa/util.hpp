#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace calpa {

// FNV-1a over a file's bytes, hex-encoded; the provenance digest embedded in
// artifacts (checkpoints, plans, traces).
std::string file_digest_hex(const std::string& path);
std::string bytes_digest_hex(const void* data, std::size_t n);

// Percentage of num/den rounded to three significant digits, e.g. "1.45%".
std::string percent_3sig(double num, double den);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Column-aligned plain-text table; every row must have the same arity.
std::string format_table(const std::vector<std::vector<std::string>>& rows);

} // namespace calpa

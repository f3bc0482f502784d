#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace metaite {

/// Shortest representation that parses back to the same double.
std::string format_double(double v);
double parse_double(std::string_view s);
std::vector<std::string> split_csv_line(const std::string& line);

/// Writes to `path + ".tmp"` then renames over `path`.
void write_file_atomic(const std::string& path, const std::string& contents);
std::string read_file(const std::string& path);

}  // namespace metaite

#pragma once

#include <string>
#include <vector>

namespace poisonlab {

// One prompt per line, UTF-8, blank lines ignored.
std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);
void write_text(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

}  // namespace poisonlab

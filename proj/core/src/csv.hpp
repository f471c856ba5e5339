#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace crsim::csv {

/// Splits one CSV record; double-quoted fields may contain commas and "".
/// Returns false on an unterminated quote.
bool split(std::string_view line, std::vector<std::string>& fields);

/// Quotes a field when it contains a comma, quote or newline.
std::string escape(std::string_view field);

bool parse_int(std::string_view text, std::int64_t& out);
bool parse_double(std::string_view text, double& out);

std::string_view trim(std::string_view text);

/// Shortest decimal form that round-trips the double.
std::string format_double(double value);

}  // namespace crsim::csv

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace nbisect::io {

// SHA-1 of "blob <size>\0<content>", hex encoded (same as `git hash-object`).
std::string git_hash(std::string_view content);
std::string git_hash_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
// Creates parent directories as needed.
void write_file(const std::filesystem::path& path, std::string_view content);

// Shortest decimal form that round-trips to the same double.
std::string format_double(double v);

// Minimal CSV writer: quotes fields containing separators or quotes.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(const std::vector<std::string>& fields);
  const std::string& str() const { return out_; }
  void save(const std::filesystem::path& path) const { write_file(path, out_); }

 private:
  std::size_t columns_;
  std::string out_;
};

// Splits CSV text into rows of fields (handles quoted fields).
std::vector<std::vector<std::string>> parse_csv(std::string_view text);

}  // namespace nbisect::io

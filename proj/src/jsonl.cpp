#include "promptner/jsonl.hpp"

#include "promptner/errors.hpp"
#include "promptner/text.hpp"

#include <fstream>
#include <sstream>

namespace promptner::jsonl {

void for_each(const std::filesystem::path& path,
              const std::function<void(std::size_t, const json&)>& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    try {
      fn(line_no, json::parse(line));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

void write(const std::filesystem::path& path, const std::vector<json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  write_file(path, out);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << content;
}

std::string string_field(const json& record, const char* name) {
  auto it = record.find(name);
  if (it == record.end() || !it->is_string()) {
    throw DataError(std::string("missing string field \"") + name + "\"");
  }
  return it->get<std::string>();
}

}  // namespace promptner::jsonl

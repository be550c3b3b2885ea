#include "cama/fsutil.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace cama {

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    os.flush();
    if (!os) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw std::runtime_error("cannot move " + tmp.string() + " into place: " + ec.message());
  }
}

void append_line_atomic(const std::filesystem::path& path, const std::string& line) {
  std::string content = std::filesystem::exists(path) ? read_file(path) : std::string();
  content += line;
  content += '\n';
  write_file_atomic(path, content);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace cama

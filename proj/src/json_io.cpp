#include "intapt/json_io.hpp"

#include "intapt/error.hpp"

#include <fstream>

namespace intapt {

void write_json(const std::filesystem::path &path, const nlohmann::json &j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw StageError("cannot write " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw StageError("cannot write " + path.string());
}

nlohmann::json read_json(const std::filesystem::path &path) {
  std::ifstream is(path);
  if (!is) throw StageError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception &e) {
    throw StageError("malformed " + path.string() + ": " + e.what());
  }
}

}  // namespace intapt

#include "intapt/nn/archive.hpp"

#include "intapt/error.hpp"
#include "intapt/hash.hpp"

#include <cstring>
#include <fstream>
#include <unordered_map>

namespace intapt::nn {

namespace {

constexpr char kMagic[8] = {'I', 'N', 'T', 'A', 'P', 'T', 'C', 'K'};

template <typename T>
void put(std::ostream &os, T v) {
  os.write(reinterpret_cast<const char *>(&v), sizeof(T));
}

template <typename T>
T get(std::istream &is) {
  T v{};
  is.read(reinterpret_cast<char *>(&v), sizeof(T));
  if (!is) throw StageError("archive: truncated file");
  return v;
}

}  // namespace

std::string fingerprint(const ConstParameterList &params) {
  Sha256 h;
  for (const Parameter *p : params) {
    h.update(p->name);
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    h.update(shape, sizeof(shape));
    h.update(p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  return h.hex_digest();
}

void write_archive(const std::filesystem::path &path, const std::string &kind,
                   const nlohmann::json &meta, const ConstParameterList &params) {
  std::string payload;
  nlohmann::json tensors = nlohmann::json::array();
  for (const Parameter *p : params) {
    tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    payload.append(reinterpret_cast<const char *>(p->value.data()),
                   sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  nlohmann::json header = {{"kind", kind},
                           {"meta", meta},
                           {"tensors", tensors},
                           {"fingerprint", fingerprint(params)},
                           {"payload_sha256", sha256_hex(payload)}};
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw StageError("archive: cannot open " + path.string() + " for writing");
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kArchiveVersion);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw StageError("archive: write failed for " + path.string());
}

Archive read_archive(const std::filesystem::path &path, const std::string &expected_kind) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StageError("archive: cannot open " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw StageError("archive: bad magic in " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kArchiveVersion) {
    throw StageError("archive: unsupported version " + std::to_string(version));
  }
  const auto header_len = get<std::uint64_t>(is);
  std::string text(header_len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(header_len));
  if (!is) throw StageError("archive: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception &e) {
    throw StageError(std::string("archive: corrupt header: ") + e.what());
  }
  Archive out;
  out.kind = header.at("kind").get<std::string>();
  if (!expected_kind.empty() && out.kind != expected_kind) {
    throw StageError("archive: expected kind '" + expected_kind + "' but found '" + out.kind + "'");
  }
  out.meta = header.at("meta");
  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (sha256_hex(payload) != header.at("payload_sha256").get<std::string>()) {
    throw StageError("archive: payload checksum mismatch in " + path.string());
  }
  std::size_t at = 0;
  for (const auto &t : header.at("tensors")) {
    const auto rows = t.at("rows").get<Eigen::Index>();
    const auto cols = t.at("cols").get<Eigen::Index>();
    Matrix m(rows, cols);
    const std::size_t bytes = sizeof(double) * static_cast<std::size_t>(rows * cols);
    if (at + bytes > payload.size()) throw StageError("archive: payload shorter than header");
    std::memcpy(m.data(), payload.data() + at, bytes);
    at += bytes;
    out.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
  }
  if (at != payload.size()) throw StageError("archive: trailing payload bytes");
  return out;
}

void assign(const Archive &archive, const ParameterList &params) {
  std::unordered_map<std::string, const Matrix *> by_name;
  for (const auto &[name, m] : archive.tensors) by_name.emplace(name, &m);
  if (by_name.size() != params.size()) {
    throw StageError("archive: tensor count " + std::to_string(by_name.size()) +
                     " does not match model (" + std::to_string(params.size()) + ")");
  }
  for (Parameter *p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw StageError("archive: missing tensor " + p->name);
    if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols()) {
      throw StageError("archive: shape mismatch for " + p->name);
    }
    p->value = *it->second;
  }
}

}  // namespace intapt::nn

#include "duco/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace duco {

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

void Archive::add_parameters(const std::string& prefix, const std::vector<NamedTensor>& params) {
  for (const auto& p : params)
    arrays.push_back({prefix + "." + p.name, p.tensor.shape(),
                      std::vector<double>(p.tensor.data().begin(), p.tensor.data().end())});
}

const ArchiveArray& Archive::find(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw std::runtime_error("archive has no array '" + name + "'");
}

void Archive::restore_parameters(const std::string& prefix, const std::vector<NamedTensor>& params) const {
  // Validate everything before mutating anything.
  std::vector<const ArchiveArray*> sources;
  for (const auto& p : params) {
    if (p.tensor.frozen()) throw std::logic_error("refusing to overwrite frozen parameter '" + p.name + "'");
    const ArchiveArray& a = find(prefix + "." + p.name);
    if (a.shape != p.tensor.shape())
      throw std::runtime_error("shape mismatch for '" + a.name + "': file " + shape_str(a.shape) + ", model " +
                               shape_str(p.tensor.shape()));
    sources.push_back(&a);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].tensor;
    std::copy(sources[i]->values.begin(), sources[i]->values.end(), t.data().begin());
  }
}

void write_archive(const std::filesystem::path& path, const std::string& magic, const Archive& archive) {
  if (magic.size() != 8) throw std::invalid_argument("archive magic must be 8 bytes");
  nlohmann::json header = archive.header;
  nlohmann::json index = nlohmann::json::array();
  for (const auto& a : archive.arrays) {
    if (numel(a.shape) != a.values.size()) throw std::invalid_argument("archive array '" + a.name + "' malformed");
    index.push_back({{"name", a.name}, {"shape", a.shape}});
  }
  header["arrays"] = index;
  const std::string head = header.dump();

  std::string bytes = magic;
  const std::uint64_t head_len = head.size();
  bytes.append(reinterpret_cast<const char*>(&head_len), sizeof head_len);
  bytes += head;
  for (const auto& a : archive.arrays)
    bytes.append(reinterpret_cast<const char*>(a.values.data()), a.values.size() * sizeof(double));
  const std::uint64_t h = fnv1a(bytes);
  bytes.append(reinterpret_cast<const char*>(&h), sizeof h);

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path, const std::string& magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  const std::string where = path.string() + ": ";
  if (bytes.size() < 8 + 8 + 8) throw std::runtime_error(where + "truncated file");
  if (bytes.compare(0, 8, magic) != 0) throw std::runtime_error(where + "bad magic (expected " + magic + ")");
  std::uint64_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (fnv1a(bytes.substr(0, bytes.size() - 8)) != stored) throw std::runtime_error(where + "checksum mismatch");

  std::uint64_t head_len = 0;
  std::memcpy(&head_len, bytes.data() + 8, 8);
  if (16 + head_len > bytes.size() - 8) throw std::runtime_error(where + "header overruns file");
  Archive archive;
  try {
    archive.header = nlohmann::json::parse(bytes.substr(16, head_len));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(where + "unreadable header: " + e.what());
  }
  std::size_t offset = 16 + head_len;
  const std::size_t end = bytes.size() - 8;
  for (const auto& entry : archive.header.at("arrays")) {
    ArchiveArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    const std::size_t n = numel(a.shape);
    if (offset + n * sizeof(double) > end) throw std::runtime_error(where + "payload truncated at '" + a.name + "'");
    a.values.resize(n);
    std::memcpy(a.values.data(), bytes.data() + offset, n * sizeof(double));
    offset += n * sizeof(double);
    archive.arrays.push_back(std::move(a));
  }
  if (offset != end) throw std::runtime_error(where + "trailing bytes after payload");
  archive.header.erase("arrays");
  return archive;
}

}  // namespace duco

#include "stemedit/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace stemedit {

namespace {

constexpr char kMagic[8] = {'S', 'T', 'E', 'M', 'T', 'N', 'S', 'R'};
constexpr uint32_t kVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  return v;
}

}  // namespace

void TensorFile::add_matrix(const std::string& name, TensorGroup group, const Mat<float>& m) {
  if (index_.count(name)) throw InputError("TensorFile: duplicate name " + name);
  Entry e;
  e.name = name;
  e.group = group;
  e.matrix = m;
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
}

void TensorFile::add_bytes(const std::string& name, TensorGroup group, std::string data) {
  if (index_.count(name)) throw InputError("TensorFile: duplicate name " + name);
  Entry e;
  e.name = name;
  e.group = group;
  e.is_bytes = true;
  e.bytes = std::move(data);
  index_[name] = entries_.size();
  entries_.push_back(std::move(e));
}

const TensorFile::Entry& TensorFile::find(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw InputError("TensorFile: missing entry " + name);
  return entries_[it->second];
}

const Mat<float>& TensorFile::matrix(const std::string& name) const {
  const Entry& e = find(name);
  if (e.is_bytes) throw InputError("TensorFile: " + name + " is not a matrix");
  return e.matrix;
}

const std::string& TensorFile::bytes(const std::string& name) const {
  const Entry& e = find(name);
  if (!e.is_bytes) throw InputError("TensorFile: " + name + " is not a byte entry");
  return e.bytes;
}

std::vector<std::string> TensorFile::group_names(TensorGroup group) const {
  std::vector<std::string> names;
  for (const Entry& e : entries_)
    if (e.group == group) names.push_back(e.name);
  std::sort(names.begin(), names.end());
  return names;
}

uint64_t TensorFile::group_hash(TensorGroup group) const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const std::string& name : group_names(group)) {
    const Entry& e = find(name);
    h = fnv1a64(name.data(), name.size(), h);
    if (e.is_bytes) {
      h = fnv1a64(e.bytes.data(), e.bytes.size(), h);
    } else {
      uint64_t r = static_cast<uint64_t>(e.matrix.rows()), c = static_cast<uint64_t>(e.matrix.cols());
      h = fnv1a64(&r, sizeof(r), h);
      h = fnv1a64(&c, sizeof(c), h);
      for (Eigen::Index i = 0; i < e.matrix.rows(); ++i)
        for (Eigen::Index j = 0; j < e.matrix.cols(); ++j) {
          float v = e.matrix(i, j);
          h = fnv1a64(&v, sizeof(v), h);
        }
    }
  }
  return h;
}

void TensorFile::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("TensorFile: cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  put<uint32_t>(out, kVersion);
  put<uint32_t>(out, static_cast<uint32_t>(entries_.size()));
  for (const Entry& e : entries_) {
    put<uint32_t>(out, static_cast<uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<uint8_t>(out, static_cast<uint8_t>(e.group));
    put<uint8_t>(out, e.is_bytes ? 1 : 0);
    if (e.is_bytes) {
      put<uint64_t>(out, e.bytes.size());
      out.write(e.bytes.data(), static_cast<std::streamsize>(e.bytes.size()));
    } else {
      put<uint64_t>(out, static_cast<uint64_t>(e.matrix.rows()));
      put<uint64_t>(out, static_cast<uint64_t>(e.matrix.cols()));
      for (Eigen::Index i = 0; i < e.matrix.rows(); ++i)
        for (Eigen::Index j = 0; j < e.matrix.cols(); ++j) {
          float v = e.matrix(i, j);
          out.write(reinterpret_cast<const char*>(&v), sizeof(v));
        }
    }
  }
  if (!out) throw InputError("TensorFile: write failed for " + path);
}

TensorFile TensorFile::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("TensorFile: cannot open " + path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw InputError("TensorFile: bad magic in " + path);
  uint32_t version = get<uint32_t>(in);
  if (version != kVersion)
    throw InputError("TensorFile: unsupported version " + std::to_string(version));
  uint32_t count = get<uint32_t>(in);
  TensorFile f;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t len = get<uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    auto group = static_cast<TensorGroup>(get<uint8_t>(in));
    bool is_bytes = get<uint8_t>(in) != 0;
    if (is_bytes) {
      uint64_t sz = get<uint64_t>(in);
      std::string data(sz, '\0');
      in.read(data.data(), static_cast<std::streamsize>(sz));
      f.add_bytes(name, group, std::move(data));
    } else {
      uint64_t r = get<uint64_t>(in), c = get<uint64_t>(in);
      Mat<float> m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      for (uint64_t a = 0; a < r; ++a)
        for (uint64_t b = 0; b < c; ++b)
          m(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = get<float>(in);
      f.add_matrix(name, group, m);
    }
    if (!in) throw InputError("TensorFile: truncated file " + path);
  }
  return f;
}

}  // namespace stemedit

#include "preedit/params.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace preedit {

int ParamStore::add(const std::string& name, Tensor t) {
  if (has(name)) throw std::invalid_argument("params: duplicate name " + name);
  names_.push_back(name);
  values_.push_back(std::move(t));
  return size() - 1;
}

int ParamStore::index(const std::string& name) const {
  for (size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return -1;
}

Tensor& ParamStore::at(const std::string& name) {
  const int i = index(name);
  if (i < 0) throw std::out_of_range("params: no tensor named " + name);
  return values_[static_cast<size_t>(i)];
}

const Tensor& ParamStore::at(const std::string& name) const {
  const int i = index(name);
  if (i < 0) throw std::out_of_range("params: no tensor named " + name);
  return values_[static_cast<size_t>(i)];
}

const std::string* Checkpoint::find_meta(const std::string& key) const {
  for (const auto& [k, v] : meta)
    if (k == key) return &v;
  return nullptr;
}

ParamStore* Checkpoint::find_section(const std::string& name) {
  for (auto& [k, v] : sections)
    if (k == name) return &v;
  return nullptr;
}

const ParamStore* Checkpoint::find_section(const std::string& name) const {
  for (const auto& [k, v] : sections)
    if (k == name) return &v;
  return nullptr;
}

namespace {

constexpr char kMagic[8] = {'P', 'R', 'E', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}
void put_i64(std::string& out, int64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}
void put_str(std::string& out, const std::string& s) {
  put_u32(out, static_cast<uint32_t>(s.size()));
  out.append(s);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;
  void need(size_t n) const {
    if (pos + n > buf.size())
      throw std::runtime_error("checkpoint: truncated file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  }
  int64_t i64() {
    need(8);
    int64_t v;
    std::memcpy(&v, buf.data() + pos, 8);
    pos += 8;
    return v;
  }
  std::string str() {
    const uint32_t n = u32();
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

void atomic_write_file(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp + " for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::string out;
  out.append(kMagic, 8);
  put_u32(out, ck.version);
  put_u32(out, static_cast<uint32_t>(ck.meta.size()));
  for (const auto& [k, v] : ck.meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put_u32(out, static_cast<uint32_t>(ck.sections.size()));
  for (const auto& [name, store] : ck.sections) {
    put_str(out, name);
    put_u32(out, static_cast<uint32_t>(store.size()));
    for (int i = 0; i < store.size(); ++i) {
      put_str(out, store.name(i));
      const Tensor& t = store.value(i);
      put_u32(out, static_cast<uint32_t>(t.rank()));
      for (int64_t d : t.shape()) put_i64(out, d);
      const size_t bytes = static_cast<size_t>(t.numel()) * sizeof(double);
      out.append(reinterpret_cast<const char*>(t.data()), bytes);
    }
  }
  atomic_write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  Reader r{buf, 8};
  Checkpoint ck;
  ck.version = r.u32();
  if (ck.version != 1)
    throw std::runtime_error("checkpoint: unsupported version " +
                             std::to_string(ck.version));
  const uint32_t nmeta = r.u32();
  for (uint32_t i = 0; i < nmeta; ++i) {
    std::string k = r.str();
    ck.meta.emplace_back(std::move(k), r.str());
  }
  const uint32_t nsec = r.u32();
  for (uint32_t s = 0; s < nsec; ++s) {
    std::string name = r.str();
    ParamStore store;
    const uint32_t nt = r.u32();
    for (uint32_t i = 0; i < nt; ++i) {
      std::string tname = r.str();
      const uint32_t rank = r.u32();
      std::vector<int64_t> shape(rank);
      for (uint32_t d = 0; d < rank; ++d) shape[d] = r.i64();
      Tensor t(shape);
      const size_t bytes = static_cast<size_t>(t.numel()) * sizeof(double);
      r.need(bytes);
      std::memcpy(t.data(), buf.data() + r.pos, bytes);
      r.pos += bytes;
      store.add(tname, std::move(t));
    }
    ck.sections.emplace_back(std::move(name), std::move(store));
  }
  return ck;
}

}  // namespace preedit

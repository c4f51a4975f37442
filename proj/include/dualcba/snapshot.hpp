#pragma once

// Flat parameter snapshots for checkpoint/restore.
//
//   "DCBAPARM"  u32 version (1)  u32 count
//   count x { u32 name_len, name bytes, u32 rank, rank x u64 dims,
//             prod(dims) x f64 }
//
// All integers and doubles little-endian. Batch-norm population statistics
// are stored as ordinary entries named "<layer>.bn.population_mean/var".

#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "dualcba/cba.hpp"
#include "dualcba/net.hpp"
#include "dualcba/stream.hpp"

namespace dcba {

using Snapshot = std::vector<std::pair<std::string, Tensor>>;

inline void write_snapshot(std::ostream& os, const Snapshot& snap) {
  os.write("DCBAPARM", 8);
  io::put_u32(os, 1);
  io::put_u32(os, static_cast<std::uint32_t>(snap.size()));
  for (const auto& [name, t] : snap) {
    io::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    io::put_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) io::put_u64(os, d);
    for (double v : t.values()) io::put_f64(os, v);
  }
  if (!os) throw IoError("write_snapshot: write failed");
}

inline Snapshot read_snapshot(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "DCBAPARM") throw IoError("read_snapshot: bad magic");
  if (io::get_u32(is) != 1) throw IoError("read_snapshot: unsupported version");
  const std::uint32_t n = io::get_u32(is);
  Snapshot out;
  for (std::uint32_t k = 0; k < n; ++k) {
    std::string name(io::get_u32(is), '\0');
    if (!is.read(name.data(), static_cast<std::streamsize>(name.size()))) throw IoError("read_snapshot: truncated name");
    nd::Shape shape(io::get_u32(is));
    std::size_t count = 1;
    for (auto& d : shape) {
      d = io::get_u64(is);
      count *= d;
    }
    std::vector<double> data(count);
    for (double& v : data) v = io::get_f64(is);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

inline Snapshot snapshot_of(const ClassifierNet& net) {
  Snapshot s;
  for (std::size_t i = 0; i < net.params().size(); ++i) s.emplace_back(net.names()[i], net.params()[i]);
  for (std::size_t l = 0; l < net.bn().size(); ++l) {
    const std::string p = "hidden" + std::to_string(l) + ".bn.population_";
    s.emplace_back(p + "mean", net.bn()[l].population_mean);
    s.emplace_back(p + "var", net.bn()[l].population_var);
  }
  return s;
}

/// Adaptor parameters under the names the trainer's optimiser uses.
inline Snapshot snapshot_of(const DualCbaState& cba) {
  Snapshot s;
  auto add = [&](const Mlp& m, const std::string& p) {
    s.emplace_back(p + ".w1", m.w1);
    s.emplace_back(p + ".b1", m.b1);
    s.emplace_back(p + ".w2", m.w2);
    s.emplace_back(p + ".b2", m.b2);
  };
  for (std::size_t i = 0; i < cba.omega.size(); ++i) add(cba.omega[i].mlp, "omega" + std::to_string(i));
  add(cba.nu, "nu");
  return s;
}

/// Overwrite the net's parameters and statistics from `snap`. Every entry
/// must exist in the net with the same shape; missing net entries are an error.
inline void restore(ClassifierNet& net, const Snapshot& snap) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, t] : snap) by_name[name] = &t;
  auto take = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw IoError("restore: snapshot lacks '" + name + "'");
    if (!it->second->same_shape(dst)) throw DimensionError("restore: shape of '" + name + "' differs");
    dst = *it->second;
    by_name.erase(it);
  };
  for (std::size_t i = 0; i < net.params().size(); ++i) take(net.names()[i], net.params()[i]);
  for (std::size_t l = 0; l < net.bn().size(); ++l) {
    const std::string p = "hidden" + std::to_string(l) + ".bn.population_";
    take(p + "mean", net.bn()[l].population_mean);
    take(p + "var", net.bn()[l].population_var);
    net.bn()[l].initialized = true;
  }
  if (!by_name.empty()) throw IoError("restore: unknown entry '" + by_name.begin()->first + "'");
}

inline void save_snapshot(const std::string& path, const Snapshot& snap) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_snapshot(os, snap);
}

inline Snapshot load_snapshot(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_snapshot(is);
}

}  // namespace dcba

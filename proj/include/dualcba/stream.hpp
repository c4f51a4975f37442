#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "dualcba/errors.hpp"
#include "dualcba/rng.hpp"
#include "dualcba/tensor.hpp"

namespace dcba {

using nd::Tensor;

/// Rows of features with one class label each.
struct Samples {
  Tensor x = Tensor::matrix(0, 0);
  std::vector<std::size_t> y;

  std::size_t size() const noexcept { return y.size(); }

  Samples subset(std::span<const std::size_t> idx) const {
    Samples s;
    s.x = nd::kernel::select_rows(x, idx);
    s.y.reserve(idx.size());
    for (auto i : idx) s.y.push_back(y[i]);
    return s;
  }

  void append(const Samples& o) {
    x = x.size() == 0 ? o.x : nd::kernel::concat_rows(x, o.x);
    y.insert(y.end(), o.y.begin(), o.y.end());
  }
};

struct Task {
  std::vector<std::size_t> classes;
  Samples train;
  Samples test;
};

struct TaskStream {
  std::size_t dim = 0;
  std::vector<Task> tasks;

  std::size_t num_classes() const {
    std::size_t m = 0;
    for (const auto& t : tasks) {
      for (auto c : t.classes) m = std::max(m, c + 1);
      for (auto c : t.train.y) m = std::max(m, c + 1);
    }
    return m;
  }

  std::size_t total_train() const {
    std::size_t n = 0;
    for (const auto& t : tasks) n += t.train.size();
    return n;
  }

  friend bool operator==(const TaskStream& a, const TaskStream& b) {
    if (a.dim != b.dim || a.tasks.size() != b.tasks.size()) return false;
    for (std::size_t i = 0; i < a.tasks.size(); ++i) {
      const auto &p = a.tasks[i], &q = b.tasks[i];
      if (p.classes != q.classes || p.train.y != q.train.y || p.test.y != q.test.y || !(p.train.x == q.train.x) ||
          !(p.test.x == q.test.x))
        return false;
    }
    return true;
  }
};

template <class T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t num_tasks = 5;
  std::size_t classes_per_task = 2;
  std::size_t dim = 8;
  std::size_t samples_per_class = 250;
  double separation = 3.0;
};

/// Gaussian class clusters with unit isotropic noise; class means lie on a
/// sphere of radius `separation`. Each class is split 80/20 into train/test
/// and task t owns classes [t*classes_per_task, (t+1)*classes_per_task).
inline TaskStream make_synthetic_stream(const SyntheticSpec& spec) {
  if (spec.separation < 0 || !std::isfinite(spec.separation)) throw ConfigError("separation must be finite and >= 0");
  if (spec.num_tasks == 0 || spec.classes_per_task == 0 || spec.dim == 0 || spec.samples_per_class < 2) {
    throw ConfigError("synthetic stream: tasks, classes, dim must be positive and samples_per_class >= 2");
  }
  Rng rng = make_rng(spec.seed, RngStream::data);
  const std::size_t n_classes = spec.num_tasks * spec.classes_per_task;
  std::vector<std::vector<double>> means(n_classes, std::vector<double>(spec.dim));
  for (auto& m : means) {
    double norm = 0.0;
    for (double& v : m) {
      v = normal01(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : m) v = norm > 0 ? spec.separation * v / norm : 0.0;
  }

  TaskStream s;
  s.dim = spec.dim;
  const std::size_t n_train = spec.samples_per_class * 4 / 5;
  for (std::size_t t = 0; t < spec.num_tasks; ++t) {
    Task task;
    std::vector<double> train_x, test_x;
    for (std::size_t k = 0; k < spec.classes_per_task; ++k) {
      const std::size_t c = t * spec.classes_per_task + k;
      task.classes.push_back(c);
      for (std::size_t i = 0; i < spec.samples_per_class; ++i) {
        auto& dst = i < n_train ? train_x : test_x;
        for (std::size_t d = 0; d < spec.dim; ++d) dst.push_back(means[c][d] + normal01(rng));
        (i < n_train ? task.train.y : task.test.y).push_back(c);
      }
    }
    Samples train{Tensor({task.train.y.size(), spec.dim}, std::move(train_x)), task.train.y};
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_in_place(order, rng);
    task.train = train.subset(order);
    task.test.x = Tensor({task.test.y.size(), spec.dim}, std::move(test_x));
    s.tasks.push_back(std::move(task));
  }
  return s;
}

/// Blurry-K: from every task, floor(K/100 * N_t) of its original training
/// samples move to uniformly chosen other tasks. Test sets and class sets are
/// untouched; the total training count is conserved.
inline TaskStream make_blurry(const TaskStream& in, double k_percent, std::uint64_t seed) {
  if (!(k_percent >= 0.0 && k_percent < 100.0)) throw ConfigError("blurry: K must lie in [0, 100)");
  if (in.tasks.size() < 2 || k_percent == 0.0) return in;
  Rng rng = make_rng(seed, RngStream::blurry);
  const std::size_t T = in.tasks.size();
  std::vector<std::vector<std::size_t>> keep(T), moved(T);
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> incoming(T);  // (source task, row)
  for (std::size_t t = 0; t < T; ++t) {
    const std::size_t n = in.tasks[t].train.size();
    const auto m = static_cast<std::size_t>(std::floor(k_percent / 100.0 * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle_in_place(idx, rng);
    std::vector<char> leaving(n, 0);
    for (std::size_t i = 0; i < m; ++i) {
      leaving[idx[i]] = 1;
      std::size_t dst = uniform_index(rng, T - 1);
      if (dst >= t) ++dst;
      incoming[dst].push_back({t, idx[i]});
    }
    for (std::size_t i = 0; i < n; ++i)
      if (!leaving[i]) keep[t].push_back(i);
  }
  TaskStream out;
  out.dim = in.dim;
  for (std::size_t t = 0; t < T; ++t) {
    Task task;
    task.classes = in.tasks[t].classes;
    task.test = in.tasks[t].test;
    task.train = in.tasks[t].train.subset(keep[t]);
    for (const auto& [src, row] : incoming[t]) {
      std::size_t r = row;
      task.train.append(in.tasks[src].train.subset(std::span<const std::size_t>(&r, 1)));
    }
    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_in_place(order, rng);
    task.train = task.train.subset(order);
    out.tasks.push_back(std::move(task));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stream fixture file. Little-endian throughout:
//   "DCBASTRM" | u32 version=1 | u32 num_tasks | u32 dim
//   per task: u32 num_classes | i32 classes[] | u32 n_train | u32 n_test |
//             f64 train_x[n_train*dim] | i32 train_y[n_train] |
//             f64 test_x[n_test*dim]  | i32 test_y[n_test]

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::ostream& os, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) os.put(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_uint(std::istream& is, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    const int c = is.get();
    if (c == EOF) throw IoError("unexpected end of file");
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}
inline std::uint32_t get_u32(std::istream& is) { return static_cast<std::uint32_t>(get_uint(is, 4)); }
inline std::uint64_t get_u64(std::istream& is) { return get_uint(is, 8); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace io

inline void write_stream(std::ostream& os, const TaskStream& s) {
  os.write("DCBASTRM", 8);
  io::put_u32(os, 1);
  io::put_u32(os, static_cast<std::uint32_t>(s.tasks.size()));
  io::put_u32(os, static_cast<std::uint32_t>(s.dim));
  auto put_samples = [&](const Samples& smp) {
    for (double v : smp.x.data()) io::put_f64(os, v);
    for (auto y : smp.y) io::put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(y)));
  };
  for (const auto& t : s.tasks) {
    io::put_u32(os, static_cast<std::uint32_t>(t.classes.size()));
    for (auto c : t.classes) io::put_u32(os, static_cast<std::uint32_t>(c));
    io::put_u32(os, static_cast<std::uint32_t>(t.train.size()));
    io::put_u32(os, static_cast<std::uint32_t>(t.test.size()));
    put_samples(t.train);
    put_samples(t.test);
  }
  if (!os) throw IoError("write_stream: write failed");
}

inline TaskStream read_stream(std::istream& is) {
  char magic[8];
  if (!is.read(magic, 8) || std::string(magic, 8) != "DCBASTRM") throw IoError("read_stream: bad magic");
  if (io::get_u32(is) != 1) throw IoError("read_stream: unsupported version");
  TaskStream s;
  const std::uint32_t T = io::get_u32(is);
  s.dim = io::get_u32(is);
  auto get_samples = [&](std::size_t n) {
    Samples smp;
    std::vector<double> x(n * s.dim);
    for (double& v : x) v = io::get_f64(is);
    smp.x = Tensor({n, s.dim}, std::move(x));
    for (std::size_t i = 0; i < n; ++i) {
      const auto y = static_cast<std::int32_t>(io::get_u32(is));
      if (y < 0) throw IoError("read_stream: negative label");
      smp.y.push_back(static_cast<std::size_t>(y));
    }
    return smp;
  };
  for (std::uint32_t t = 0; t < T; ++t) {
    Task task;
    const std::uint32_t nc = io::get_u32(is);
    for (std::uint32_t c = 0; c < nc; ++c) task.classes.push_back(io::get_u32(is));
    const std::uint32_t n_train = io::get_u32(is), n_test = io::get_u32(is);
    task.train = get_samples(n_train);
    task.test = get_samples(n_test);
    s.tasks.push_back(std::move(task));
  }
  return s;
}

inline void save_stream(const std::string& path, const TaskStream& s) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  write_stream(os, s);
}

inline TaskStream load_stream(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path);
  return read_stream(is);
}

// ---------------------------------------------------------------------------
// Memory buffer

struct BufferEntry {
  std::vector<double> x;
  std::size_t y = 0;
  std::vector<double> logits;  // empty unless the baseline replays logits
};

/// Rows drawn from the buffer.
struct Batch {
  Samples data;
  Tensor logits = Tensor::matrix(0, 0);  // rows parallel to data when stored
  std::vector<std::size_t> slots;

  bool empty() const noexcept { return data.size() == 0; }
};

/// Fixed-capacity reservoir.
class MemoryBuffer {
 public:
  explicit MemoryBuffer(std::size_t capacity = 0) : capacity_(capacity) {}

  std::size_t capacity() const noexcept { return capacity_; }
  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }
  std::uint64_t seen() const noexcept { return seen_; }
  const std::vector<BufferEntry>& entries() const noexcept { return entries_; }

  /// Item i (1-indexed over everything offered so far) is appended while the
  /// buffer has room, otherwise replaces a uniform slot with probability M/i.
  void offer(BufferEntry e, Rng& rng) {
    ++seen_;
    if (capacity_ == 0) return;
    if (entries_.size() < capacity_) {
      entries_.push_back(std::move(e));
      return;
    }
    const std::uint64_t j = uniform_index(rng, seen_);
    if (j < capacity_) entries_[j] = std::move(e);
  }

  /// Offer every row of `batch`; `logits` (same row count) is stored alongside
  /// when non-empty.
  void reservoir_update(const Samples& batch, const Tensor& logits, Rng& rng) {
    const bool with_logits = logits.size() > 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      BufferEntry e;
      e.x.assign(batch.x.data().begin() + static_cast<std::ptrdiff_t>(i * batch.x.cols()),
                 batch.x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * batch.x.cols()));
      e.y = batch.y[i];
      if (with_logits) {
        e.logits.assign(logits.data().begin() + static_cast<std::ptrdiff_t>(i * logits.cols()),
                        logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * logits.cols()));
      }
      offer(std::move(e), rng);
    }
  }

  /// b entries uniformly without replacement, with replacement when b exceeds
  /// the buffer size. Empty buffer gives an empty batch.
  Batch sample(std::size_t b, Rng& rng) const {
    Batch out;
    if (entries_.empty() || b == 0) return out;
    if (b <= entries_.size()) {
      std::vector<std::size_t> idx(entries_.size());
      std::iota(idx.begin(), idx.end(), 0);
      for (std::size_t i = 0; i < b; ++i) std::swap(idx[i], idx[i + uniform_index(rng, idx.size() - i)]);
      idx.resize(b);
      out.slots = std::move(idx);
    } else {
      for (std::size_t i = 0; i < b; ++i) out.slots.push_back(uniform_index(rng, entries_.size()));
    }
    return gather(out.slots);
  }

  Batch gather(const std::vector<std::size_t>& slots) const {
    Batch out;
    out.slots = slots;
    if (slots.empty()) return out;
    const std::size_t d = entries_[slots[0]].x.size();
    const std::size_t lw = entries_[slots[0]].logits.size();
    std::vector<double> x, lg;
    x.reserve(slots.size() * d);
    for (auto s : slots) {
      const auto& e = entries_[s];
      x.insert(x.end(), e.x.begin(), e.x.end());
      lg.insert(lg.end(), e.logits.begin(), e.logits.end());
      out.data.y.push_back(e.y);
    }
    out.data.x = Tensor({slots.size(), d}, std::move(x));
    if (lw > 0) out.logits = Tensor({slots.size(), lw}, std::move(lg));
    return out;
  }

 private:
  std::size_t capacity_;
  std::vector<BufferEntry> entries_;
  std::uint64_t seen_ = 0;
};

}  // namespace dcba

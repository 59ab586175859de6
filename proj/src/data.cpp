#include "safe/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace safe {

namespace {

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

// 6x6 binary foreground templates, one per class; distinct shapes so a small
// CNN has structure to learn, with class-graded intensity so even a pooled
// linear probe can separate low class indices.
constexpr int kTemplateCount = 16;
constexpr int kPatch = 6;

std::array<uint8_t, kPatch * kPatch> patch_template(int cls) {
  std::array<uint8_t, kPatch * kPatch> t{};
  auto at = [&t](int y, int x) -> uint8_t& { return t[static_cast<size_t>(y) * kPatch + x]; };
  switch (cls % kTemplateCount) {
    case 0:  // solid block
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x) at(y, x) = 1;
      break;
    case 1:  // horizontal bars
      for (int y = 0; y < kPatch; y += 2)
        for (int x = 0; x < kPatch; ++x) at(y, x) = 1;
      break;
    case 2:  // vertical bars
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; x += 2) at(y, x) = 1;
      break;
    case 3:  // diagonal
      for (int y = 0; y < kPatch; ++y) {
        at(y, y) = 1;
        if (y + 1 < kPatch) at(y, y + 1) = 1;
      }
      break;
    case 4:  // anti-diagonal
      for (int y = 0; y < kPatch; ++y) {
        at(y, kPatch - 1 - y) = 1;
        if (kPatch - 2 - y >= 0) at(y, kPatch - 2 - y) = 1;
      }
      break;
    case 5:  // hollow square
      for (int i = 0; i < kPatch; ++i) {
        at(0, i) = at(kPatch - 1, i) = at(i, 0) = at(i, kPatch - 1) = 1;
      }
      break;
    case 6:  // cross
      for (int i = 0; i < kPatch; ++i) {
        at(kPatch / 2, i) = at(kPatch / 2 - 1, i) = 1;
        at(i, kPatch / 2) = at(i, kPatch / 2 - 1) = 1;
      }
      break;
    case 7:  // corner wedge
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x <= y; ++x) at(y, x) = 1;
      break;
    case 8:  // checkerboard
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x) at(y, x) = static_cast<uint8_t>((x + y) % 2);
      break;
    case 9:  // top half
      for (int y = 0; y < kPatch / 2; ++y)
        for (int x = 0; x < kPatch; ++x) at(y, x) = 1;
      break;
    case 10:  // left half
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch / 2; ++x) at(y, x) = 1;
      break;
    case 11:  // T shape
      for (int x = 0; x < kPatch; ++x) at(0, x) = at(1, x) = 1;
      for (int y = 0; y < kPatch; ++y) at(y, kPatch / 2) = at(y, kPatch / 2 - 1) = 1;
      break;
    case 12:  // L shape
      for (int y = 0; y < kPatch; ++y) at(y, 0) = at(y, 1) = 1;
      for (int x = 0; x < kPatch; ++x) at(kPatch - 1, x) = at(kPatch - 2, x) = 1;
      break;
    case 13:  // dot grid
      for (int y = 0; y < kPatch; y += 3)
        for (int x = 0; x < kPatch; x += 3) {
          at(y, x) = 1;
          if (x + 1 < kPatch) at(y, x + 1) = 1;
          if (y + 1 < kPatch) at(y + 1, x) = 1;
        }
      break;
    case 14:  // V shape
      for (int y = 0; y < kPatch; ++y) {
        int off = y / 2;
        at(y, off) = 1;
        at(y, kPatch - 1 - off) = 1;
      }
      break;
    default:  // 15: double diagonal band
      for (int y = 0; y < kPatch; ++y)
        for (int x = 0; x < kPatch; ++x)
          if (std::abs(x - y) <= 1 || std::abs(x + y - (kPatch - 1)) <= 1) at(y, x) = 1;
      break;
  }
  return t;
}

}  // namespace

std::vector<int> Dataset::histogram() const {
  std::vector<int> h(static_cast<size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw std::invalid_argument("dataset: label out of range");
    ++h[static_cast<size_t>(y)];
  }
  return h;
}

Dataset Dataset::subset(const std::vector<int>& indices) const {
  int c = images.dim(1), h = images.dim(2), w = images.dim(3);
  size_t stride = static_cast<size_t>(c) * h * w;
  std::vector<double> pix;
  pix.reserve(indices.size() * stride);
  Dataset out;
  out.num_classes = num_classes;
  for (int i : indices) {
    if (i < 0 || i >= size()) throw std::invalid_argument("subset: index out of range");
    const double* src = &images.data()[static_cast<size_t>(i) * stride];
    pix.insert(pix.end(), src, src + stride);
    out.labels.push_back(labels[static_cast<size_t>(i)]);
  }
  out.images = Tensor::from_data({static_cast<int>(indices.size()), c, h, w}, std::move(pix));
  return out;
}

Dataset generate_synthetic(const DataConfig& cfg) {
  if (cfg.classes < 2) throw std::invalid_argument("generate_synthetic: need >= 2 classes");
  if (cfg.classes > kTemplateCount) {
    throw std::invalid_argument("generate_synthetic: more classes than templates");
  }
  int hw = cfg.image_size;
  if (hw < kPatch + 2) throw std::invalid_argument("generate_synthetic: image too small");
  int n = cfg.classes * cfg.samples_per_class;
  std::mt19937_64 rng(splitmix64(cfg.seed ^ 0x5AFEDA7AULL));
  std::normal_distribution<double> noise(0.0, 0.3);
  std::uniform_int_distribution<int> pos(0, hw - kPatch);

  std::vector<double> pix(static_cast<size_t>(n) * hw * hw);
  std::vector<int> labels(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    int cls = i % cfg.classes;
    labels[static_cast<size_t>(i)] = cls;
    double* img = &pix[static_cast<size_t>(i) * hw * hw];
    for (int p = 0; p < hw * hw; ++p) img[p] = noise(rng);
    auto tpl = patch_template(cls);
    double intensity = 1.0 + 0.5 * cls;
    int oy = pos(rng), ox = pos(rng);
    for (int y = 0; y < kPatch; ++y)
      for (int x = 0; x < kPatch; ++x)
        if (tpl[static_cast<size_t>(y) * kPatch + x]) {
          img[(oy + y) * hw + ox + x] = intensity;
        }
  }
  Dataset ds;
  ds.images = Tensor::from_data({n, 1, hw, hw}, std::move(pix));
  ds.labels = std::move(labels);
  ds.num_classes = cfg.classes;
  return ds;
}

Dataset induce_imbalance(const Dataset& ds, double ratio, uint64_t seed) {
  if (ratio < 1.0) throw std::invalid_argument("induce_imbalance: ratio must be >= 1");
  if (ratio == 1.0) return ds;
  int j = ds.num_classes;
  std::vector<int> hist = ds.histogram();
  int n_max = *std::max_element(hist.begin(), hist.end());

  std::vector<std::vector<int>> per_class(static_cast<size_t>(j));
  for (int i = 0; i < ds.size(); ++i) per_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

  std::mt19937_64 rng(splitmix64(seed ^ 0x1B7A7A5CULL));
  std::vector<int> keep;
  for (int c = 0; c < j; ++c) {
    double r = std::pow(ratio, -static_cast<double>(c) / (j - 1));
    int target = static_cast<int>(std::ceil(n_max * r));
    target = std::min(target, static_cast<int>(per_class[static_cast<size_t>(c)].size()));
    if (target < 1) throw std::invalid_argument("induce_imbalance: class emptied");
    auto& idx = per_class[static_cast<size_t>(c)];
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + target);
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

std::vector<Shard> dirichlet_partition(const Dataset& ds, int clients, double alpha,
                                       uint64_t seed) {
  if (clients < 1) throw std::invalid_argument("dirichlet_partition: clients must be >= 1");
  if (alpha <= 0.0) throw std::invalid_argument("dirichlet_partition: alpha must be > 0");
  int j = ds.num_classes;

  std::vector<std::vector<int>> per_class(static_cast<size_t>(j));
  for (int i = 0; i < ds.size(); ++i) per_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

  for (int attempt = 0; attempt < 10; ++attempt) {
    std::mt19937_64 rng(splitmix64(seed ^ (0xD17ACE77ULL + static_cast<uint64_t>(attempt))));
    std::gamma_distribution<double> gamma(alpha, 1.0);
    std::vector<std::vector<int>> assigned(static_cast<size_t>(clients));

    for (int c = 0; c < j; ++c) {
      auto idx = per_class[static_cast<size_t>(c)];
      std::shuffle(idx.begin(), idx.end(), rng);
      int total = static_cast<int>(idx.size());

      std::vector<double> props(static_cast<size_t>(clients));
      double s = 0.0;
      for (double& p : props) {
        p = gamma(rng);
        s += p;
      }
      for (double& p : props) p = s > 0.0 ? p / s : 1.0 / clients;

      // largest-remainder rounding so counts sum exactly to the class total
      std::vector<int> counts(static_cast<size_t>(clients));
      std::vector<std::pair<double, int>> rema;
      int used = 0;
      for (int k = 0; k < clients; ++k) {
        double exact = props[static_cast<size_t>(k)] * total;
        counts[static_cast<size_t>(k)] = static_cast<int>(std::floor(exact));
        used += counts[static_cast<size_t>(k)];
        rema.push_back({exact - std::floor(exact), k});
      }
      std::sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
      });
      for (int r = 0; r < total - used; ++r) ++counts[static_cast<size_t>(rema[static_cast<size_t>(r)].second)];

      int off = 0;
      for (int k = 0; k < clients; ++k) {
        assigned[static_cast<size_t>(k)].insert(assigned[static_cast<size_t>(k)].end(),
                                                idx.begin() + off,
                                                idx.begin() + off + counts[static_cast<size_t>(k)]);
        off += counts[static_cast<size_t>(k)];
      }
    }

    bool any_empty = false;
    for (const auto& a : assigned) any_empty = any_empty || a.empty();
    if (any_empty) continue;

    std::vector<Shard> shards;
    for (int k = 0; k < clients; ++k) {
      auto idx = assigned[static_cast<size_t>(k)];
      std::sort(idx.begin(), idx.end());
      Shard sh;
      sh.client_id = k;
      sh.dataset = ds.subset(idx);
      sh.dis = sh.dataset.histogram();
      shards.push_back(std::move(sh));
    }
    return shards;
  }
  throw std::runtime_error("dirichlet_partition: persistent empty shard after 10 attempts");
}

std::pair<SesSet, Dataset> reserve_ses(const Dataset& ds, int m_per_class, uint64_t seed) {
  int j = ds.num_classes;
  std::vector<std::vector<int>> per_class(static_cast<size_t>(j));
  for (int i = 0; i < ds.size(); ++i) per_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
  std::mt19937_64 rng(splitmix64(seed ^ 0x5E5E5E5EULL));

  std::vector<int> ses_idx, rest_idx;
  for (int c = 0; c < j; ++c) {
    auto& idx = per_class[static_cast<size_t>(c)];
    if (static_cast<int>(idx.size()) <= m_per_class) {
      throw std::invalid_argument("reserve_ses: class has too few samples");
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    ses_idx.insert(ses_idx.end(), idx.begin(), idx.begin() + m_per_class);
    rest_idx.insert(rest_idx.end(), idx.begin() + m_per_class, idx.end());
  }
  std::sort(ses_idx.begin(), ses_idx.end());
  std::sort(rest_idx.begin(), rest_idx.end());
  SesSet ses;
  ses.data = ds.subset(ses_idx);
  ses.per_class = m_per_class;
  return {std::move(ses), ds.subset(rest_idx)};
}

// ---------------------------------------------------------------------------
// binary dump/load
// ---------------------------------------------------------------------------

namespace {
constexpr char kMagic[7] = {'S', 'A', 'F', 'E', 'D', 'S', '1'};

void write_i32(std::ostream& os, int32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xFF),
                        static_cast<unsigned char>((v >> 8) & 0xFF),
                        static_cast<unsigned char>((v >> 16) & 0xFF),
                        static_cast<unsigned char>((v >> 24) & 0xFF)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

int32_t read_i32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<int32_t>(static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                              (static_cast<uint32_t>(b[2]) << 16) |
                              (static_cast<uint32_t>(b[3]) << 24));
}

void write_f32(std::ostream& os, float v) {
  uint32_t u;
  std::memcpy(&u, &v, 4);
  write_i32(os, static_cast<int32_t>(u));
}

float read_f32(std::istream& is) {
  uint32_t u = static_cast<uint32_t>(read_i32(is));
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}
}  // namespace

void dump_dataset(const Dataset& ds, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("dump_dataset: cannot open " + path);
  os.write(kMagic, sizeof(kMagic));
  write_i32(os, ds.num_classes);
  write_i32(os, ds.size());
  write_i32(os, ds.images.dim(1));
  write_i32(os, ds.images.dim(2));
  write_i32(os, ds.images.dim(3));
  for (int y : ds.labels) write_i32(os, y);
  for (double v : ds.images.data()) write_f32(os, static_cast<float>(v));
  if (!os) throw std::runtime_error("dump_dataset: write failed");
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(kMagic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("load_dataset: bad magic");
  }
  int32_t j = read_i32(is), n = read_i32(is), c = read_i32(is), h = read_i32(is),
          w = read_i32(is);
  if (!is || j < 2 || n < 0 || c < 1 || h < 1 || w < 1) {
    throw std::runtime_error("load_dataset: bad header");
  }
  Dataset ds;
  ds.num_classes = j;
  ds.labels.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) ds.labels[static_cast<size_t>(i)] = read_i32(is);
  std::vector<double> pix(static_cast<size_t>(n) * c * h * w);
  for (double& v : pix) v = static_cast<double>(read_f32(is));
  if (!is) throw std::runtime_error("load_dataset: truncated file");
  ds.images = Tensor::from_data({n, c, h, w}, std::move(pix));
  return ds;
}

}  // namespace safe

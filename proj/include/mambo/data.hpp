#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mambo/nn.hpp"
#include "mambo/raster.hpp"

namespace mambo {

struct SampleRecord {
  std::string stem;
  Raster image;  // grayscale in [0,1]
  Raster mask;   // {0,1}
  int confounder = -1;
};

using Dataset = std::vector<SampleRecord>;

// ---------------------------------------------------------------------------
// PGM (P5, 8-bit)

class PgmError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_pgm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw PgmError("cannot open " + path.string() + " for writing");
  os << "P5\n" << r.width << ' ' << r.height << "\n255\n";
  std::vector<char> bytes(r.size());
  for (std::size_t i = 0; i < r.size(); ++i) bytes[i] = static_cast<char>(to_byte(r.data[i]));
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw PgmError("failed writing " + path.string());
}

// Pixel values are scaled to [0,1] by maxval.
inline Raster read_pgm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw PgmError(path.string() + ": cannot open");
  auto token = [&]() {
    std::string t;
    while (is) {
      int c = is.peek();
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
    is >> t;
    return t;
  };
  if (token() != "P5") throw PgmError(path.string() + ": corrupt header (expected P5 magic)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw PgmError(path.string() + ": corrupt header (bad dimensions)");
  }
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw PgmError(path.string() + ": corrupt header (unsupported size or maxval)");
  is.get();
  std::vector<unsigned char> bytes(static_cast<std::size_t>(w) * h);
  is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (is.gcount() != static_cast<std::streamsize>(bytes.size())) throw PgmError(path.string() + ": truncated pixel data");
  Raster r(h, w);
  for (std::size_t i = 0; i < bytes.size(); ++i) r.data[i] = bytes[i] / static_cast<double>(maxval);
  return r;
}

// ---------------------------------------------------------------------------
// Synthetic confounded lesions

namespace detail {

inline Raster gaussian_blur(const Raster& src, double sigma) {
  if (sigma <= 0) return src;
  const int radius = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += (k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v /= total;
  auto clamp_idx = [](int i, int n) { return std::clamp(i, 0, n - 1); };
  Raster tmp(src.height, src.width), out(src.height, src.width);
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * src.at(y, clamp_idx(x + i, src.width));
      tmp.at(y, x) = acc;
    }
  for (int y = 0; y < src.height; ++y)
    for (int x = 0; x < src.width; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp.at(clamp_idx(y + i, src.height), x);
      out.at(y, x) = acc;
    }
  return out;
}

// 3x3 binary erosion (shrink) or dilation (grow), applied |steps| times.
inline Raster morph(const Raster& mask, int steps) {
  Raster cur = mask;
  const bool grow = steps > 0;
  for (int s = 0; s < std::abs(steps); ++s) {
    Raster next(cur.height, cur.width);
    for (int y = 0; y < cur.height; ++y)
      for (int x = 0; x < cur.width; ++x) {
        bool any = false, all = true;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = y + dy, xx = x + dx;
            const bool v = yy >= 0 && yy < cur.height && xx >= 0 && xx < cur.width && cur.at(yy, xx) > 0.5;
            any = any || v;
            all = all && v;
          }
        next.at(y, x) = (grow ? any : all) ? 1.0 : 0.0;
      }
    cur = std::move(next);
  }
  return cur;
}

}  // namespace detail

inline constexpr double kLesionIntensity = 0.7;
inline constexpr double kBackgroundIntensity = 0.2;
inline constexpr double kPixelNoise = 0.05;
inline constexpr double kStreakIntensity = 0.3;

// Random ellipse lesions with a hidden confounder c in {0,1,2} that both
// blurs the lesion edge and adds c streaks across it (image side), and
// shifts the annotated boundary by c-1 pixels (mask side).
inline Dataset generate_synthetic(int n, int size, std::uint64_t seed) {
  if (size <= 0 || size % 8) throw std::invalid_argument("image size must be a positive multiple of 8");
  if (n < 0) throw std::invalid_argument("sample count must be non-negative");
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, kPixelNoise);
  std::uniform_int_distribution<int> confounder(0, 2);
  Dataset out;
  for (int i = 0; i < n; ++i) {
    const double cy = size * (0.3 + 0.4 * unit(rng));
    const double cx = size * (0.3 + 0.4 * unit(rng));
    const double ra = size * (0.12 + 0.13 * unit(rng));
    const double rb = size * (0.12 + 0.13 * unit(rng));
    const double theta = M_PI * unit(rng);
    const int c = confounder(rng);

    Raster lesion(size, size);
    const double ct = std::cos(theta), st = std::sin(theta);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
        const double u = (dx * ct + dy * st) / ra, v = (-dx * st + dy * ct) / rb;
        lesion.at(y, x) = u * u + v * v <= 1.0 ? 1.0 : 0.0;
      }

    Raster image(size, size);
    for (std::size_t p = 0; p < image.size(); ++p)
      image.data[p] = lesion.data[p] > 0.5 ? kLesionIntensity : kBackgroundIntensity;
    image = detail::gaussian_blur(image, 0.8 * c);

    for (int s = 0; s < c; ++s) {
      // A segment through a random point on the lesion outline.
      const double phi = 2 * M_PI * unit(rng);
      const double py = cy + ra * std::cos(phi) * st + rb * std::sin(phi) * ct;
      const double px = cx + ra * std::cos(phi) * ct - rb * std::sin(phi) * st;
      const double dir = M_PI * unit(rng);
      const double half = size / 6.0;
      for (double t = -half; t <= half; t += 0.5) {
        const int yy = static_cast<int>(std::floor(py + t * std::sin(dir)));
        const int xx = static_cast<int>(std::floor(px + t * std::cos(dir)));
        if (yy >= 0 && yy < size && xx >= 0 && xx < size) image.at(yy, xx) += kStreakIntensity;
      }
    }
    for (auto& v : image.data) v = std::clamp(v + noise(rng), 0.0, 1.0);

    SampleRecord rec;
    std::ostringstream stem;
    stem << "synth_" << std::setw(5) << std::setfill('0') << i;
    rec.stem = stem.str();
    rec.image = std::move(image);
    rec.mask = detail::morph(lesion, c - 1);
    rec.confounder = c;
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Directory ingestion

struct IngestResult {
  Dataset samples;
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
};

inline void export_dataset(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& s : data) {
    write_pgm(dir / (s.stem + ".img.pgm"), s.image);
    write_pgm(dir / (s.stem + ".mask.pgm"), s.mask);
  }
}

// Pairs <stem>.img.pgm with <stem>.mask.pgm; masks binarized at 128.
inline IngestResult ingest(const std::filesystem::path& dir) {
  IngestResult r;
  if (!std::filesystem::is_directory(dir)) {
    r.errors.push_back(dir.string() + ": not a directory");
    return r;
  }
  std::map<std::string, std::pair<std::filesystem::path, std::filesystem::path>> pairs;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    auto ends = [&](const std::string& suf) {
      return name.size() > suf.size() && name.compare(name.size() - suf.size(), suf.size(), suf) == 0;
    };
    if (ends(".img.pgm")) pairs[name.substr(0, name.size() - 8)].first = entry.path();
    else if (ends(".mask.pgm")) pairs[name.substr(0, name.size() - 9)].second = entry.path();
  }
  for (const auto& [stem, files] : pairs) {
    if (files.first.empty() || files.second.empty()) {
      r.errors.push_back(stem + ": missing " + (files.first.empty() ? "image" : "mask") + " file");
      continue;
    }
    try {
      SampleRecord s;
      s.stem = stem;
      s.image = read_pgm(files.first);
      s.mask = read_pgm(files.second);
      if (!s.image.same_shape(s.mask)) {
        r.errors.push_back(stem + ": image and mask sizes differ");
        continue;
      }
      for (auto& v : s.mask.data) v = std::lround(v * 255.0) >= 128 ? 1.0 : 0.0;
      r.samples.push_back(std::move(s));
    } catch (const PgmError& e) {
      r.errors.push_back(e.what());
    }
  }
  if (r.samples.empty() && r.errors.empty()) r.warnings.push_back(dir.string() + ": no image/mask pairs found");
  return r;
}

// ---------------------------------------------------------------------------
// Augmentation and splitting

namespace detail {

inline Raster flip_h(const Raster& r) {
  Raster o(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) o.at(y, x) = r.at(y, r.width - 1 - x);
  return o;
}

inline Raster flip_v(const Raster& r) {
  Raster o(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) o.at(y, x) = r.at(r.height - 1 - y, x);
  return o;
}

// Counter-clockwise quarter turn.
inline Raster rot90(const Raster& r) {
  Raster o(r.width, r.height);
  for (int y = 0; y < o.height; ++y)
    for (int x = 0; x < o.width; ++x) o.at(y, x) = r.at(x, r.width - 1 - y);
  return o;
}

// Resamples the window [y0, y0+ch) x [x0, x0+cw) back to the full size.
inline Raster crop_resize(const Raster& r, int y0, int x0, int ch, int cw, bool nearest) {
  Raster o(r.height, r.width);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      const double sy = y0 + (y + 0.5) * ch / r.height - 0.5;
      const double sx = x0 + (x + 0.5) * cw / r.width - 0.5;
      if (nearest) {
        const int iy = std::clamp(static_cast<int>(std::lround(sy)), 0, r.height - 1);
        const int ix = std::clamp(static_cast<int>(std::lround(sx)), 0, r.width - 1);
        o.at(y, x) = r.at(iy, ix);
        continue;
      }
      const int iy = static_cast<int>(std::floor(sy)), ix = static_cast<int>(std::floor(sx));
      const double fy = sy - iy, fx = sx - ix;
      auto px = [&](int yy, int xx) { return r.at(std::clamp(yy, 0, r.height - 1), std::clamp(xx, 0, r.width - 1)); };
      o.at(y, x) = (1 - fy) * ((1 - fx) * px(iy, ix) + fx * px(iy, ix + 1)) +
                   fy * ((1 - fx) * px(iy + 1, ix) + fx * px(iy + 1, ix + 1));
    }
  return o;
}

}  // namespace detail

inline constexpr double kMinCropScale = 0.8;

// Same random flip / quarter-turn / crop-and-resize applied to image and mask.
inline SampleRecord augment(const SampleRecord& s, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<int> turns(0, 3);
  std::uniform_real_distribution<double> scale(kMinCropScale, 1.0);
  SampleRecord o = s;
  if (coin(rng)) {
    o.image = detail::flip_h(o.image);
    o.mask = detail::flip_h(o.mask);
  }
  if (coin(rng)) {
    o.image = detail::flip_v(o.image);
    o.mask = detail::flip_v(o.mask);
  }
  int k = turns(rng);
  if (o.image.height != o.image.width) k &= 2;
  for (int i = 0; i < k; ++i) {
    o.image = detail::rot90(o.image);
    o.mask = detail::rot90(o.mask);
  }
  const double sc = scale(rng);
  const int ch = std::max(1, static_cast<int>(std::lround(sc * o.image.height)));
  const int cw = std::max(1, static_cast<int>(std::lround(sc * o.image.width)));
  std::uniform_int_distribution<int> oy(0, o.image.height - ch), ox(0, o.image.width - cw);
  const int y0 = oy(rng), x0 = ox(rng);
  o.image = detail::crop_resize(o.image, y0, x0, ch, cw, false);
  o.mask = detail::crop_resize(o.mask, y0, x0, ch, cw, true);
  return o;
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

// Seeded permutation; train gets round(fraction * n) indices, at least one
// on each side when n >= 2.
inline Split split_indices(std::size_t n, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split fraction must lie in (0,1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::size_t cut = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
  if (n >= 2) cut = std::clamp<std::size_t>(cut, 1, n - 1);
  Split s;
  s.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(std::min(cut, n)));
  s.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(std::min(cut, n)), idx.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline Dataset subset(const Dataset& d, const std::vector<std::size_t>& idx) {
  Dataset out;
  for (auto i : idx) out.push_back(d.at(i));
  return out;
}

}  // namespace mambo

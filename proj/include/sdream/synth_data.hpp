#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdream/error.hpp"
#include "sdream/model.hpp"
#include "sdream/rng.hpp"
#include "sdream/tensor.hpp"

namespace sdream {

/// 8-bit RGB image, planar CHW layout.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), pixels(3 * w * h, 0) {}

  std::uint8_t& at(std::size_t c, std::size_t y, std::size_t x) {
    return pixels[(c * height + y) * width + x];
  }
  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height + y) * width + x];
  }

  bool operator==(const Image&) const = default;
};

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::round(v * 255.0), 0.0, 255.0));
}

// ---------------------------------------------------------------------------
// PPM (P6, maxval 255)
// ---------------------------------------------------------------------------

inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  const std::size_t area = img.width * img.height;
  out.reserve(out.size() + 3 * area);
  for (std::size_t i = 0; i < area; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<char>(img.pixels[c * area + i]));
  }
  return out;
}

inline Image decode_ppm(std::string_view bytes, const std::string& source = "<memory>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> ParseError {
    return ParseError(source + ": " + what + " at byte offset " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      throw fail(std::string("expected ") + field);
    }
    std::size_t value = 0;
    while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
      value = value * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (value > 1u << 20) throw fail(std::string(field) + " too large");
      ++pos;
    }
    return value;
  };

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw fail("missing P6 magic");
  pos = 2;
  const std::size_t width = read_uint("width");
  const std::size_t height = read_uint("height");
  const std::size_t maxval = read_uint("maxval");
  if (maxval != 255) {
    throw ParseError(source + ": unsupported PPM format: maxval " + std::to_string(maxval) +
                     " (only 255 is supported) at byte offset " + std::to_string(pos));
  }
  if (width == 0 || height == 0) throw fail("zero image dimension");
  if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
    throw fail("expected single whitespace after maxval");
  }
  ++pos;
  const std::size_t area = width * height;
  if (bytes.size() - pos < 3 * area) throw fail("truncated pixel data");
  Image img(width, height);
  for (std::size_t i = 0; i < area; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      img.pixels[c * area + i] = static_cast<std::uint8_t>(bytes[pos + 3 * i + c]);
    }
  }
  return img;
}

inline void write_ppm(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  const std::string bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing: " + path.string());
}

inline Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_ppm(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Procedural shapes and textures
// ---------------------------------------------------------------------------

enum class ShapeKind { disk, square, triangle, cross, ring };
enum class TextureFamily { flat, stripes, checker, noise };

inline const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names{"disk", "square", "triangle", "cross", "ring"};
  return names;
}

inline const std::vector<std::string>& default_domain_names() {
  static const std::vector<std::string> names{"flat", "stripes", "checker", "noise"};
  return names;
}

inline TextureFamily texture_family(const std::string& name) {
  if (name == "flat") return TextureFamily::flat;
  if (name == "stripes") return TextureFamily::stripes;
  if (name == "checker") return TextureFamily::checker;
  if (name == "noise") return TextureFamily::noise;
  throw ConfigError("unknown domain texture family '" + name + "'");
}

using Rgb = std::array<double, 3>;

/// Class-signature fill colors of the flat domain (class i ↔ tint i).
inline Rgb class_tint(std::size_t cls) {
  static constexpr std::array<Rgb, 8> tints{{{0.92, 0.22, 0.18},
                                             {0.20, 0.85, 0.25},
                                             {0.25, 0.40, 0.98},
                                             {0.96, 0.88, 0.15},
                                             {0.88, 0.25, 0.90},
                                             {0.15, 0.88, 0.90},
                                             {0.98, 0.58, 0.12},
                                             {0.60, 0.60, 0.60}}};
  return tints[cls % tints.size()];
}

namespace detail {

/// Fraction of a pixel covered by shape `kind`, in shape-local units where
/// the shape's outer radius is 1.
inline bool shape_contains(ShapeKind kind, double u, double v) {
  switch (kind) {
    case ShapeKind::disk:
      return u * u + v * v <= 1.0;
    case ShapeKind::square:
      return std::abs(u) <= 0.82 && std::abs(v) <= 0.82;
    case ShapeKind::triangle: {
      constexpr double r = 1.08;
      return v <= 0.5 * r && std::numbers::sqrt3 * std::abs(u) - v <= r;
    }
    case ShapeKind::cross:
      return (std::abs(u) <= 0.32 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.32 && std::abs(u) <= 1.0);
    case ShapeKind::ring: {
      const double d2 = u * u + v * v;
      return d2 <= 1.0 && d2 >= 0.55 * 0.55;
    }
  }
  return false;
}

struct Pose {
  double cx, cy, radius;
};

inline std::vector<double> coverage_mask(ShapeKind kind, const Pose& pose, std::size_t size) {
  constexpr int kSuper = 4;
  std::vector<double> mask(size * size, 0.0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSuper;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSuper;
          hits += shape_contains(kind, (px - pose.cx) / pose.radius, (py - pose.cy) / pose.radius);
        }
      }
      mask[y * size + x] = static_cast<double>(hits) / (kSuper * kSuper);
    }
  }
  return mask;
}

/// A two-color texture: value(x, y) blends `a` and `b` by a pattern weight.
struct Texture {
  TextureFamily family = TextureFamily::flat;
  Rgb a{}, b{};
  double angle = 0.0, period = 4.0, phase_x = 0.0, phase_y = 0.0;
  std::size_t grid = 0;
  std::vector<double> lattice;

  double weight(double x, double y) const {
    switch (family) {
      case TextureFamily::flat:
        return 1.0;
      case TextureFamily::stripes: {
        const double t = (x * std::cos(angle) + y * std::sin(angle)) / period + phase_x;
        return std::clamp(0.5 + 1.5 * std::sin(2.0 * std::numbers::pi * t), 0.0, 1.0);
      }
      case TextureFamily::checker: {
        const auto ix = static_cast<long>(std::floor((x + phase_x) / period));
        const auto iy = static_cast<long>(std::floor((y + phase_y) / period));
        return ((ix + iy) % 2 == 0) ? 1.0 : 0.0;
      }
      case TextureFamily::noise: {
        // Bilinear value noise on a random lattice.
        const double gx = (x + phase_x) / period, gy = (y + phase_y) / period;
        const auto x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
        const double fx = gx - static_cast<double>(x0), fy = gy - static_cast<double>(y0);
        auto at = [&](std::size_t i, std::size_t j) { return lattice[(j % grid) * grid + i % grid]; };
        const double top = at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx;
        const double bottom = at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx;
        return std::clamp(1.5 * (top * (1 - fy) + bottom * fy) - 0.25, 0.0, 1.0);
      }
    }
    return 1.0;
  }

  Rgb color(double x, double y) const {
    const double w = weight(x, y);
    return {a[0] * w + b[0] * (1 - w), a[1] * w + b[1] * (1 - w), a[2] * w + b[2] * (1 - w)};
  }
};

inline Rgb random_color(Rng& rng, double lo, double hi) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

/// Texture of `family` with parameters drawn independently of any class.
/// Foreground textures use the bright color range, backgrounds the dark one.
inline Texture random_texture(TextureFamily family, bool foreground, Rng& rng) {
  Texture t;
  t.family = family;
  const double lo = foreground ? 0.40 : 0.0, hi = foreground ? 1.0 : 0.55;
  t.a = random_color(rng, lo, hi);
  t.b = random_color(rng, lo, hi);
  t.angle = rng.uniform(0.0, std::numbers::pi);
  t.phase_x = rng.uniform(0.0, 8.0);
  t.phase_y = rng.uniform(0.0, 8.0);
  switch (family) {
    case TextureFamily::flat:
      break;
    case TextureFamily::stripes:
      t.period = rng.uniform(3.0, 6.0);
      break;
    case TextureFamily::checker:
      t.period = rng.uniform(2.5, 5.0);
      break;
    case TextureFamily::noise:
      t.period = rng.uniform(2.0, 4.0);
      t.grid = 24;
      t.lattice.resize(t.grid * t.grid);
      for (double& v : t.lattice) v = rng.uniform();
      break;
  }
  return t;
}

inline Texture flat_texture(const Rgb& color) {
  Texture t;
  t.a = color;
  t.b = color;
  return t;
}

inline Pose random_pose(std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  return {s / 2 + rng.uniform(-0.1, 0.1) * s, s / 2 + rng.uniform(-0.1, 0.1) * s,
          0.30 * s * rng.uniform(0.9, 1.1)};
}

inline Image compose(const std::vector<double>& mask, const Texture& fg, const Texture& bg,
                     std::size_t size) {
  Image img(size, size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      const Rgb f = fg.color(px, py);
      const Rgb b = bg.color(px, py);
      const double m = mask[y * size + x];
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = to_byte(m * f[c] + (1 - m) * b[c]);
    }
  }
  return img;
}

/// Flat-domain fill: the class tint with a small independent jitter.
inline Texture tinted_fill(std::size_t cls, Rng& rng) {
  Rgb tint = class_tint(cls);
  for (double& v : tint) v = std::clamp(v + rng.uniform(-0.06, 0.06), 0.0, 1.0);
  return flat_texture(tint);
}

}  // namespace detail

/// Renders one image of class `cls` in texture family `family`.
inline Image render_sample(TextureFamily family, std::size_t cls, std::size_t size, Rng& rng) {
  const auto pose = detail::random_pose(size, rng);
  const auto mask = detail::coverage_mask(static_cast<ShapeKind>(cls % 5), pose, size);
  detail::Texture fg = family == TextureFamily::flat ? detail::tinted_fill(cls, rng)
                                                     : detail::random_texture(family, true, rng);
  detail::Texture bg = detail::random_texture(family, false, rng);
  if (family == TextureFamily::stripes) bg.angle = fg.angle + std::numbers::pi / 2;
  return detail::compose(mask, fg, bg, size);
}

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t per_cell = 200;
  std::size_t size = 32;
  std::vector<std::string> domains = default_domain_names();
  std::vector<std::string> classes = default_class_names();

  void validate() const {
    if (per_cell < 2) throw ConfigError("dataset: per_cell must be >= 2 (got " + std::to_string(per_cell) + ")");
    if (size < 8) throw ConfigError("dataset: image size must be >= 8");
    if (domains.empty()) throw ConfigError("dataset: at least one domain required");
    if (classes.size() < 2 || classes.size() > 5) {
      throw ConfigError("dataset: class count must be between 2 and 5");
    }
    for (const auto& d : domains) texture_family(d);
  }
};

/// Images grouped by named domain and class: samples[domain][class][index].
struct DomainDataset {
  std::uint64_t seed = 0;
  std::size_t per_cell = 0;
  std::size_t size = 0;
  std::vector<std::string> domains;
  std::vector<std::string> classes;
  std::vector<std::vector<std::vector<Image>>> samples;

  std::size_t domain_index(const std::string& name) const {
    auto it = std::find(domains.begin(), domains.end(), name);
    if (it == domains.end()) throw ConfigError("unknown domain '" + name + "'");
    return static_cast<std::size_t>(it - domains.begin());
  }

  std::vector<std::size_t> all_domains() const {
    std::vector<std::size_t> out(domains.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }

  /// Per-channel population mean/std of raw [0,1] pixels over the given domains.
  Normalization normalization_over(std::span<const std::size_t> domain_ids) const {
    std::array<double, 3> sum{}, sq{};
    double count = 0;
    for (std::size_t d : domain_ids) {
      for (const auto& cls : samples.at(d)) {
        for (const auto& img : cls) {
          const std::size_t area = img.width * img.height;
          for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < area; ++i) {
              const double v = img.pixels[c * area + i] / 255.0;
              sum[c] += v;
              sq[c] += v * v;
            }
          }
          count += static_cast<double>(area);
        }
      }
    }
    if (count == 0) throw DataError("normalization over an empty domain set");
    Normalization n;
    for (std::size_t c = 0; c < 3; ++c) {
      n.mean[c] = sum[c] / count;
      const double var = std::max(sq[c] / count - n.mean[c] * n.mean[c], 0.0);
      n.std[c] = var > 0 ? std::sqrt(var) : 1.0;
    }
    return n;
  }

  Normalization normalization() const {
    const auto ids = all_domains();
    return normalization_over(ids);
  }
};

/// Deterministic multi-domain benchmark. Each (domain, class, index) image is
/// rendered from its own derived stream, so generation order is irrelevant.
inline DomainDataset generate(const DatasetSpec& spec) {
  spec.validate();
  DomainDataset ds;
  ds.seed = spec.seed;
  ds.per_cell = spec.per_cell;
  ds.size = spec.size;
  ds.domains = spec.domains;
  ds.classes = spec.classes;
  ds.samples.resize(spec.domains.size());
  for (std::size_t d = 0; d < spec.domains.size(); ++d) {
    const TextureFamily family = texture_family(spec.domains[d]);
    ds.samples[d].resize(spec.classes.size());
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
      for (std::size_t i = 0; i < spec.per_cell; ++i) {
        Rng rng = Rng::derive(spec.seed, {static_cast<std::uint64_t>(family), c, i});
        ds.samples[d][c].push_back(render_sample(family, c, spec.size, rng));
      }
    }
  }
  return ds;
}

struct CueConflictProbe {
  Image image;
  int shape_label;
  int texture_label;
};

/// Shape of class i filled with the flat-domain signature tint of class j ≠ i,
/// (i, j) uniform over ordered pairs.
inline std::vector<CueConflictProbe> make_cue_conflict(const DomainDataset& ds, std::uint64_t seed,
                                                       std::size_t n) {
  const std::size_t classes = ds.classes.size();
  if (classes < 2) throw DataError("cue conflict needs at least two classes");
  std::vector<CueConflictProbe> out;
  out.reserve(n);
  for (std::size_t k = 0; k < n; ++k) {
    Rng rng = Rng::derive(seed, {0x637565ULL, k});
    const auto shape = static_cast<std::size_t>(rng.below(classes));
    auto texture = static_cast<std::size_t>(rng.below(classes - 1));
    if (texture >= shape) ++texture;
    const auto pose = detail::random_pose(ds.size, rng);
    const auto mask = detail::coverage_mask(static_cast<ShapeKind>(shape), pose, ds.size);
    const auto fg = detail::tinted_fill(texture, rng);
    const auto bg = detail::random_texture(TextureFamily::flat, false, rng);
    out.push_back({detail::compose(mask, fg, bg, ds.size), static_cast<int>(shape),
                   static_cast<int>(texture)});
  }
  return out;
}

/// Converts images to a normalized [N,3,H,W] tensor.
inline Tensor to_tensor(std::span<const Image* const> images, const Normalization& norm) {
  if (images.empty()) throw DimensionError("to_tensor: empty image list");
  const std::size_t h = images[0]->height, w = images[0]->width, area = h * w;
  std::vector<double> data(images.size() * 3 * area);
  for (std::size_t s = 0; s < images.size(); ++s) {
    if (images[s]->height != h || images[s]->width != w) {
      throw DimensionError("to_tensor: images differ in size");
    }
    for (std::size_t c = 0; c < 3; ++c) {
      const double inv = 1.0 / norm.std[c];
      for (std::size_t i = 0; i < area; ++i) {
        data[(s * 3 + c) * area + i] = (images[s]->pixels[c * area + i] / 255.0 - norm.mean[c]) * inv;
      }
    }
  }
  return Tensor({images.size(), 3, h, w}, std::move(data));
}

/// Inverse of to_tensor for one sample of a batch, quantized to 8 bits.
inline Image from_tensor(const Tensor& batch, std::size_t sample, const Normalization& norm) {
  const std::size_t h = batch.dim(2), w = batch.dim(3), area = h * w;
  Image img(w, h);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < area; ++i) {
      img.pixels[c * area + i] = to_byte(batch[(sample * 3 + c) * area + i] * norm.std[c] + norm.mean[c]);
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// On-disk layout: root/<domain>/<class>/<index>.ppm plus root/manifest.json
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json manifest_json(const DomainDataset& ds) {
  nlohmann::ordered_json counts;
  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    for (std::size_t c = 0; c < ds.classes.size(); ++c) {
      counts[ds.domains[d]][ds.classes[c]] = ds.samples[d][c].size();
    }
  }
  const Normalization norm = ds.normalization();
  return {{"seed", ds.seed},
          {"per_cell", ds.per_cell},
          {"size", ds.size},
          {"domains", ds.domains},
          {"classes", ds.classes},
          {"counts", counts},
          {"normalization", {{"mean", norm.mean}, {"std", norm.std}}}};
}

inline std::filesystem::path save_dataset(const DomainDataset& ds, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + root.string() + ": " + ec.message());
  for (std::size_t d = 0; d < ds.domains.size(); ++d) {
    for (std::size_t c = 0; c < ds.classes.size(); ++c) {
      const fs::path dir = root / ds.domains[d] / ds.classes[c];
      fs::create_directories(dir, ec);
      if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
      for (std::size_t i = 0; i < ds.samples[d][c].size(); ++i) {
        write_ppm(ds.samples[d][c][i], dir / (std::to_string(i) + ".ppm"));
      }
    }
  }
  const fs::path manifest = root / "manifest.json";
  std::ofstream out(manifest, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest.string());
  out << manifest_json(ds).dump(2) << '\n';
  return manifest;
}

inline DomainDataset load_dataset(const std::filesystem::path& root) {
  const auto manifest_path = root / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot open " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  DomainDataset ds;
  try {
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.per_cell = m.at("per_cell").get<std::size_t>();
    ds.size = m.at("size").get<std::size_t>();
    ds.domains = m.at("domains").get<std::vector<std::string>>();
    ds.classes = m.at("classes").get<std::vector<std::string>>();
    ds.samples.resize(ds.domains.size());
    for (std::size_t d = 0; d < ds.domains.size(); ++d) {
      ds.samples[d].resize(ds.classes.size());
      for (std::size_t c = 0; c < ds.classes.size(); ++c) {
        const auto count = m.at("counts").at(ds.domains[d]).at(ds.classes[c]).get<std::size_t>();
        for (std::size_t i = 0; i < count; ++i) {
          Image img = read_ppm(root / ds.domains[d] / ds.classes[c] / (std::to_string(i) + ".ppm"));
          if (img.width != ds.size || img.height != ds.size) {
            throw ParseError("image size mismatch in " + ds.domains[d] + "/" + ds.classes[c] + "/" +
                             std::to_string(i) + ".ppm");
          }
          ds.samples[d][c].push_back(std::move(img));
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace sdream

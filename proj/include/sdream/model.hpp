#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "json.hpp"
#include "sdream/error.hpp"
#include "sdream/ops.hpp"
#include "sdream/rng.hpp"
#include "sdream/tensor.hpp"

namespace sdream {

enum class PoolKind { average, max };

/// Per-channel affine normalization applied to raw [0,1] pixels before the
/// network sees them. The valid pixel box maps to [lower(), upper()].
struct Normalization {
  std::array<double, 3> mean{0.0, 0.0, 0.0};
  std::array<double, 3> std{1.0, 1.0, 1.0};

  std::array<double, 3> lower() const {
    return {-mean[0] / std[0], -mean[1] / std[1], -mean[2] / std[2]};
  }
  std::array<double, 3> upper() const {
    return {(1.0 - mean[0]) / std[0], (1.0 - mean[1]) / std[1], (1.0 - mean[2]) / std[2]};
  }

  bool operator==(const Normalization&) const = default;
};

struct Architecture {
  std::size_t in_channels = 3;
  std::size_t input_size = 32;
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t classes = 5;
  std::size_t kernel = 3;
  PoolKind pool = PoolKind::average;

  std::size_t feature_size() const { return input_size >> widths.size(); }

  void validate() const {
    if (classes < 2) throw ConfigError("model: class count must be >= 2");
    if (widths.empty()) throw ConfigError("model: feature widths must be non-empty");
    for (std::size_t w : widths) {
      if (w == 0) throw ConfigError("model: feature widths must be positive");
    }
    if (in_channels == 0) throw ConfigError("model: input channels must be positive");
    if (kernel == 0 || kernel % 2 == 0) throw ConfigError("model: kernel size must be odd");
    if (input_size % (std::size_t{1} << widths.size()) != 0 || feature_size() < 2) {
      throw ConfigError("model: input size " + std::to_string(input_size) +
                        " must be divisible by 2^blocks with a final map of at least 2x2");
    }
  }

  bool operator==(const Architecture&) const = default;
};

/// Whether a forward pass records parameter gradients. Input-only passes
/// (used when optimizing an image) leave parameter grads untouched.
enum class ParamGrad { track, frozen };

/// Feature extractor f (conv → ReLU → pool blocks) and linear classifier g
/// over globally pooled features.
class Model {
 public:
  struct ConvBlock {
    Tensor kernel;
    Tensor bias;
  };

  Model() = default;

  const Architecture& arch() const { return arch_; }
  const Normalization& normalization() const { return norm_; }
  void set_normalization(const Normalization& norm) { norm_ = norm; }

  static Model init(std::uint64_t seed, const Architecture& arch) {
    arch.validate();
    Model m;
    m.arch_ = arch;
    Rng rng = Rng::derive(seed, {0x696e6974ULL});
    std::size_t in = arch.in_channels;
    for (std::size_t width : arch.widths) {
      const std::size_t fan_in = in * arch.kernel * arch.kernel;
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::vector<double> k(width * fan_in);
      for (double& v : k) v = rng.uniform(-bound, bound);
      m.blocks_.push_back({Tensor({width, in, arch.kernel, arch.kernel}, std::move(k), true),
                           Tensor::zeros({width}, true)});
      in = width;
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::vector<double> w(arch.classes * in);
    for (double& v : w) v = rng.uniform(-bound, bound);
    m.weight_ = Tensor({arch.classes, in}, std::move(w), true);
    m.bias_ = Tensor::zeros({arch.classes}, true);
    return m;
  }

  /// Final conv-block activation map [N, D, H_f, W_f], before global pooling.
  Tensor extract_features(const Tensor& x, ParamGrad mode = ParamGrad::track) const {
    check_input(x);
    Tensor h = x;
    const std::size_t pad = arch_.kernel / 2;
    for (const auto& block : blocks_) {
      h = ops::conv2d(h, param(block.kernel, mode), param(block.bias, mode), 1, pad);
      h = ops::relu(h);
      h = arch_.pool == PoolKind::average ? ops::avg_pool2d(h, 2) : ops::max_pool2d(h, 2);
    }
    return h;
  }

  Tensor classify(const Tensor& features, ParamGrad mode = ParamGrad::track) const {
    return ops::linear(ops::global_avg_pool(features), param(weight_, mode), param(bias_, mode));
  }

  /// Unnormalized class scores g(f(x)), [N, C].
  Tensor predict_logits(const Tensor& x, ParamGrad mode = ParamGrad::track) const {
    return classify(extract_features(x, mode), mode);
  }

  /// Parameters in checkpoint order.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      out.emplace_back("block" + std::to_string(i) + ".kernel", blocks_[i].kernel);
      out.emplace_back("block" + std::to_string(i) + ".bias", blocks_[i].bias);
    }
    out.emplace_back("classifier.weight", weight_);
    out.emplace_back("classifier.bias", bias_);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  void zero_grad() {
    for (auto& t : parameters()) t.zero_grad();
  }

  /// Deep copy with independent parameter storage.
  Model clone() const {
    Model m;
    m.arch_ = arch_;
    m.norm_ = norm_;
    for (const auto& b : blocks_) m.blocks_.push_back({b.kernel.clone(true), b.bias.clone(true)});
    m.weight_ = weight_.clone(true);
    m.bias_ = bias_.clone(true);
    return m;
  }

  /// Bitwise parameter equality.
  bool same_parameters(const Model& other) const {
    auto a = parameters();
    auto b = other.parameters();
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
      if (a[i].shape() != b[i].shape()) return false;
      if (std::memcmp(a[i].data().data(), b[i].data().data(), a[i].numel() * sizeof(double)) != 0) {
        return false;
      }
    }
    return true;
  }

 private:
  friend Model load_checkpoint(const std::filesystem::path&);

  static Tensor param(const Tensor& t, ParamGrad mode) {
    return mode == ParamGrad::track ? t : t.detach();
  }

  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || x.dim(1) != arch_.in_channels || x.dim(2) != arch_.input_size ||
        x.dim(3) != arch_.input_size) {
      throw DimensionError("model input " + shape_string(x.shape()) + " does not match [N," +
                           std::to_string(arch_.in_channels) + "," +
                           std::to_string(arch_.input_size) + "," +
                           std::to_string(arch_.input_size) + "]");
    }
  }

  Architecture arch_;
  Normalization norm_;
  std::vector<ConvBlock> blocks_;
  Tensor weight_;
  Tensor bias_;
};

// ---------------------------------------------------------------------------
// Checkpoint format:
//   "DREAMGEN1\n"
//   one line of JSON: {"arch":{...},"normalization":{...},
//                      "tensors":[{"name","shape","offset"}...],"payload_bytes":n}
//   raw little-endian float64 payloads, in manifest order (offsets relative
//   to the first payload byte).
// ---------------------------------------------------------------------------

inline constexpr std::string_view kCheckpointMagic = "DREAMGEN1\n";

namespace detail {

inline nlohmann::ordered_json arch_to_json(const Architecture& a) {
  return {{"in_channels", a.in_channels},
          {"input_size", a.input_size},
          {"widths", a.widths},
          {"classes", a.classes},
          {"kernel", a.kernel},
          {"pool", a.pool == PoolKind::average ? "avg" : "max"}};
}

inline void append_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline double read_le(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | p[i];
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& model) {
  nlohmann::ordered_json header;
  header["arch"] = detail::arch_to_json(model.arch());
  header["normalization"] = {{"mean", model.normalization().mean},
                             {"std", model.normalization().std}};
  std::string payload;
  nlohmann::ordered_json manifest = nlohmann::ordered_json::array();
  for (const auto& [name, t] : model.named_parameters()) {
    manifest.push_back({{"name", name}, {"shape", t.shape()}, {"offset", payload.size()}});
    for (double v : t.data()) detail::append_le(payload, v);
  }
  header["tensors"] = manifest;
  header["payload_bytes"] = payload.size();
  std::string out(kCheckpointMagic);
  out += header.dump();
  out += '\n';
  out += payload;
  return out;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";

  if (bytes.compare(0, kCheckpointMagic.size(), kCheckpointMagic) != 0) {
    throw ParseError(where + "missing section 'magic' (expected DREAMGEN1)");
  }
  const std::size_t header_end = bytes.find('\n', kCheckpointMagic.size());
  if (header_end == std::string::npos) throw ParseError(where + "missing section 'header'");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<long>(kCheckpointMagic.size()),
                                   bytes.begin() + static_cast<long>(header_end));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "malformed section 'header': " + e.what());
  }

  Model m;
  try {
    const auto& a = header.at("arch");
    m.arch_.in_channels = a.at("in_channels").get<std::size_t>();
    m.arch_.input_size = a.at("input_size").get<std::size_t>();
    m.arch_.widths = a.at("widths").get<std::vector<std::size_t>>();
    m.arch_.classes = a.at("classes").get<std::size_t>();
    m.arch_.kernel = a.at("kernel").get<std::size_t>();
    const auto pool = a.at("pool").get<std::string>();
    if (pool != "avg" && pool != "max") throw ParseError(where + "arch.pool: unknown '" + pool + "'");
    m.arch_.pool = pool == "avg" ? PoolKind::average : PoolKind::max;
    const auto& n = header.at("normalization");
    m.norm_.mean = n.at("mean").get<std::array<double, 3>>();
    m.norm_.std = n.at("std").get<std::array<double, 3>>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(where + "malformed section 'arch/normalization': " + e.what());
  }
  try {
    m.arch_.validate();
  } catch (const ConfigError& e) {
    throw ParseError(where + "arch: " + e.what());
  }

  const auto* payload = reinterpret_cast<const unsigned char*>(bytes.data()) + header_end + 1;
  const std::size_t available = bytes.size() - header_end - 1;
  Model shape_ref = Model::init(0, m.arch_);
  const auto expected = shape_ref.named_parameters();
  const auto& manifest = header.contains("tensors") ? header["tensors"] : nlohmann::json();
  if (!manifest.is_array()) throw ParseError(where + "missing section 'tensors'");
  if (manifest.size() != expected.size()) {
    throw ParseError(where + "section 'tensors' lists " + std::to_string(manifest.size()) +
                     " tensors, architecture needs " + std::to_string(expected.size()));
  }

  std::vector<Tensor> loaded;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const auto& [name, ref] = expected[i];
    Shape shape;
    std::size_t offset = 0;
    try {
      if (manifest[i].at("name").get<std::string>() != name) {
        throw ParseError(where + "tensor " + std::to_string(i) + " should be '" + name + "'");
      }
      shape = manifest[i].at("shape").get<Shape>();
      offset = manifest[i].at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + "malformed manifest entry '" + name + "': " + e.what());
    }
    if (shape != ref.shape()) {
      throw ParseError(where + "tensor '" + name + "' has shape " + shape_string(shape) +
                       ", expected " + shape_string(ref.shape()));
    }
    const std::size_t count = shape_numel(shape);
    if (offset + count * 8 > available) {
      throw ParseError(where + "missing payload for tensor '" + name + "' (file truncated)");
    }
    std::vector<double> values(count);
    for (std::size_t k = 0; k < count; ++k) values[k] = detail::read_le(payload + offset + 8 * k);
    try {
      loaded.emplace_back(shape, std::move(values), true);
    } catch (const NumericError&) {
      throw ParseError(where + "tensor '" + name + "' contains non-finite values");
    }
  }

  std::size_t next = 0;
  for (std::size_t b = 0; b < m.arch_.widths.size(); ++b) {
    m.blocks_.push_back({loaded[next], loaded[next + 1]});
    next += 2;
  }
  m.weight_ = loaded[next];
  m.bias_ = loaded[next + 1];
  return m;
}

}  // namespace sdream

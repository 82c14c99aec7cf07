#pragma once

#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tvseg/core.hpp"
#include "tvseg/engine.hpp"
#include "tvseg/metrics.hpp"
#include "tvseg/net.hpp"
#include "tvseg/postproc.hpp"
#include "tvseg/synthdata.hpp"

namespace tvseg {

/// IO failures (missing data files, bad payloads). CLI exit code 4.
struct IoError : Error {
  using Error::Error;
};
struct BadMagicError : IoError {
  using IoError::IoError;
};
struct TruncatedFileError : IoError {
  using IoError::IoError;
};
struct FormatMismatchError : IoError {
  using IoError::IoError;
};
/// Configuration problems (unknown keys, constraint violations). Exit code 2.
struct ConfigError : Error {
  using Error::Error;
};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_i64(std::string& out, int64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((static_cast<uint64_t>(v) >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

class Reader {
public:
  Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  void need(size_t n, const char* what) const {
    if (at_ + n > data_.size())
      throw TruncatedFileError(path_ + ": truncated while reading " + what + " (expected " +
                               std::to_string(n) + " more bytes, have " +
                               std::to_string(data_.size() - at_) + ")");
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return static_cast<uint8_t>(data_[at_++]);
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[at_ + i])) << (8 * i);
    at_ += 4;
    return v;
  }
  int64_t i64(const char* what) {
    need(8, what);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(data_[at_ + i])) << (8 * i);
    at_ += 8;
    return static_cast<int64_t>(v);
  }
  double f64(const char* what) {
    const uint64_t bits = static_cast<uint64_t>(i64(what));
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  float f32(const char* what) {
    const uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  std::string bytes(size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(at_, n);
    at_ += n;
    return s;
  }
  void raw(void* dst, size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, data_.data() + at_, n);
    at_ += n;
  }
  size_t remaining() const { return data_.size() - at_; }
  const std::string& path() const { return path_; }

private:
  std::string data_;
  std::string path_;
  size_t at_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return data;
}

/// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::string& path, const std::string& data) {
  static std::atomic<uint64_t> counter{0};
  const std::string tmp =
      path + ".tmp." + std::to_string(static_cast<uint64_t>(::getpid())) + "." +
      std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write file: " + tmp);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("short write: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed for " + path + ": " + ec.message());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Volume file format: magic "VSG1" | dtype u8 (0=f32, 1=u8 binary) |
// channels u32 | d u32 | h u32 | w u32 | little-endian payload.
// Header is exactly 21 bytes.
// ---------------------------------------------------------------------------

constexpr char kVolumeMagic[4] = {'V', 'S', 'G', '1'};
constexpr size_t kVolumeHeaderBytes = 21;

inline void save_volume(const std::string& path, const Volume<float>& v) {
  std::string out;
  out.append(kVolumeMagic, 4);
  out.push_back(0);  // dtype f32
  detail::put_u32(out, static_cast<uint32_t>(v.channels()));
  detail::put_u32(out, static_cast<uint32_t>(v.shape().d));
  detail::put_u32(out, static_cast<uint32_t>(v.shape().h));
  detail::put_u32(out, static_cast<uint32_t>(v.shape().w));
  for (int64_t i = 0; i < v.size(); ++i) detail::put_f32(out, v.data()[i]);
  detail::write_file_atomic(path, out);
}

inline void save_mask(const std::string& path, const BinaryMask& m) {
  std::string out;
  out.append(kVolumeMagic, 4);
  out.push_back(1);  // dtype u8 binary
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<uint32_t>(m.shape().d));
  detail::put_u32(out, static_cast<uint32_t>(m.shape().h));
  detail::put_u32(out, static_cast<uint32_t>(m.shape().w));
  out.append(reinterpret_cast<const char*>(m.data()), static_cast<size_t>(m.voxels()));
  detail::write_file_atomic(path, out);
}

namespace detail {
struct VolumeHeader {
  uint8_t dtype;
  int64_t channels;
  Shape3 shape;
};

inline VolumeHeader read_volume_header(Reader& r) {
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kVolumeMagic, 4) != 0)
    throw BadMagicError(r.path() + ": bad magic '" + magic + "' (expected VSG1)");
  VolumeHeader h;
  h.dtype = r.u8("dtype");
  if (h.dtype > 1) throw FormatMismatchError(r.path() + ": unknown dtype code " + std::to_string(h.dtype));
  h.channels = r.u32("channels");
  h.shape.d = r.u32("d");
  h.shape.h = r.u32("h");
  h.shape.w = r.u32("w");
  return h;
}
}  // namespace detail

inline Volume<float> load_volume(const std::string& path) {
  detail::Reader r(detail::read_file(path), path);
  const auto h = detail::read_volume_header(r);
  if (h.dtype != 0)
    throw FormatMismatchError(path + ": expected f32 volume, found binary mask payload");
  Volume<float> v(h.channels, h.shape);
  const size_t payload = static_cast<size_t>(v.size()) * 4;
  r.need(payload, "payload");
  for (int64_t i = 0; i < v.size(); ++i) v.data()[i] = r.f32("payload");
  if (r.remaining() != 0)
    throw FormatMismatchError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return v;
}

inline BinaryMask load_mask(const std::string& path) {
  detail::Reader r(detail::read_file(path), path);
  const auto h = detail::read_volume_header(r);
  if (h.dtype != 1)
    throw FormatMismatchError(path + ": expected binary mask, found f32 volume payload");
  if (h.channels != 1)
    throw FormatMismatchError(path + ": binary mask must have one channel");
  BinaryMask m(h.shape);
  r.raw(m.data(), static_cast<size_t>(m.voxels()), "payload");
  if (r.remaining() != 0)
    throw FormatMismatchError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  for (int64_t i = 0; i < m.voxels(); ++i)
    if (m.data()[i] > 1)
      throw FormatMismatchError(path + ": mask payload contains values outside {0,1}");
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints: magic "VSGC" | version u32 | flags u8 | NetConfig | sections.
// Tensors are stored f32 regardless of compute precision; flag bit 2 records
// a double-precision source.
// ---------------------------------------------------------------------------

constexpr char kCheckpointMagic[4] = {'V', 'S', 'G', 'C'};
constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_net_config(std::string& out, const NetConfig& cfg) {
  put_i64(out, cfg.in_channels);
  put_i64(out, cfg.base_channels);
  put_i64(out, cfg.num_stages);
  put_i64(out, cfg.attn_start_stage);
  put_i64(out, cfg.attn_reduced_dim);
  put_f64(out, cfg.leaky_slope);
  put_f64(out, cfg.norm_eps);
}

inline NetConfig get_net_config(Reader& r) {
  NetConfig cfg;
  cfg.in_channels = r.i64("net.in_channels");
  cfg.base_channels = r.i64("net.base_channels");
  cfg.num_stages = r.i64("net.num_stages");
  cfg.attn_start_stage = r.i64("net.attn_start_stage");
  cfg.attn_reduced_dim = r.i64("net.attn_reduced_dim");
  cfg.leaky_slope = r.f64("net.leaky_slope");
  cfg.norm_eps = r.f64("net.norm_eps");
  return cfg;
}

template <typename T>
void put_tensor_section(std::string& out, NetParams<T>& params) {
  auto ts = collect_tensors(params);
  put_u32(out, static_cast<uint32_t>(ts.size()));
  for (auto& nt : ts) {
    put_u32(out, static_cast<uint32_t>(nt.name.size()));
    out.append(nt.name);
    put_u32(out, static_cast<uint32_t>(nt.tensor->shape.size()));
    for (int64_t d : nt.tensor->shape) put_i64(out, d);
    for (int64_t i = 0; i < nt.tensor->numel(); ++i)
      put_f32(out, static_cast<float>((*nt.tensor)[i]));
  }
}

template <typename T>
void get_tensor_section(Reader& r, NetParams<T>& params, const char* what) {
  auto ts = collect_tensors(params);
  const uint32_t count = r.u32(what);
  if (count != ts.size())
    throw FormatMismatchError(r.path() + ": " + what + " holds " + std::to_string(count) +
                              " tensors, configuration expects " + std::to_string(ts.size()));
  for (auto& nt : ts) {
    const uint32_t name_len = r.u32("tensor name length");
    const std::string name = r.bytes(name_len, "tensor name");
    if (name != nt.name)
      throw FormatMismatchError(r.path() + ": tensor order mismatch: found '" + name +
                                "', expected '" + nt.name + "'");
    const uint32_t ndim = r.u32("tensor rank");
    std::vector<int64_t> shape(ndim);
    for (auto& d : shape) d = r.i64("tensor dim");
    if (shape != nt.tensor->shape)
      throw FormatMismatchError(r.path() + ": shape mismatch for '" + name +
                                "' (checkpoint does not fit this NetConfig)");
    for (int64_t i = 0; i < nt.tensor->numel(); ++i)
      nt.tensor->v[static_cast<size_t>(i)] = static_cast<T>(r.f32("tensor payload"));
  }
}

}  // namespace detail

enum : uint8_t {
  kCkptHasOpt = 1,
  kCkptHasProgress = 2,
  kCkptSourceDouble = 4,
};

/// Save parameters (and optionally full optimizer/progress state for resume).
template <typename T>
void save_checkpoint(const std::string& path, const TrainerState<T>& st, bool full) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  uint8_t flags = full ? (kCkptHasOpt | kCkptHasProgress) : 0;
  if (sizeof(T) == 8) flags |= kCkptSourceDouble;
  out.push_back(static_cast<char>(flags));
  detail::put_net_config(out, st.params.cfg);
  detail::put_tensor_section(out, const_cast<NetParams<T>&>(st.params));
  if (full) {
    const OptState<T>& opt = st.opt;
    detail::put_f64(out, opt.beta1);
    detail::put_f64(out, opt.beta2);
    detail::put_f64(out, opt.eps);
    detail::put_f64(out, opt.weight_decay);
    detail::put_i64(out, opt.step);
    detail::put_u32(out, static_cast<uint32_t>(opt.m.size()));
    for (auto& t : opt.m)
      for (int64_t i = 0; i < t.numel(); ++i) detail::put_f32(out, static_cast<float>(t[i]));
    for (auto& t : opt.v)
      for (int64_t i = 0; i < t.numel(); ++i) detail::put_f32(out, static_cast<float>(t[i]));

    detail::put_i64(out, st.next_epoch);
    detail::put_f64(out, st.best_val);
    detail::put_i64(out, st.best_epoch);
    detail::put_i64(out, st.stall);
    out.push_back(st.stopped_early ? 1 : 0);
    detail::put_tensor_section(out, const_cast<NetParams<T>&>(st.best_params));
    detail::put_u32(out, static_cast<uint32_t>(st.logs.size()));
    for (auto& l : st.logs) {
      detail::put_i64(out, l.epoch);
      detail::put_f64(out, l.lr);
      detail::put_f64(out, l.train_loss);
      detail::put_f64(out, l.val_loss);
      detail::put_f64(out, l.val_sens);
      detail::put_f64(out, l.val_prec);
      detail::put_f64(out, l.val_dc);
    }
  }
  detail::write_file_atomic(path, out);
}

/// Load a checkpoint into a float trainer state. The stored NetConfig governs
/// tensor shapes; pass `expect` to enforce a configuration.
inline TrainerState<float> load_checkpoint(const std::string& path,
                                           const NetConfig* expect = nullptr) {
  detail::Reader r(detail::read_file(path), path);
  const std::string magic = r.bytes(4, "magic");
  if (std::memcmp(magic.data(), kCheckpointMagic, 4) != 0)
    throw BadMagicError(path + ": bad checkpoint magic (expected VSGC)");
  const uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw FormatMismatchError(path + ": unsupported checkpoint version " + std::to_string(version));
  const uint8_t flags = r.u8("flags");
  const NetConfig cfg = detail::get_net_config(r);
  if (expect) {
    if (cfg.in_channels != expect->in_channels || cfg.base_channels != expect->base_channels ||
        cfg.num_stages != expect->num_stages || cfg.attn_start_stage != expect->attn_start_stage ||
        cfg.attn_reduced_dim != expect->attn_reduced_dim)
      throw FormatMismatchError(path + ": checkpoint NetConfig does not match the requested one");
  }
  TrainerState<float> st;
  st.params = make_params<float>(cfg);
  detail::get_tensor_section(r, st.params, "parameter section");
  st.best_params = st.params;
  if (flags & kCkptHasOpt) {
    st.opt.beta1 = r.f64("opt.beta1");
    st.opt.beta2 = r.f64("opt.beta2");
    st.opt.eps = r.f64("opt.eps");
    st.opt.weight_decay = r.f64("opt.weight_decay");
    st.opt.step = r.i64("opt.step");
    const uint32_t n = r.u32("opt tensor count");
    st.opt = [&] {
      OptState<float> o;
      o.beta1 = st.opt.beta1;
      o.beta2 = st.opt.beta2;
      o.eps = st.opt.eps;
      o.weight_decay = st.opt.weight_decay;
      o.step = st.opt.step;
      for (auto& nt : collect_tensors(st.params)) {
        o.m.push_back(zeros_like(*nt.tensor));
        o.v.push_back(zeros_like(*nt.tensor));
      }
      return o;
    }();
    if (n != st.opt.m.size())
      throw FormatMismatchError(path + ": optimizer tensor count mismatch");
    for (auto& t : st.opt.m)
      for (int64_t i = 0; i < t.numel(); ++i) t.v[static_cast<size_t>(i)] = r.f32("opt m");
    for (auto& t : st.opt.v)
      for (int64_t i = 0; i < t.numel(); ++i) t.v[static_cast<size_t>(i)] = r.f32("opt v");
  } else {
    st.opt = OptState<float>::init(st.params);
  }
  if (flags & kCkptHasProgress) {
    st.next_epoch = r.i64("progress.next_epoch");
    st.best_val = r.f64("progress.best_val");
    st.best_epoch = r.i64("progress.best_epoch");
    st.stall = r.i64("progress.stall");
    st.stopped_early = r.u8("progress.stopped_early") != 0;
    detail::get_tensor_section(r, st.best_params, "best parameter section");
    const uint32_t n = r.u32("log count");
    st.logs.resize(n);
    for (auto& l : st.logs) {
      l.epoch = r.i64("log.epoch");
      l.lr = r.f64("log.lr");
      l.train_loss = r.f64("log.train_loss");
      l.val_loss = r.f64("log.val_loss");
      l.val_sens = r.f64("log.val_sens");
      l.val_prec = r.f64("log.val_prec");
      l.val_dc = r.f64("log.val_dc");
    }
  }
  if (r.remaining() != 0)
    throw FormatMismatchError(path + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return st;
}

// ---------------------------------------------------------------------------
// Run configuration file (JSON, nested sections, unknown keys rejected)
// ---------------------------------------------------------------------------

struct InferConfig {
  Shape3 window{32, 32, 32};
  double overlap = 0.0;
  double tau = 0.5;

  void validate() const {
    if (!window.valid()) throw InvalidArgument("infer.window invalid");
    if (!(overlap >= 0 && overlap < 1)) throw InvalidArgument("infer.overlap must be in [0,1)");
    if (!(tau > 0 && tau < 1)) throw InvalidArgument("infer.tau must be in (0,1)");
  }
};

/// Everything a run needs; absent file keys keep these defaults (the
/// published training hyperparameters plus this artifact's desk-scale
/// generator/augmentation settings).
struct RunConfig {
  GenConfig gen;
  AugmentConfig augment;
  NetConfig net;
  TrainConfig train;
  PostprocConfig postproc;
  InferConfig infer;

  void validate() const {
    gen.validate();
    augment.validate();
    net.validate();
    train.validate();
    postproc.validate();
    infer.validate();
    const int64_t div = net.divisibility();
    if (augment.crop_size.d % div || augment.crop_size.h % div || augment.crop_size.w % div)
      throw InvalidArgument("augment.crop_size must be divisible by the network factor " +
                            std::to_string(div));
  }
};

namespace detail {

using json = nlohmann::json;

class SectionParser {
public:
  SectionParser(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j.is_object()) throw ConfigError(prefix_ + ": expected an object");
  }

  template <typename T>
  void num(const char* key, T& out) {
    take(key, [&](const json& v) {
      if (!v.is_number()) throw ConfigError(path(key) + ": expected a number");
      out = v.get<T>();
    });
  }
  void boolean(const char* key, bool& out) {
    take(key, [&](const json& v) {
      if (!v.is_boolean()) throw ConfigError(path(key) + ": expected a boolean");
      out = v.get<bool>();
    });
  }
  void shape(const char* key, Shape3& out) {
    take(key, [&](const json& v) {
      if (!v.is_array() || v.size() != 3 || !v[0].is_number_integer())
        throw ConfigError(path(key) + ": expected [d, h, w]");
      out = Shape3{v[0].get<int64_t>(), v[1].get<int64_t>(), v[2].get<int64_t>()};
    });
  }
  void elem(const char* key, StructElem& out) {
    take(key, [&](const json& v) {
      if (!v.is_number_integer()) throw ConfigError(path(key) + ": expected an odd box extent");
      out = StructElem::box(v.get<int64_t>());
    });
  }

  const json* section(const char* key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    seen_.push_back(key);
    return &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      bool known = false;
      for (auto& s : seen_)
        if (s == it.key()) known = true;
      if (!known) throw ConfigError(path(it.key().c_str()) + ": unknown key");
    }
  }

private:
  std::string path(const char* key) const {
    return prefix_.empty() ? std::string(key) : prefix_ + "." + key;
  }
  template <typename Fn>
  void take(const char* key, Fn fn) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    seen_.push_back(key);
    try {
      fn(*it);
    } catch (const json::exception& e) {
      throw ConfigError(path(key) + ": " + e.what());
    } catch (const InvalidArgument& e) {
      throw ConfigError(path(key) + ": " + e.what());
    }
  }

  const json& j_;
  std::string prefix_;
  std::vector<std::string> seen_;
};

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  detail::SectionParser top(j, "");

  if (const auto* g = top.section("gen")) {
    detail::SectionParser p(*g, "gen");
    p.num("n_train", cfg.gen.n_train);
    p.num("n_validation", cfg.gen.n_validation);
    p.num("n_test", cfg.gen.n_test);
    p.shape("volume_shape", cfg.gen.volume_shape);
    p.num("lesions_min", cfg.gen.lesions_min);
    p.num("lesions_max", cfg.gen.lesions_max);
    p.num("radius_min", cfg.gen.radius_min);
    p.num("radius_max", cfg.gen.radius_max);
    p.num("field_cells", cfg.gen.field_cells);
    p.num("field_base", cfg.gen.field_base);
    p.num("field_amplitude", cfg.gen.field_amplitude);
    p.num("texture_noise_sigma", cfg.gen.texture_noise_sigma);
    p.num("lesion_contrast_t1", cfg.gen.lesion_contrast_t1);
    p.num("lesion_contrast_flair", cfg.gen.lesion_contrast_flair);
    p.num("seed", cfg.gen.seed);
    p.finish();
  }
  if (const auto* a = top.section("augment")) {
    detail::SectionParser p(*a, "augment");
    p.boolean("enable_rotation", cfg.augment.enable_rotation);
    p.boolean("enable_flip", cfg.augment.enable_flip);
    p.boolean("enable_intensity", cfg.augment.enable_intensity);
    p.boolean("enable_noise", cfg.augment.enable_noise);
    p.shape("crop_size", cfg.augment.crop_size);
    p.num("intensity_shift_range", cfg.augment.intensity_shift_range);
    p.num("gaussian_noise_sigma", cfg.augment.gaussian_noise_sigma);
    p.finish();
  }
  if (const auto* n = top.section("net")) {
    detail::SectionParser p(*n, "net");
    p.num("in_channels", cfg.net.in_channels);
    p.num("base_channels", cfg.net.base_channels);
    p.num("num_stages", cfg.net.num_stages);
    p.num("attn_start_stage", cfg.net.attn_start_stage);
    p.num("attn_reduced_dim", cfg.net.attn_reduced_dim);
    p.num("leaky_slope", cfg.net.leaky_slope);
    p.num("norm_eps", cfg.net.norm_eps);
    p.finish();
  }
  if (const auto* t = top.section("train")) {
    detail::SectionParser p(*t, "train");
    p.num("max_epochs", cfg.train.max_epochs);
    p.num("lr_max", cfg.train.lr_max);
    p.num("lr_min", cfg.train.lr_min);
    p.num("warmup_epochs", cfg.train.warmup_epochs);
    p.num("patience", cfg.train.patience);
    p.num("patches_per_subject", cfg.train.patches_per_subject);
    p.num("seed", cfg.train.seed);
    if (const auto* l = p.section("loss")) {
      detail::SectionParser q(*l, "train.loss");
      q.num("epsilon", cfg.train.loss.epsilon);
      q.num("w_dice", cfg.train.loss.w_dice);
      q.num("w_bce", cfg.train.loss.w_bce);
      q.num("w_tv", cfg.train.loss.w_tv);
      q.num("bce_clamp", cfg.train.loss.bce_clamp);
      q.finish();
    }
    p.finish();
  }
  if (const auto* pp = top.section("postproc")) {
    detail::SectionParser p(*pp, "postproc");
    p.elem("opening_elem", cfg.postproc.opening_elem);
    p.elem("holefill_elem", cfg.postproc.holefill_elem);
    p.num("min_cluster_voxels", cfg.postproc.min_cluster_voxels);
    p.boolean("true_opening", cfg.postproc.true_opening);
    p.finish();
  }
  if (const auto* inf = top.section("infer")) {
    detail::SectionParser p(*inf, "infer");
    p.shape("window", cfg.infer.window);
    p.num("overlap", cfg.infer.overlap);
    p.num("tau", cfg.infer.tau);
    p.finish();
  }
  top.finish();

  cfg.train.tau = cfg.infer.tau;
  try {
    cfg.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError(std::string("config constraint violation: ") + e.what());
  }
  return cfg;
}

/// Parse a config file. An empty (or whitespace-only) file means all defaults.
inline RunConfig parse_run_config(const std::string& path) {
  std::string text;
  try {
    text = detail::read_file(path);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
  bool blank = true;
  for (char c : text)
    if (!std::isspace(static_cast<unsigned char>(c))) blank = false;
  if (blank) return run_config_from_json(nlohmann::json::object());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return run_config_from_json(j);
}

inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["gen"] = {{"n_train", cfg.gen.n_train},
              {"n_validation", cfg.gen.n_validation},
              {"n_test", cfg.gen.n_test},
              {"volume_shape", {cfg.gen.volume_shape.d, cfg.gen.volume_shape.h, cfg.gen.volume_shape.w}},
              {"lesions_min", cfg.gen.lesions_min},
              {"lesions_max", cfg.gen.lesions_max},
              {"radius_min", cfg.gen.radius_min},
              {"radius_max", cfg.gen.radius_max},
              {"field_cells", cfg.gen.field_cells},
              {"field_base", cfg.gen.field_base},
              {"field_amplitude", cfg.gen.field_amplitude},
              {"texture_noise_sigma", cfg.gen.texture_noise_sigma},
              {"lesion_contrast_t1", cfg.gen.lesion_contrast_t1},
              {"lesion_contrast_flair", cfg.gen.lesion_contrast_flair},
              {"seed", cfg.gen.seed}};
  j["augment"] = {{"enable_rotation", cfg.augment.enable_rotation},
                  {"enable_flip", cfg.augment.enable_flip},
                  {"enable_intensity", cfg.augment.enable_intensity},
                  {"enable_noise", cfg.augment.enable_noise},
                  {"crop_size", {cfg.augment.crop_size.d, cfg.augment.crop_size.h, cfg.augment.crop_size.w}},
                  {"intensity_shift_range", cfg.augment.intensity_shift_range},
                  {"gaussian_noise_sigma", cfg.augment.gaussian_noise_sigma}};
  j["net"] = {{"in_channels", cfg.net.in_channels},
              {"base_channels", cfg.net.base_channels},
              {"num_stages", cfg.net.num_stages},
              {"attn_start_stage", cfg.net.attn_start_stage},
              {"attn_reduced_dim", cfg.net.attn_reduced_dim},
              {"leaky_slope", cfg.net.leaky_slope},
              {"norm_eps", cfg.net.norm_eps}};
  j["train"] = {{"max_epochs", cfg.train.max_epochs},
                {"lr_max", cfg.train.lr_max},
                {"lr_min", cfg.train.lr_min},
                {"warmup_epochs", cfg.train.warmup_epochs},
                {"patience", cfg.train.patience},
                {"patches_per_subject", cfg.train.patches_per_subject},
                {"seed", cfg.train.seed},
                {"loss",
                 {{"epsilon", cfg.train.loss.epsilon},
                  {"w_dice", cfg.train.loss.w_dice},
                  {"w_bce", cfg.train.loss.w_bce},
                  {"w_tv", cfg.train.loss.w_tv},
                  {"bce_clamp", cfg.train.loss.bce_clamp}}}};
  j["postproc"] = {{"opening_elem", cfg.postproc.opening_elem.shape.d},
                   {"holefill_elem", cfg.postproc.holefill_elem.shape.d},
                   {"min_cluster_voxels", cfg.postproc.min_cluster_voxels},
                   {"true_opening", cfg.postproc.true_opening}};
  j["infer"] = {{"window", {cfg.infer.window.d, cfg.infer.window.h, cfg.infer.window.w}},
                {"overlap", cfg.infer.overlap},
                {"tau", cfg.infer.tau}};
  return j;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + one image/gt file pair per subject
// ---------------------------------------------------------------------------

struct ManifestEntry {
  std::string id;
  Split split;
  std::string image_file;
  std::string gt_file;
};

inline void write_dataset(const std::string& dir, const std::vector<SubjectRecord<float>>& subjects,
                          const GenConfig& gen) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["seed"] = gen.seed;
  j["volume_shape"] = {gen.volume_shape.d, gen.volume_shape.h, gen.volume_shape.w};
  j["subjects"] = nlohmann::json::array();
  for (auto& s : subjects) {
    const std::string img = s.id + "_img.vsg";
    const std::string gt = s.id + "_gt.vsg";
    save_volume(dir + "/" + img, s.image);
    save_mask(dir + "/" + gt, s.gt);
    j["subjects"].push_back(
        {{"id", s.id}, {"split", split_name(s.split)}, {"image", img}, {"gt", gt}});
  }
  detail::write_file_atomic(dir + "/manifest.json", j.dump(2) + "\n");
}

inline std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  const std::string path = dir + "/manifest.json";
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw FormatMismatchError(path + ": " + e.what());
  }
  std::vector<ManifestEntry> out;
  if (!j.contains("subjects") || !j["subjects"].is_array())
    throw FormatMismatchError(path + ": missing subjects array");
  for (auto& s : j["subjects"]) {
    ManifestEntry e;
    e.id = s.at("id").get<std::string>();
    e.split = split_from_name(s.at("split").get<std::string>());
    e.image_file = s.at("image").get<std::string>();
    e.gt_file = s.at("gt").get<std::string>();
    out.push_back(std::move(e));
  }
  return out;
}

inline SubjectRecord<float> load_subject(const std::string& dir, const ManifestEntry& e) {
  SubjectRecord<float> rec;
  rec.id = e.id;
  rec.split = e.split;
  rec.image = load_volume(dir + "/" + e.image_file);
  rec.gt = load_mask(dir + "/" + e.gt_file);
  if (rec.image.shape() != rec.gt.shape())
    throw FormatMismatchError(e.id + ": image and gt shapes differ");
  return rec;
}

inline std::vector<SubjectRecord<float>> load_dataset(const std::string& dir) {
  std::vector<SubjectRecord<float>> out;
  for (auto& e : read_manifest(dir)) out.push_back(load_subject(dir, e));
  return out;
}

// ---------------------------------------------------------------------------
// CSV and text reports
// ---------------------------------------------------------------------------

namespace detail {
inline std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}
}  // namespace detail

inline std::string epoch_csv(const std::vector<EpochLog>& logs) {
  std::string out = "epoch,lr,train_loss,val_loss,val_sens,val_prec,val_dc\n";
  for (auto& l : logs) {
    out += std::to_string(l.epoch) + "," + detail::fmt("%.10e", l.lr) + "," +
           detail::fmt("%.10e", l.train_loss) + "," + detail::fmt("%.10e", l.val_loss) + "," +
           detail::fmt("%.6f", l.val_sens) + "," + detail::fmt("%.6f", l.val_prec) + "," +
           detail::fmt("%.6f", l.val_dc) + "\n";
  }
  return out;
}

inline void write_epoch_csv(const std::string& path, const std::vector<EpochLog>& logs) {
  detail::write_file_atomic(path, epoch_csv(logs));
}

inline std::string report_csv(const std::vector<AggregateReport>& rows) {
  std::string out =
      "loss,runs,subjects_per_run,sens_mean,sens_std,prec_mean,prec_std,dc_mean,dc_std,"
      "ssens_mean,ssens_std,nfpc_mean,nfpc_std\n";
  for (auto& r : rows) {
    out += r.label + "," + std::to_string(r.runs) + "," + std::to_string(r.subjects_per_run);
    for (const MetricStat* s : {&r.sens, &r.prec, &r.dice, &r.ssens, &r.nfpc})
      out += "," + detail::fmt("%.6f", s->mean) + "," + detail::fmt("%.6f", s->stddev);
    out += "\n";
  }
  return out;
}

inline void write_report_csv(const std::string& path, const std::vector<AggregateReport>& rows) {
  detail::write_file_atomic(path, report_csv(rows));
}

/// Aligned text table with the columns Loss | Sens | Prec | DC | sSens | nFPC.
inline std::string report_table(const std::vector<AggregateReport>& rows,
                                const std::string& title) {
  auto cell = [](const MetricStat& s) {
    return detail::fmt("%.4f", s.mean) + " \xC2\xB1 " + detail::fmt("%.4f", s.stddev);
  };
  std::vector<std::array<std::string, 6>> grid;
  grid.push_back({"Loss", "Sens", "Prec", "DC", "sSens", "nFPC"});
  for (auto& r : rows)
    grid.push_back({r.label, cell(r.sens), cell(r.prec), cell(r.dice), cell(r.ssens), cell(r.nfpc)});
  std::array<size_t, 6> width{};
  for (auto& row : grid)
    for (int c = 0; c < 6; ++c) {
      size_t len = row[c].size();
      if (row[c].find("\xC2\xB1") != std::string::npos) len -= 1;  // ± is 2 bytes, 1 column
      width[c] = std::max(width[c], len);
    }
  std::string out = title.empty() ? "" : title + "\n";
  for (size_t i = 0; i < grid.size(); ++i) {
    std::string line;
    for (int c = 0; c < 6; ++c) {
      std::string cellv = grid[i][c];
      size_t len = cellv.size();
      if (cellv.find("\xC2\xB1") != std::string::npos) len -= 1;
      line += cellv + std::string(width[c] - len, ' ');
      if (c + 1 < 6) line += " | ";
    }
    out += line + "\n";
    if (i == 0) {
      std::string rule;
      for (int c = 0; c < 6; ++c) {
        rule += std::string(width[c], '-');
        if (c + 1 < 6) rule += "-+-";
      }
      out += rule + "\n";
    }
  }
  return out;
}

}  // namespace tvseg

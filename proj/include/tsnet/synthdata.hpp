#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tsnet/streams.hpp"
#include "tsnet/tensor.hpp"
#include "tsnet/util.hpp"

namespace tsnet {

enum class ShapeKind { square, circle, triangle };

inline const char* shape_kind_name(ShapeKind s) {
  switch (s) {
    case ShapeKind::square: return "square";
    case ShapeKind::circle: return "circle";
    default: return "triangle";
  }
}

inline ShapeKind shape_kind_from_name(const std::string& s) {
  if (s == "square") return ShapeKind::square;
  if (s == "circle") return ShapeKind::circle;
  if (s == "triangle") return ShapeKind::triangle;
  throw ConfigError("unknown shape '" + s + "'");
}

/// Trajectory family; every kind starts at offset (0,0) so two classes that
/// differ only in motion render identical first frames.
struct MotionSpec {
  enum class Kind { linear, oscillate, rotate_orbit };
  Kind kind = Kind::linear;
  double dx = 0.0, dy = 0.0;       // linear velocity, px/frame
  int axis = 0;                    // oscillate: 0 = x, 1 = y
  double period = 15.0;            // oscillate period, frames
  double amplitude = 6.0;          // oscillate amplitude, px
  double radius = 6.0;             // orbit radius, px
  double speed = 0.3;              // orbit angular speed, rad/frame

  static MotionSpec linear(double dx, double dy) {
    MotionSpec m;
    m.kind = Kind::linear;
    m.dx = dx;
    m.dy = dy;
    return m;
  }
  static MotionSpec oscillate(int axis, double period, double amplitude = 6.0) {
    MotionSpec m;
    m.kind = Kind::oscillate;
    m.axis = axis;
    m.period = period;
    m.amplitude = amplitude;
    return m;
  }
  static MotionSpec orbit(double radius, double speed) {
    MotionSpec m;
    m.kind = Kind::rotate_orbit;
    m.radius = radius;
    m.speed = speed;
    return m;
  }

  /// Offset from the start position at frame t; (0,0) at t=0.
  std::pair<double, double> offset(double t) const {
    switch (kind) {
      case Kind::linear: return {dx * t, dy * t};
      case Kind::oscillate: {
        const double v = amplitude * std::sin(2.0 * 3.141592653589793 * t / period);
        return axis == 0 ? std::pair<double, double>{v, 0.0} : std::pair<double, double>{0.0, v};
      }
      default:
        return {radius * (std::cos(speed * t) - 1.0), radius * std::sin(speed * t)};
    }
  }

  const char* kind_name() const {
    switch (kind) {
      case Kind::linear: return "linear";
      case Kind::oscillate: return "oscillate";
      default: return "rotate_orbit";
    }
  }
};

struct SynthClass {
  int class_id = 0;
  ShapeKind shape = ShapeKind::square;
  std::array<double, 3> color = {1.0, 1.0, 1.0};
  MotionSpec motion;
};

/// Ten classes; (0,1) and (2,3) share shape and color and differ only in
/// motion, so single-frame appearance cannot separate them.
inline std::vector<SynthClass> default_classes() {
  std::vector<SynthClass> cs(10);
  cs[0] = {0, ShapeKind::square, {0.9, 0.2, 0.2}, MotionSpec::linear(0.8, 0.0)};
  cs[1] = {1, ShapeKind::square, {0.9, 0.2, 0.2}, MotionSpec::oscillate(0, 30.0)};
  cs[2] = {2, ShapeKind::circle, {0.2, 0.9, 0.2}, MotionSpec::linear(0.0, 0.8)};
  cs[3] = {3, ShapeKind::circle, {0.2, 0.9, 0.2}, MotionSpec::orbit(6.0, 0.35)};
  cs[4] = {4, ShapeKind::triangle, {0.2, 0.4, 0.9}, MotionSpec::oscillate(1, 10.0)};
  cs[5] = {5, ShapeKind::triangle, {0.9, 0.9, 0.2}, MotionSpec::linear(-0.8, 0.0)};
  cs[6] = {6, ShapeKind::square, {0.3, 0.6, 0.9}, MotionSpec::orbit(8.0, 0.2)};
  cs[7] = {7, ShapeKind::circle, {0.9, 0.9, 0.9}, MotionSpec::oscillate(0, 20.0)};
  cs[8] = {8, ShapeKind::triangle, {0.9, 0.3, 0.9}, MotionSpec::orbit(4.0, 0.5)};
  cs[9] = {9, ShapeKind::square, {0.3, 0.9, 0.9}, MotionSpec::linear(0.6, 0.6)};
  return cs;
}

/// First n of the default classes; the confusable pairs sit at the front so
/// any n >= 4 keeps both of them.
inline std::vector<SynthClass> synth_classes(size_t n) {
  auto all = default_classes();
  if (n == 0 || n > all.size()) {
    throw ConfigError("class count must lie in 1.." + std::to_string(all.size()) + ", got " +
                      std::to_string(n));
  }
  all.resize(n);
  return all;
}

namespace detail {

/// Folds p into [lo, hi] by reflection (billiard bounce).
inline double reflect_fold(double p, double lo, double hi) {
  const double span = hi - lo;
  if (span <= 0.0) return lo;
  double q = std::fmod(p - lo, 2.0 * span);
  if (q < 0.0) q += 2.0 * span;
  return lo + (q <= span ? q : 2.0 * span - q);
}

inline bool shape_covers(ShapeKind shape, double px, double py, double cx, double cy, double s) {
  const double dx = px - cx, dy = py - cy;
  switch (shape) {
    case ShapeKind::square: return std::abs(dx) <= s && std::abs(dy) <= s;
    case ShapeKind::circle: return dx * dx + dy * dy <= s * s;
    default:  // upward triangle: apex at cy - s, base at cy + s
      return dy >= -s && dy <= s && std::abs(dx) <= (dy + s) * 0.5;
  }
}

inline double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Renders one clip: the class shape follows its motion trajectory from a
/// seeded start, reflecting off frame borders. All stored values are
/// f32-representable so the binary format round-trips bit-exactly.
inline VideoClip generate_clip(const SynthClass& cls, size_t frames, size_t h, size_t w,
                               uint64_t seed, const std::string& clip_id,
                               size_t audio_windows = 8, size_t audio_dim = 16,
                               double shape_size = 4.0, double start_jitter = 4.0) {
  if (frames == 0) throw InputError("generate_clip: frames must be positive");
  if (2.0 * shape_size + 2.0 >= static_cast<double>(std::min(h, w))) {
    throw ConfigError("shape size " + std::to_string(shape_size) + " too large for " +
                      std::to_string(h) + "x" + std::to_string(w) + " frames");
  }
  Rng rng(seed);
  const double lo = shape_size + 1.0;
  const double hi_x = static_cast<double>(w) - shape_size - 2.0;
  const double hi_y = static_cast<double>(h) - shape_size - 2.0;
  // jitter around the frame center, not the whole safe box: the start stays
  // class-independent while per-class trajectories separate cleanly
  const double cx0 = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy0 = (static_cast<double>(h) - 1.0) / 2.0;
  const double start_x =
      std::min(hi_x, std::max(lo, cx0 + rng.uniform(-start_jitter, start_jitter)));
  const double start_y =
      std::min(hi_y, std::max(lo, cy0 + rng.uniform(-start_jitter, start_jitter)));

  VideoClip clip;
  clip.clip_id = clip_id;
  clip.labels = {cls.class_id};
  clip.frames.reserve(frames);
  for (size_t t = 0; t < frames; ++t) {
    auto [ox, oy] = cls.motion.offset(static_cast<double>(t));
    const double cx = detail::reflect_fold(start_x + ox, lo, hi_x);
    const double cy = detail::reflect_fold(start_y + oy, lo, hi_y);
    Tensor frame({3, h, w});
    for (size_t y = 0; y < h; ++y)
      for (size_t x = 0; x < w; ++x) {
        if (detail::shape_covers(cls.shape, static_cast<double>(x), static_cast<double>(y), cx, cy,
                                 shape_size)) {
          for (size_t ch = 0; ch < 3; ++ch) {
            frame.at(ch, y, x) = detail::as_f32(cls.color[ch]);
          }
        }
      }
    clip.frames.push_back(std::move(frame));
  }

  clip.audio.reserve(audio_windows);
  for (size_t wi = 0; wi < audio_windows; ++wi) {
    Tensor a({audio_dim});
    for (size_t j = 0; j < audio_dim; ++j) {
      const double base =
          0.4 * std::sin(0.7 * static_cast<double>((cls.class_id + 1) * (j + 1)) +
                         0.9 * static_cast<double>(wi));
      a.data[j] = detail::as_f32(base + rng.gaussian(0.0, 0.1));
    }
    clip.audio.push_back(std::move(a));
  }
  clip.validate();
  return clip;
}

// ---------------------------------------------------------------------------
// Clip binary format (TSLB, little-endian)
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, sizeof(bits));
  put_u32(out, bits);
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;

  uint32_t u32(const char* what) {
    if (pos + 4 > buf.size()) {
      throw FormatError(std::string("truncated file reading ") + what, pos);
    }
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
    pos += 4;
    return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
           (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
  }

  float f32(const char* what) {
    const uint32_t bits = u32(what);
    float f;
    std::memcpy(&f, &bits, sizeof(f));
    return f;
  }
};

}  // namespace detail

inline constexpr uint32_t kClipFormatVersion = 1;

/// magic 'TSLB', u32 version, u32 frames, u32 C,H,W, u32 audio windows,
/// u32 audio dim, then f32 frame payload and f32 audio payload.
inline std::string encode_clip(const VideoClip& clip) {
  clip.validate();
  const auto& d = clip.frames.front().dims;
  std::string out = "TSLB";
  detail::put_u32(out, kClipFormatVersion);
  detail::put_u32(out, static_cast<uint32_t>(clip.frames.size()));
  detail::put_u32(out, static_cast<uint32_t>(d[0]));
  detail::put_u32(out, static_cast<uint32_t>(d[1]));
  detail::put_u32(out, static_cast<uint32_t>(d[2]));
  detail::put_u32(out, static_cast<uint32_t>(clip.audio.size()));
  detail::put_u32(out, static_cast<uint32_t>(clip.audio.empty() ? 0 : clip.audio.front().numel()));
  for (const Tensor& f : clip.frames) {
    for (double v : f.data) detail::put_f32(out, static_cast<float>(v));
  }
  for (const Tensor& a : clip.audio) {
    for (double v : a.data) detail::put_f32(out, static_cast<float>(v));
  }
  return out;
}

inline VideoClip decode_clip(const std::string& bytes, const std::string& clip_id = "") {
  if (bytes.size() < 4 || bytes.compare(0, 4, "TSLB") != 0) {
    throw FormatError("bad magic, expected 'TSLB'", 0);
  }
  detail::ByteReader r{bytes, 4};
  const uint32_t version = r.u32("version");
  if (version != kClipFormatVersion) {
    throw FormatError("unsupported clip format version " + std::to_string(version), 4);
  }
  const uint32_t frames = r.u32("frame count");
  const uint32_t c = r.u32("channels");
  const uint32_t h = r.u32("height");
  const uint32_t w = r.u32("width");
  const uint32_t windows = r.u32("audio window count");
  const uint32_t adim = r.u32("audio dim");
  if (frames == 0 || c == 0 || h == 0 || w == 0) {
    throw FormatError("zero extent in clip header", 8);
  }
  const size_t expect = r.pos + 4ull * frames * c * h * w + 4ull * windows * adim;
  if (bytes.size() != expect) {
    throw FormatError("payload length " + std::to_string(bytes.size()) +
                          " does not match header (expected " + std::to_string(expect) + ")",
                      bytes.size() < expect ? bytes.size() : expect);
  }
  VideoClip clip;
  clip.clip_id = clip_id;
  clip.frames.reserve(frames);
  for (uint32_t i = 0; i < frames; ++i) {
    Tensor f({c, h, w});
    for (double& v : f.data) v = static_cast<double>(r.f32("frame payload"));
    clip.frames.push_back(std::move(f));
  }
  for (uint32_t i = 0; i < windows; ++i) {
    Tensor a({adim});
    for (double& v : a.data) v = static_cast<double>(r.f32("audio payload"));
    clip.audio.push_back(std::move(a));
  }
  return clip;
}

inline void write_clip(const std::filesystem::path& path, const VideoClip& clip) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  const std::string bytes = encode_clip(clip);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline VideoClip read_clip(const std::filesystem::path& path, const std::string& clip_id = "") {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_clip(bytes, clip_id.empty() ? path.stem().string() : clip_id);
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

struct ClipEntry {
  std::string clip_id;
  std::string path;  // relative to the manifest directory
  std::vector<int> labels;
  size_t frame_count = 0;
  size_t channels = 0, height = 0, width = 0;
  size_t audio_windows = 0, audio_dim = 0;
  std::string split;  // train | val | test
};

struct DatasetManifest {
  uint32_t version = 1;
  uint64_t seed = 0;
  std::vector<SynthClass> classes;
  std::vector<ClipEntry> clips;

  std::vector<const ClipEntry*> split_entries(const std::string& split) const {
    std::vector<const ClipEntry*> out;
    for (const ClipEntry& e : clips) {
      if (e.split == split) out.push_back(&e);
    }
    return out;
  }
};

inline nlohmann::json class_to_json(const SynthClass& c) {
  nlohmann::json m;
  m["kind"] = c.motion.kind_name();
  switch (c.motion.kind) {
    case MotionSpec::Kind::linear:
      m["dx"] = c.motion.dx;
      m["dy"] = c.motion.dy;
      break;
    case MotionSpec::Kind::oscillate:
      m["axis"] = c.motion.axis;
      m["period"] = c.motion.period;
      m["amplitude"] = c.motion.amplitude;
      break;
    default:
      m["radius"] = c.motion.radius;
      m["speed"] = c.motion.speed;
  }
  return {{"class_id", c.class_id},
          {"shape", shape_kind_name(c.shape)},
          {"color", c.color},
          {"motion", m}};
}

inline SynthClass class_from_json(const nlohmann::json& j) {
  SynthClass c;
  c.class_id = j.at("class_id").get<int>();
  c.shape = shape_kind_from_name(j.at("shape").get<std::string>());
  c.color = j.at("color").get<std::array<double, 3>>();
  const auto& m = j.at("motion");
  const std::string kind = m.at("kind").get<std::string>();
  if (kind == "linear") {
    c.motion = MotionSpec::linear(m.at("dx").get<double>(), m.at("dy").get<double>());
  } else if (kind == "oscillate") {
    c.motion = MotionSpec::oscillate(m.at("axis").get<int>(), m.at("period").get<double>(),
                                     m.value("amplitude", 6.0));
  } else if (kind == "rotate_orbit") {
    c.motion = MotionSpec::orbit(m.at("radius").get<double>(), m.at("speed").get<double>());
  } else {
    throw ConfigError("unknown motion kind '" + kind + "'");
  }
  return c;
}

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["classes"] = nlohmann::json::array();
  for (const SynthClass& c : m.classes) j["classes"].push_back(class_to_json(c));
  j["clips"] = nlohmann::json::array();
  for (const ClipEntry& e : m.clips) {
    j["clips"].push_back({{"clip_id", e.clip_id},
                          {"path", e.path},
                          {"labels", e.labels},
                          {"frames", e.frame_count},
                          {"dims", {e.channels, e.height, e.width}},
                          {"audio", {e.audio_windows, e.audio_dim}},
                          {"split", e.split}});
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.version = j.at("version").get<uint32_t>();
  m.seed = j.at("seed").get<uint64_t>();
  for (const auto& c : j.at("classes")) m.classes.push_back(class_from_json(c));
  for (const auto& e : j.at("clips")) {
    ClipEntry entry;
    entry.clip_id = e.at("clip_id").get<std::string>();
    entry.path = e.at("path").get<std::string>();
    entry.labels = e.at("labels").get<std::vector<int>>();
    entry.frame_count = e.at("frames").get<size_t>();
    const auto dims = e.at("dims").get<std::vector<size_t>>();
    if (dims.size() != 3) throw ConfigError("manifest clip dims must have 3 entries");
    entry.channels = dims[0];
    entry.height = dims[1];
    entry.width = dims[2];
    const auto audio = e.at("audio").get<std::vector<size_t>>();
    if (audio.size() != 2) throw ConfigError("manifest audio field must have 2 entries");
    entry.audio_windows = audio[0];
    entry.audio_dim = audio[1];
    entry.split = e.at("split").get<std::string>();
    m.clips.push_back(std::move(entry));
  }
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << manifest_to_json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest is not valid JSON: ") + e.what(), 0);
  }
  return manifest_from_json(j);
}

/// Checks that every referenced file exists and its header matches the
/// manifest's declared dims and frame count.
inline void validate_manifest(const DatasetManifest& m, const std::filesystem::path& base_dir) {
  for (const ClipEntry& e : m.clips) {
    const auto path = base_dir / e.path;
    VideoClip clip = read_clip(path, e.clip_id);
    const auto& d = clip.frames.front().dims;
    if (clip.frames.size() != e.frame_count || d[0] != e.channels || d[1] != e.height ||
        d[2] != e.width || clip.audio.size() != e.audio_windows ||
        (!clip.audio.empty() && clip.audio.front().numel() != e.audio_dim)) {
      throw FormatError("clip '" + e.clip_id + "' at '" + path.string() +
                            "' does not match its manifest entry",
                        0);
    }
  }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

struct GenerateOptions {
  size_t clips_per_class = 200;
  size_t frames = 30;
  size_t height = 32, width = 32;
  size_t audio_windows = 8, audio_dim = 16;
  double train_ratio = 0.8, val_ratio = 0.1, test_ratio = 0.1;

  void validate() const {
    if (clips_per_class == 0) throw ConfigError("clips_per_class must be positive");
    if (std::abs(train_ratio + val_ratio + test_ratio - 1.0) > 1e-9) {
      throw ConfigError("split ratios must sum to 1");
    }
  }
};

/// Stratified split sizes for one class: val/test round, train takes the rest.
inline std::array<size_t, 3> split_counts(size_t n, const GenerateOptions& opt) {
  const size_t nval = static_cast<size_t>(std::llround(static_cast<double>(n) * opt.val_ratio));
  const size_t ntest = static_cast<size_t>(std::llround(static_cast<double>(n) * opt.test_ratio));
  if (nval + ntest > n) throw ConfigError("split ratios leave no training data");
  return {n - nval - ntest, nval, ntest};
}

/// Deterministic in-memory dataset: clip seeds derive from (seed, clip_id).
struct SynthDataset {
  std::vector<SynthClass> classes;
  std::vector<VideoClip> clips;
  std::vector<std::string> splits;  // parallel to clips

  std::vector<const VideoClip*> split_clips(const std::string& split) const {
    std::vector<const VideoClip*> out;
    for (size_t i = 0; i < clips.size(); ++i) {
      if (splits[i] == split) out.push_back(&clips[i]);
    }
    return out;
  }
};

inline SynthDataset generate_dataset(const std::vector<SynthClass>& classes,
                                     const GenerateOptions& opt, uint64_t seed) {
  if (classes.empty()) throw ConfigError("generate_dataset: empty class list");
  opt.validate();
  SynthDataset ds;
  ds.classes = classes;
  const auto counts = split_counts(opt.clips_per_class, opt);
  struct Job {
    const SynthClass* cls;
    std::string id;
    std::string split;
  };
  std::vector<Job> jobs;
  for (const SynthClass& cls : classes) {
    for (size_t i = 0; i < opt.clips_per_class; ++i) {
      const char* split = i < counts[0] ? "train" : (i < counts[0] + counts[1] ? "val" : "test");
      jobs.push_back({&cls, "c" + std::to_string(cls.class_id) + "_" + std::to_string(i), split});
    }
  }
  ds.clips.resize(jobs.size());
  ds.splits.resize(jobs.size());
  parallel_items(jobs.size(), [&](size_t i) {
    const Job& job = jobs[i];
    ds.clips[i] = generate_clip(*job.cls, opt.frames, opt.height, opt.width,
                                stream_seed(seed, job.id), job.id, opt.audio_windows,
                                opt.audio_dim);
    ds.splits[i] = job.split;
  });
  return ds;
}

/// Generates, writes every clip under out_dir/clips/, and saves manifest.json.
inline DatasetManifest write_dataset(const std::vector<SynthClass>& classes,
                                     const GenerateOptions& opt, uint64_t seed,
                                     const std::filesystem::path& out_dir) {
  SynthDataset ds = generate_dataset(classes, opt, seed);
  std::filesystem::create_directories(out_dir / "clips");
  DatasetManifest m;
  m.seed = seed;
  m.classes = classes;
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    const VideoClip& clip = ds.clips[i];
    ClipEntry e;
    e.clip_id = clip.clip_id;
    e.path = "clips/" + clip.clip_id + ".tslb";
    e.labels.assign(clip.labels.begin(), clip.labels.end());
    e.frame_count = clip.frames.size();
    e.channels = clip.frames.front().dims[0];
    e.height = clip.frames.front().dims[1];
    e.width = clip.frames.front().dims[2];
    e.audio_windows = clip.audio.size();
    e.audio_dim = clip.audio.empty() ? 0 : clip.audio.front().numel();
    e.split = ds.splits[i];
    write_clip(out_dir / e.path, clip);
    m.clips.push_back(std::move(e));
  }
  save_manifest(out_dir / "manifest.json", m);
  return m;
}

/// Loads every clip referenced by a manifest back into memory.
inline SynthDataset load_dataset(const DatasetManifest& m,
                                 const std::filesystem::path& base_dir) {
  SynthDataset ds;
  ds.classes = m.classes;
  ds.clips.resize(m.clips.size());
  ds.splits.resize(m.clips.size());
  parallel_items(m.clips.size(), [&](size_t i) {
    const ClipEntry& e = m.clips[i];
    VideoClip clip = read_clip(base_dir / e.path, e.clip_id);
    clip.labels.insert(e.labels.begin(), e.labels.end());
    ds.clips[i] = std::move(clip);
    ds.splits[i] = e.split;
  });
  return ds;
}

}  // namespace tsnet

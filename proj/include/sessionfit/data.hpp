#pragma once

// Session-structured corpus model, binary PGM image IO, and the synthetic
// generator that emulates per-session probe-placement shift: every session
// applies one rigid translation and one intensity gain to the class base
// patterns, every round adds a smaller translation jitter, and every image
// gets multiplicative speckle. Pixels are quantized to the 8-bit grid as the
// final generator step, so an in-memory corpus and its on-disk PGM form are
// bit-identical.

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "sessionfit/detmath.hpp"
#include "sessionfit/prng.hpp"
#include "sessionfit/tensor.hpp"

namespace sessionfit {

inline constexpr int kClassCount = 5;

inline const char* gesture_class_name(int id) {
  static const char* names[kClassCount] = {"open", "index", "middle", "ring", "pinky"};
  if (id < 0 || id >= kClassCount)
    throw std::invalid_argument("gesture_class_name: id out of range");
  return names[id];
}

inline int gesture_class_id(const std::string& name) {
  for (int i = 0; i < kClassCount; ++i)
    if (name == gesture_class_name(i)) return i;
  throw std::invalid_argument("gesture_class_id: unknown class '" + name + "'");
}

struct LabeledImage {
  Tensor pixels;  // [1 x H x W], values on the k/255 grid
  int label = 0;
  int session_id = 1;  // 1-based
  int round_id = 1;    // 1-based
};

using Round = std::vector<LabeledImage>;
using Session = std::vector<Round>;

struct SessionCorpus {
  int height = 0;
  int width = 0;
  std::vector<Session> sessions;

  std::size_t total_images() const {
    std::size_t n = 0;
    for (const Session& s : sessions)
      for (const Round& r : s) n += r.size();
    return n;
  }
};

struct GeneratorConfig {
  std::uint64_t seed = 1;
  int height = 64;
  int width = 64;
  int sessions_count = 7;
  int rounds_per_session = 5;
  int images_per_class_per_round = 200;
  int session_shift_px = 6;
  float session_gain_lo = 0.85f;
  float session_gain_hi = 1.15f;
  int round_jitter_px = 1;
  float speckle_sigma = 0.15f;

  void validate() const {
    if (height < 1 || width < 1)
      throw std::invalid_argument("generator: resolution must be positive");
    if (sessions_count < 1 || rounds_per_session < 1 || images_per_class_per_round < 1)
      throw std::invalid_argument("generator: counts must be positive");
    if (session_shift_px < 0 || session_shift_px >= std::min(height, width) / 4)
      throw std::invalid_argument(
          "generator: session_shift_px must satisfy 0 <= shift < min(H,W)/4");
    if (round_jitter_px < 0)
      throw std::invalid_argument("generator: round_jitter_px must be >= 0");
    if (!(speckle_sigma >= 0.0f))
      throw std::invalid_argument("generator: speckle_sigma must be >= 0");
    if (!(session_gain_lo > 0.0f) || !(session_gain_hi <= 2.0f) ||
        session_gain_lo > session_gain_hi)
      throw std::invalid_argument("generator: gain range must lie within (0, 2]");
  }
};

// ---------------------------------------------------------------------------
// Quantization and PGM IO

// Round-half-up to the 8-bit grid.
inline std::uint8_t quantize_byte(float p) {
  double v = std::floor(static_cast<double>(p) * 255.0 + 0.5);
  if (v < 0.0) v = 0.0;
  if (v > 255.0) v = 255.0;
  return static_cast<std::uint8_t>(v);
}

inline float byte_to_unit(std::uint8_t b) {
  return static_cast<float>(b) / 255.0f;
}

// Binary PGM ("P5"), maxval 255 only.
inline Tensor load_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("pgm: cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5')
    throw std::runtime_error("pgm: bad magic (expected P5) in " + path.string());
  std::size_t pos = 2;
  auto next_token = [&]() -> unsigned long {
    // skip whitespace and '#' comments
    while (pos < bytes.size()) {
      const char c = bytes[pos];
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9')
      throw std::runtime_error("pgm: malformed header in " + path.string());
    unsigned long value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      value = value * 10 + static_cast<unsigned long>(bytes[pos] - '0');
      if (value > 1000000000UL)
        throw std::runtime_error("pgm: malformed header in " + path.string());
      ++pos;
    }
    return value;
  };
  const unsigned long w = next_token();
  const unsigned long h = next_token();
  const unsigned long maxval = next_token();
  if (w == 0 || h == 0) throw std::runtime_error("pgm: malformed header in " + path.string());
  if (maxval != 255)
    throw std::runtime_error("pgm: unsupported maxval " + std::to_string(maxval) + " in " +
                             path.string());
  if (pos >= bytes.size() ||
      !(bytes[pos] == ' ' || bytes[pos] == '\t' || bytes[pos] == '\r' || bytes[pos] == '\n'))
    throw std::runtime_error("pgm: malformed header in " + path.string());
  ++pos;  // single whitespace byte separates header and payload
  const std::size_t expected = static_cast<std::size_t>(w) * h;
  if (bytes.size() - pos < expected)
    throw std::runtime_error("pgm: truncated pixel payload in " + path.string());
  if (bytes.size() - pos > expected)
    throw std::runtime_error("pgm: trailing data in " + path.string());

  Tensor out = Tensor::zeros({1, h, w});
  for (std::size_t i = 0; i < expected; ++i)
    out.data[i] = byte_to_unit(static_cast<std::uint8_t>(bytes[pos + i]));
  return out;
}

inline void save_pgm(const Tensor& pixels, const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  if (pixels.shape.size() == 3 && pixels.shape[0] == 1) {
    h = pixels.shape[1];
    w = pixels.shape[2];
  } else if (pixels.shape.size() == 2) {
    h = pixels.shape[0];
    w = pixels.shape[1];
  } else {
    throw std::invalid_argument("save_pgm: expects a [1 x H x W] or [H x W] tensor");
  }
  for (float v : pixels.data)
    if (!(v >= 0.0f && v <= 1.0f))
      throw std::invalid_argument("save_pgm: pixel values must lie in [0,1]");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("pgm: cannot open " + path.string() + " for writing");
  out << "P5\n" << w << " " << h << "\n255\n";
  std::string payload(pixels.size(), '\0');
  for (std::size_t i = 0; i < pixels.size(); ++i)
    payload[i] = static_cast<char>(quantize_byte(pixels.data[i]));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("pgm: write failed for " + path.string());
}

// ---------------------------------------------------------------------------
// Content digest (FNV-1a 64)

class Fnv1a64 {
 public:
  void update(const std::uint8_t* data, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      hash_ ^= data[i];
      hash_ *= 0x100000001B3ULL;
    }
  }
  void update_byte(std::uint8_t b) { update(&b, 1); }
  void update_u32(std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    update(b, 4);
  }
  std::uint64_t value() const { return hash_; }

 private:
  std::uint64_t hash_ = 0xCBF29CE484222325ULL;
};

inline std::string digest_hex(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s = "fnv1a64:";
  for (int shift = 60; shift >= 0; shift -= 4) s += digits[(v >> shift) & 0xF];
  return s;
}

namespace detail {

inline void digest_header(Fnv1a64& h, int height, int width, int sessions, int rounds,
                          int per_class) {
  const std::uint8_t tag[4] = {'S', 'F', 'D', '1'};
  h.update(tag, 4);
  h.update_u32(static_cast<std::uint32_t>(height));
  h.update_u32(static_cast<std::uint32_t>(width));
  h.update_u32(static_cast<std::uint32_t>(sessions));
  h.update_u32(static_cast<std::uint32_t>(rounds));
  h.update_u32(static_cast<std::uint32_t>(per_class));
}

inline void digest_image(Fnv1a64& h, const LabeledImage& img) {
  h.update_byte(static_cast<std::uint8_t>(img.label));
  for (float p : img.pixels.data) h.update_byte(quantize_byte(p));
}

}  // namespace detail

// Content hash over sessions, rounds and images in order: a fixed header,
// then per image its label byte followed by the quantized pixel bytes.
inline std::uint64_t corpus_digest(const SessionCorpus& corpus, int rounds_per_session,
                                   int images_per_class_per_round) {
  Fnv1a64 h;
  detail::digest_header(h, corpus.height, corpus.width,
                        static_cast<int>(corpus.sessions.size()), rounds_per_session,
                        images_per_class_per_round);
  for (const Session& s : corpus.sessions)
    for (const Round& r : s)
      for (const LabeledImage& img : r) detail::digest_image(h, img);
  return h.value();
}

// ---------------------------------------------------------------------------
// Synthetic generator

namespace detail {

// Deterministic class texture: three oriented sinusoidal bands plus three
// Gaussian blobs, keyed on (seed, class), normalized to [0.1, 0.9].
inline Tensor make_class_pattern(std::uint64_t seed, int class_id, int height, int width) {
  Prng rng(seed ^ ((static_cast<std::uint64_t>(class_id) + 1) * kGolden64));
  struct Band {
    double ct, st, inv_period, phase, amp;
  };
  struct Blob {
    double cx, cy, inv_two_sigma_sq, amp;
  };
  Band bands[3];
  Blob blobs[3];
  for (Band& b : bands) {
    const double theta = rng.next_unit() * 3.14159265358979323846;
    const double period = 10.0 + rng.next_unit() * 18.0;  // 10..28 px
    b.amp = 0.5 + rng.next_unit() * 0.5;
    b.phase = rng.next_unit() * detail::kTwoPi;
    b.ct = det_cos(theta);
    b.st = det_sin(theta);
    b.inv_period = 1.0 / period;
  }
  const double scale = static_cast<double>(std::min(height, width));
  for (Blob& b : blobs) {
    b.cx = (0.15 + rng.next_unit() * 0.70) * static_cast<double>(width);
    b.cy = (0.15 + rng.next_unit() * 0.70) * static_cast<double>(height);
    const double sigma = (0.10 + rng.next_unit() * 0.12) * scale;
    const double amp = 0.5 + rng.next_unit() * 0.6;
    const bool negative = (rng.next() >> 63) != 0;
    b.amp = negative ? -amp : amp;
    b.inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
  }

  std::vector<double> raw(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double v = 0.0;
      for (const Band& b : bands)
        v += b.amp * det_sin(detail::kTwoPi * (x * b.ct + y * b.st) * b.inv_period + b.phase);
      for (const Blob& b : blobs) {
        const double dx = x - b.cx;
        const double dy = y - b.cy;
        v += b.amp * det_exp(-(dx * dx + dy * dy) * b.inv_two_sigma_sq);
      }
      raw[static_cast<std::size_t>(y) * width + x] = v;
    }
  }
  double lo = raw[0], hi = raw[0];
  for (double v : raw) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  const double span = hi > lo ? hi - lo : 1.0;
  Tensor out = Tensor::zeros({1, static_cast<std::size_t>(height),
                              static_cast<std::size_t>(width)});
  for (std::size_t i = 0; i < raw.size(); ++i)
    out.data[i] = static_cast<float>(0.1 + 0.8 * (raw[i] - lo) / span);
  return out;
}

// Applies translation (zero fill), gain, speckle and 8-bit quantization.
// Consumes exactly H*W normal samples from `rng` (two raw outputs each).
inline Tensor compose_image(const Tensor& base, int shift_x, int shift_y, float gain,
                            float sigma, Prng& rng) {
  const int h = static_cast<int>(base.shape[1]);
  const int w = static_cast<int>(base.shape[2]);
  Tensor out = Tensor::zeros(base.shape);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int sx = x - shift_x;
      const int sy = y - shift_y;
      float v = 0.0f;
      if (sx >= 0 && sx < w && sy >= 0 && sy < h)
        v = base.data[static_cast<std::size_t>(sy) * w + sx];
      v *= gain;
      const double n = rng.next_normal();
      double s = static_cast<double>(v) * (1.0 + static_cast<double>(sigma) * n);
      if (s < 0.0) s = 0.0;
      if (s > 1.0) s = 1.0;
      out.data[static_cast<std::size_t>(y) * w + x] =
          byte_to_unit(quantize_byte(static_cast<float>(s)));
    }
  }
  return out;
}

// Shared generation walk. Per session a child generator seeded seed^session
// draws, in order: shift_x, shift_y, gain; per round: jitter_x, jitter_y;
// per image: H*W speckle normals. Rounds list images class-major.
template <typename Sink>
void generate_images(const GeneratorConfig& config, Sink&& sink) {
  config.validate();
  std::vector<Tensor> patterns;
  patterns.reserve(kClassCount);
  for (int c = 0; c < kClassCount; ++c)
    patterns.push_back(make_class_pattern(config.seed, c, config.height, config.width));

  for (int s = 1; s <= config.sessions_count; ++s) {
    Prng rng(config.seed ^ static_cast<std::uint64_t>(s));
    const int sdx = static_cast<int>(rng.next_int(-config.session_shift_px, config.session_shift_px));
    const int sdy = static_cast<int>(rng.next_int(-config.session_shift_px, config.session_shift_px));
    const float gain = config.session_gain_lo == config.session_gain_hi
                           ? config.session_gain_lo
                           : rng.next_uniform(config.session_gain_lo, config.session_gain_hi);
    for (int r = 1; r <= config.rounds_per_session; ++r) {
      const int rdx = static_cast<int>(rng.next_int(-config.round_jitter_px, config.round_jitter_px));
      const int rdy = static_cast<int>(rng.next_int(-config.round_jitter_px, config.round_jitter_px));
      for (int c = 0; c < kClassCount; ++c) {
        for (int i = 0; i < config.images_per_class_per_round; ++i) {
          LabeledImage img;
          img.pixels = compose_image(patterns[static_cast<std::size_t>(c)], sdx + rdx,
                                     sdy + rdy, gain, config.speckle_sigma, rng);
          img.label = c;
          img.session_id = s;
          img.round_id = r;
          sink(std::move(img));
        }
      }
    }
  }
}

}  // namespace detail

inline SessionCorpus generate_corpus(const GeneratorConfig& config) {
  SessionCorpus corpus;
  corpus.height = config.height;
  corpus.width = config.width;
  corpus.sessions.resize(static_cast<std::size_t>(config.sessions_count));
  for (Session& s : corpus.sessions)
    s.resize(static_cast<std::size_t>(config.rounds_per_session));
  detail::generate_images(config, [&](LabeledImage&& img) {
    corpus.sessions[static_cast<std::size_t>(img.session_id - 1)]
        [static_cast<std::size_t>(img.round_id - 1)]
            .push_back(std::move(img));
  });
  return corpus;
}

inline std::uint64_t corpus_digest(const SessionCorpus& corpus, const GeneratorConfig& config) {
  return corpus_digest(corpus, config.rounds_per_session, config.images_per_class_per_round);
}

// ---------------------------------------------------------------------------
// Corpus directory layout:
//   root/session_<s>/round_<r>/class_<c>/img_<i>.pgm  plus root/manifest.json

inline nlohmann::json generator_config_json(const GeneratorConfig& c) {
  return nlohmann::json{{"seed", c.seed},
                        {"height", c.height},
                        {"width", c.width},
                        {"sessions", c.sessions_count},
                        {"rounds_per_session", c.rounds_per_session},
                        {"images_per_class_per_round", c.images_per_class_per_round},
                        {"session_shift_px", c.session_shift_px},
                        {"session_gain_lo", c.session_gain_lo},
                        {"session_gain_hi", c.session_gain_hi},
                        {"round_jitter_px", c.round_jitter_px},
                        {"speckle_sigma", c.speckle_sigma}};
}

inline std::filesystem::path corpus_image_path(const std::filesystem::path& root, int s, int r,
                                               int c, int i) {
  char name[32];
  std::snprintf(name, sizeof(name), "img_%04d.pgm", i);
  return root / ("session_" + std::to_string(s)) / ("round_" + std::to_string(r)) /
         ("class_" + std::to_string(c)) / name;
}

// Streams the generated corpus to disk (one round held in memory at a time)
// and writes the manifest. Returns the content digest.
inline std::uint64_t write_corpus(const GeneratorConfig& config,
                                  const std::filesystem::path& root) {
  config.validate();
  std::filesystem::create_directories(root);
  if (std::filesystem::exists(root / "manifest.json"))
    throw std::runtime_error("write_corpus: refusing to overwrite existing manifest in " +
                             root.string());

  Fnv1a64 digest;
  detail::digest_header(digest, config.height, config.width, config.sessions_count,
                        config.rounds_per_session, config.images_per_class_per_round);
  std::vector<int> written_per_class(kClassCount, 0);
  int cur_session = 0, cur_round = 0;
  detail::generate_images(config, [&](LabeledImage&& img) {
    if (img.session_id != cur_session || img.round_id != cur_round) {
      cur_session = img.session_id;
      cur_round = img.round_id;
      std::fill(written_per_class.begin(), written_per_class.end(), 0);
      for (int c = 0; c < kClassCount; ++c)
        std::filesystem::create_directories(
            corpus_image_path(root, cur_session, cur_round, c, 0).parent_path());
    }
    detail::digest_image(digest, img);
    const int index = written_per_class[static_cast<std::size_t>(img.label)]++;
    save_pgm(img.pixels, corpus_image_path(root, img.session_id, img.round_id, img.label, index));
  });

  nlohmann::json manifest{
      {"schema_version", 1},
      {"kind", "sessionfit-corpus"},
      {"classes", kClassCount},
      {"class_names", {"open", "index", "middle", "ring", "pinky"}},
      {"height", config.height},
      {"width", config.width},
      {"sessions", config.sessions_count},
      {"rounds_per_session", config.rounds_per_session},
      {"images_per_class_per_round", config.images_per_class_per_round},
      {"digest", digest_hex(digest.value())},
      {"generator", generator_config_json(config)}};
  std::ofstream out(root / "manifest.json");
  if (!out) throw std::runtime_error("write_corpus: cannot write manifest in " + root.string());
  out << manifest.dump(2) << "\n";
  return digest.value();
}

// Loads a corpus directory and verifies its digest against the manifest.
inline SessionCorpus load_corpus(const std::filesystem::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw std::runtime_error("load_corpus: missing manifest.json in " + root.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("load_corpus: malformed manifest: " + std::string(e.what()));
  }
  if (manifest.value("kind", "") != "sessionfit-corpus")
    throw std::runtime_error("load_corpus: not a corpus manifest: " + root.string());
  const int sessions = manifest.at("sessions").get<int>();
  const int rounds = manifest.at("rounds_per_session").get<int>();
  const int per_class = manifest.at("images_per_class_per_round").get<int>();
  const int height = manifest.at("height").get<int>();
  const int width = manifest.at("width").get<int>();

  SessionCorpus corpus;
  corpus.height = height;
  corpus.width = width;
  corpus.sessions.resize(static_cast<std::size_t>(sessions));
  for (int s = 1; s <= sessions; ++s) {
    Session& session = corpus.sessions[static_cast<std::size_t>(s - 1)];
    session.resize(static_cast<std::size_t>(rounds));
    for (int r = 1; r <= rounds; ++r) {
      Round& round = session[static_cast<std::size_t>(r - 1)];
      for (int c = 0; c < kClassCount; ++c) {
        for (int i = 0; i < per_class; ++i) {
          LabeledImage img;
          img.pixels = load_pgm(corpus_image_path(root, s, r, c, i));
          if (img.pixels.shape[1] != static_cast<std::size_t>(height) ||
              img.pixels.shape[2] != static_cast<std::size_t>(width))
            throw std::runtime_error("load_corpus: image resolution mismatch");
          img.label = c;
          img.session_id = s;
          img.round_id = r;
          round.push_back(std::move(img));
        }
      }
    }
  }
  const std::uint64_t digest = corpus_digest(corpus, rounds, per_class);
  if (digest_hex(digest) != manifest.at("digest").get<std::string>())
    throw std::runtime_error("load_corpus: content digest mismatch in " + root.string());
  return corpus;
}

}  // namespace sessionfit

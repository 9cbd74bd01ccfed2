#include "mav/media_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mav/error.hpp"

namespace fs = std::filesystem;

namespace mav {

namespace {

[[noreturn]] void fail_io(const std::string& path, const std::string& what, long offset = -1) {
  std::string msg = path + ": " + what;
  if (offset >= 0) msg += " (byte offset " + std::to_string(offset) + ")";
  throw IoError(msg);
}

// Reads one whitespace/comment-delimited PNM header token.
std::string pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (!std::isspace(c)) {
      tok.push_back(static_cast<char>(c));
      while ((c = in.peek()) != EOF && !std::isspace(c) && c != '#') tok.push_back(static_cast<char>(in.get()));
      return tok;
    }
  }
  fail_io(path, "truncated header", static_cast<long>(in.tellg()));
}

long parse_dim(const std::string& tok, const std::string& path, std::istream& in) {
  try {
    std::size_t pos = 0;
    long v = std::stol(tok, &pos);
    if (pos != tok.size() || v <= 0) throw std::invalid_argument(tok);
    return v;
  } catch (const std::exception&) {
    fail_io(path, "malformed header field '" + tok + "'", static_cast<long>(in.tellg()));
  }
}

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4))
    fail_io(path, "truncated payload", static_cast<long>(in.tellg()));
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32(std::ostream& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, 4);
  put_u32(out, u);
}

float get_f32(std::istream& in, const std::string& path) {
  std::uint32_t u = get_u32(in, path);
  float v;
  std::memcpy(&v, &u, 4);
  return v;
}

constexpr float kFloMagic = 202021.25f;

}  // namespace

// --- images -----------------------------------------------------------------

Tensor<float> read_pgm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io(path, "cannot open");
  std::string magic = pnm_token(in, path);
  if (magic != "P5") fail_io(path, "expected binary PGM magic P5, got '" + magic + "'", 0);
  const long w = parse_dim(pnm_token(in, path), path, in);
  const long h = parse_dim(pnm_token(in, path), path, in);
  const long maxval = parse_dim(pnm_token(in, path), path, in);
  if (maxval != 255 && maxval != 65535)
    fail_io(path, "unsupported maxval " + std::to_string(maxval), static_cast<long>(in.tellg()));
  in.get();  // single whitespace after maxval

  Tensor<float> img(Shape{h, w});
  float* p = img.data();
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const long payload_start = static_cast<long>(in.tellg());
  if (maxval == 255) {
    std::vector<unsigned char> buf(n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n)))
      fail_io(path, "truncated payload", payload_start + static_cast<long>(in.gcount()));
    for (std::size_t i = 0; i < n; ++i) p[i] = buf[i] / 255.0f;
  } else {
    std::vector<unsigned char> buf(2 * n);
    if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(2 * n)))
      fail_io(path, "truncated payload", payload_start + static_cast<long>(in.gcount()));
    for (std::size_t i = 0; i < n; ++i) {
      const unsigned v = (static_cast<unsigned>(buf[2 * i]) << 8) | buf[2 * i + 1];  // big-endian
      p[i] = static_cast<float>(v) / 65535.0f;
    }
  }
  return img;
}

void write_pgm(const std::string& path, const Tensor<float>& img) {
  if (img.rank() != 2) throw ShapeError("write_pgm: expected HxW image, got " + img.shape().str());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io(path, "cannot open for writing");
  out << "P5\n" << img.extent(1) << " " << img.extent(0) << "\n255\n";
  const float* p = img.data();
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.numel()));
  for (Index i = 0; i < img.numel(); ++i) {
    const double q = std::floor(static_cast<double>(p[i]) * 255.0 + 0.5);
    buf[static_cast<std::size_t>(i)] = static_cast<unsigned char>(std::clamp(q, 0.0, 255.0));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) fail_io(path, "write failed");
}

Tensor<float> read_image(const std::string& path) {
  std::ifstream probe(path, std::ios::binary);
  if (!probe) fail_io(path, "cannot open");
  char m[2] = {0, 0};
  probe.read(m, 2);
  probe.close();
  if (m[0] == 'P' && m[1] == '5') return read_pgm(path);
  if (m[0] != 'P' || m[1] != '6') fail_io(path, "expected P5 or P6 magic", 0);

  std::ifstream in(path, std::ios::binary);
  pnm_token(in, path);  // magic, already checked
  const long w = parse_dim(pnm_token(in, path), path, in);
  const long h = parse_dim(pnm_token(in, path), path, in);
  const long maxval = parse_dim(pnm_token(in, path), path, in);
  if (maxval != 255) fail_io(path, "unsupported PPM maxval " + std::to_string(maxval));
  in.get();
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<unsigned char> buf(3 * n);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(3 * n)))
    fail_io(path, "truncated payload", static_cast<long>(in.tellg()));
  Tensor<float> img(Shape{h, w});
  float* p = img.data();
  for (std::size_t i = 0; i < n; ++i)
    p[i] = static_cast<float>((0.299 * buf[3 * i] + 0.587 * buf[3 * i + 1] + 0.114 * buf[3 * i + 2]) / 255.0);
  return img;
}

// --- optical flow -------------------------------------------------------------

Tensor<float> read_flo(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io(path, "cannot open");
  const float magic = get_f32(in, path);
  if (magic != kFloMagic) fail_io(path, "not a .flo file", 0);
  const std::int32_t w = static_cast<std::int32_t>(get_u32(in, path));
  const std::int32_t h = static_cast<std::int32_t>(get_u32(in, path));
  if (w <= 0 || h <= 0) fail_io(path, "bad dimensions", 4);
  Tensor<float> flow(Shape{h, w, 2});
  float* p = flow.data();
  for (Index i = 0; i < flow.numel(); ++i) p[i] = get_f32(in, path);
  return flow;
}

void write_flo(const std::string& path, const Tensor<float>& flow) {
  if (flow.rank() != 3 || flow.extent(2) != 2)
    throw ShapeError("write_flo: expected HxWx2 field, got " + flow.shape().str());
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io(path, "cannot open for writing");
  put_f32(out, kFloMagic);
  put_u32(out, static_cast<std::uint32_t>(flow.extent(1)));
  put_u32(out, static_cast<std::uint32_t>(flow.extent(0)));
  const float* p = flow.data();
  for (Index i = 0; i < flow.numel(); ++i) put_f32(out, p[i]);
  if (!out) fail_io(path, "write failed");
}

// --- weight store -------------------------------------------------------------

void WeightStore::put(const std::string& name, const Tensor<float>& t) {
  for (auto& e : entries)
    if (e.first == name) throw ValueError("WeightStore: duplicate name '" + name + "'");
  entries.emplace_back(name, t);
}

const Tensor<float>* WeightStore::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.first == name) return &e.second;
  return nullptr;
}

void save_weights(const std::string& path, const WeightStore& store) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io(path, "cannot open for writing");
  out.write("MAVW", 4);
  put_u32(out, 1);
  put_u32(out, static_cast<std::uint32_t>(store.entries.size()));
  for (const auto& [name, t] : store.entries) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) put_u32(out, static_cast<std::uint32_t>(t.extent(i)));
    const float* p = t.data();
    for (Index i = 0; i < t.numel(); ++i) put_f32(out, p[i]);
  }
  if (!out) fail_io(path, "write failed");
}

WeightStore load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io(path, "cannot open");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MAVW", 4) != 0)
    fail_io(path, "bad magic, not a MAVW weight file", 0);
  const std::uint32_t version = get_u32(in, path);
  if (version != 1) fail_io(path, "unsupported version " + std::to_string(version), 4);
  const std::uint32_t count = get_u32(in, path);
  WeightStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(in, path);
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) fail_io(path, "truncated name", static_cast<long>(in.tellg()));
    const std::uint32_t rank = get_u32(in, path);
    if (rank < 1 || rank > 4) fail_io(path, "bad tensor rank " + std::to_string(rank));
    std::vector<Index> ext(rank);
    Index numel = 1;
    for (auto& e : ext) {
      e = static_cast<Index>(get_u32(in, path));
      numel *= e;
    }
    Shape shape = rank == 1   ? Shape{ext[0]}
                  : rank == 2 ? Shape{ext[0], ext[1]}
                  : rank == 3 ? Shape{ext[0], ext[1], ext[2]}
                              : Shape{ext[0], ext[1], ext[2], ext[3]};
    Tensor<float> t(shape);
    float* p = t.data();
    for (Index j = 0; j < numel; ++j) p[j] = get_f32(in, path);
    store.put(name, t);
  }
  return store;
}

// --- fusion config ------------------------------------------------------------

void FusionConfig::validate() const {
  if (tau <= 0.0 || tau > 1.0) throw ValueError("config: tau must be in (0,1]");
  if (patch < 2) throw ValueError("config: patch must be >= 2");
  if (k_max < 1) throw ValueError("config: k_max must be >= 1");
  if (channels < 1) throw ValueError("config: channels must be >= 1");
  if (gamma < 0.0) throw ValueError("config: gamma must be >= 0");
  if (gate_theta < 0.0 || gate_theta > 1.0) throw ValueError("config: gate_theta must be in [0,1]");
  if (lr <= 0.0) throw ValueError("config: lr must be > 0");
  if (iters < 1) throw ValueError("config: iters must be >= 1");
  if (crop < 16) throw ValueError("config: crop must be >= 16");
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::full_db: return "full_db";
    case Variant::full_sb: return "full_sb";
    case Variant::inverted_mask: return "inverted_mask";
    case Variant::dense_attention: return "dense_attention";
    case Variant::no_mafm: return "no_mafm";
  }
  throw ValueError("variant_name: bad enum");
}

Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::full, Variant::full_db, Variant::full_sb, Variant::inverted_mask,
                    Variant::dense_attention, Variant::no_mafm})
    if (variant_name(v) == s) return v;
  throw ValueError("unknown variant '" + s + "'");
}

std::string kv_mode_name(ConfigKvMode m) {
  return m == ConfigKvMode::all_patches ? "all_patches" : "global_token_only";
}

ConfigKvMode kv_mode_from_name(const std::string& s) {
  if (s == "all_patches") return ConfigKvMode::all_patches;
  if (s == "global_token_only") return ConfigKvMode::global_token_only;
  throw ValueError("unknown kv_mode '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void config_fail(const std::string& path, int line, const std::string& what) {
  throw IoError(path + ":" + std::to_string(line) + ": " + what);
}

}  // namespace

FusionConfig read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_io(path, "cannot open");
  FusionConfig cfg;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) config_fail(path, lineno, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (value.empty()) config_fail(path, lineno, "missing value for '" + key + "'");
    try {
      if (key == "tau")
        cfg.tau = std::stod(value);
      else if (key == "patch")
        cfg.patch = std::stoi(value);
      else if (key == "k_max")
        cfg.k_max = std::stoi(value);
      else if (key == "channels")
        cfg.channels = std::stoi(value);
      else if (key == "gamma")
        cfg.gamma = std::stod(value);
      else if (key == "gate_theta")
        cfg.gate_theta = std::stod(value);
      else if (key == "variant")
        cfg.variant = variant_from_name(value);
      else if (key == "kv_mode")
        cfg.kv_mode = kv_mode_from_name(value);
      else if (key == "seed")
        cfg.seed = std::stoull(value);
      else if (key == "lr")
        cfg.lr = std::stod(value);
      else if (key == "iters")
        cfg.iters = std::stoi(value);
      else if (key == "crop")
        cfg.crop = std::stoi(value);
      else
        config_fail(path, lineno, "unknown key '" + key + "'");
    } catch (const IoError&) {
      throw;
    } catch (const std::exception& e) {
      config_fail(path, lineno, "cannot parse value '" + value + "' for '" + key + "': " + e.what());
    }
  }
  try {
    cfg.validate();
  } catch (const ValueError& e) {
    throw IoError(path + ": " + e.what());
  }
  return cfg;
}

std::string format_config(const FusionConfig& cfg) {
  std::ostringstream os;
  char buf[64];
  auto fmt = [&](double v) {
    std::snprintf(buf, sizeof buf, "%g", v);
    return std::string(buf);
  };
  os << "tau = " << fmt(cfg.tau) << "\n";
  os << "patch = " << cfg.patch << "\n";
  os << "k_max = " << cfg.k_max << "\n";
  os << "channels = " << cfg.channels << "\n";
  os << "gamma = " << fmt(cfg.gamma) << "\n";
  os << "gate_theta = " << fmt(cfg.gate_theta) << "\n";
  os << "variant = " << variant_name(cfg.variant) << "\n";
  os << "kv_mode = " << kv_mode_name(cfg.kv_mode) << "\n";
  os << "seed = " << cfg.seed << "\n";
  os << "lr = " << fmt(cfg.lr) << "\n";
  os << "iters = " << cfg.iters << "\n";
  os << "crop = " << cfg.crop << "\n";
  return os.str();
}

void write_config(const std::string& path, const FusionConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io(path, "cannot open for writing");
  out << format_config(cfg);
  if (!out) fail_io(path, "write failed");
}

// --- directories and CSV --------------------------------------------------------

std::vector<std::string> list_frames(const std::string& dir) {
  if (!fs::is_directory(dir)) fail_io(dir, "not a directory");
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".ppm") files.push_back(entry.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

std::vector<Tensor<float>> read_frame_dir(const std::string& dir) {
  std::vector<Tensor<float>> frames;
  for (const auto& f : list_frames(dir)) frames.push_back(read_image(f));
  if (frames.empty()) fail_io(dir, "no .pgm/.ppm frames found");
  for (std::size_t i = 1; i < frames.size(); ++i)
    if (frames[i].shape() != frames[0].shape())
      fail_io(list_frames(dir)[i], "frame size " + frames[i].shape().str() +
                                       " differs from first frame " + frames[0].shape().str());
  return frames;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail_io(dir, "cannot create directory: " + ec.message());
}

std::string csv_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary);  // binary keeps LF endings
  if (!out) fail_io(path, "cannot open for writing");
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << "\n";
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << row[i];
    out << "\n";
  }
  if (!out) fail_io(path, "write failed");
}

}  // namespace mav

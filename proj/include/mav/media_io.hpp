#pragma once

// Bit-exact file interchange: binary PGM/PPM frames, Middlebury .flo flow
// fields, the MAVW named-tensor weight container, flat key=value config
// files, and frame-directory helpers. All multi-byte integers and floats in
// .flo and .mavw files are little-endian; 16-bit PGM samples are big-endian
// per the netpbm convention.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mav/tensor.hpp"

namespace mav {

// --- images ---------------------------------------------------------------

// Binary PGM (P5), maxval 255 or 65535 -> gray H x W in [0,1].
Tensor<float> read_pgm(const std::string& path);

// Writes maxval-255 binary PGM with round-half-up quantization.
void write_pgm(const std::string& path, const Tensor<float>& img);

// P5 or P6; color converts to luma 0.299R + 0.587G + 0.114B.
Tensor<float> read_image(const std::string& path);

// --- optical flow ----------------------------------------------------------

Tensor<float> read_flo(const std::string& path);
void write_flo(const std::string& path, const Tensor<float>& flow);

// --- weight store ----------------------------------------------------------

// Ordered named float32 tensors. File layout: magic "MAVW", u32 version = 1,
// u32 tensor count, then per tensor: u32 name length, name bytes, u32 rank,
// u32 extents[rank], float32 values.
struct WeightStore {
  std::vector<std::pair<std::string, Tensor<float>>> entries;

  void put(const std::string& name, const Tensor<float>& t);
  const Tensor<float>* find(const std::string& name) const;
};

void save_weights(const std::string& path, const WeightStore& store);
WeightStore load_weights(const std::string& path);

// --- fusion config ---------------------------------------------------------

enum class Variant { full, full_db, full_sb, inverted_mask, dense_attention, no_mafm };
enum class ConfigKvMode { all_patches, global_token_only };

struct FusionConfig {
  double tau = 0.25;
  int patch = 8;
  int k_max = 256;
  int channels = 16;
  double gamma = 1.0;
  double gate_theta = 0.5;
  Variant variant = Variant::full;
  ConfigKvMode kv_mode = ConfigKvMode::all_patches;
  std::uint64_t seed = 0;
  double lr = 1e-4;
  int iters = 300;
  int crop = 64;

  void validate() const;
};

std::string variant_name(Variant v);
Variant variant_from_name(const std::string& s);
std::string kv_mode_name(ConfigKvMode m);
ConfigKvMode kv_mode_from_name(const std::string& s);

// Flat "key = value" file, '#' comments, unknown keys rejected with the
// offending line number.
FusionConfig read_config(const std::string& path);
void write_config(const std::string& path, const FusionConfig& cfg);
std::string format_config(const FusionConfig& cfg);

// --- directories and CSV ---------------------------------------------------

// Sorted list of .pgm/.ppm files in a directory.
std::vector<std::string> list_frames(const std::string& dir);
std::vector<Tensor<float>> read_frame_dir(const std::string& dir);
void ensure_dir(const std::string& dir);

// Deterministic CSV writer: LF line endings, values with 6 decimals.
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::string csv_value(double v);

}  // namespace mav

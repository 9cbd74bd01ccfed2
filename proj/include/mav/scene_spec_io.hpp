#pragma once

// Scene spec files: flat "key = value" lines with '#' comments. The repeated
// key `object` takes "shape size x0 y0 vx vy ir_intensity vis_intensity"
// with shape in {rectangle, disk}.

#include <fstream>
#include <sstream>
#include <string>

#include "mav/error.hpp"
#include "mav/synth.hpp"

namespace mav {

inline SceneSpec read_scene_spec(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path + ": cannot open");
  SceneSpec spec;
  spec.objects.clear();
  std::string raw;
  int lineno = 0;
  auto fail = [&](const std::string& what) -> void {
    throw IoError(path + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = raw;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const auto e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail("expected 'key = value'");
    std::istringstream key_in(line.substr(0, eq));
    std::string key;
    key_in >> key;
    std::istringstream val(line.substr(eq + 1));
    try {
      if (key == "seed")
        val >> spec.seed;
      else if (key == "height")
        val >> spec.height;
      else if (key == "width")
        val >> spec.width;
      else if (key == "frames")
        val >> spec.frames;
      else if (key == "vis_texture_amp")
        val >> spec.vis_texture_amp;
      else if (key == "ir_base")
        val >> spec.ir_base;
      else if (key == "noise_ir")
        val >> spec.noise_ir;
      else if (key == "noise_vis")
        val >> spec.noise_vis;
      else if (key == "object") {
        ObjectSpec obj;
        std::string shape;
        val >> shape >> obj.size >> obj.x0 >> obj.y0 >> obj.vx >> obj.vy >> obj.ir_intensity >>
            obj.vis_intensity;
        if (shape == "rectangle")
          obj.kind = ObjectSpec::Kind::rectangle;
        else if (shape == "disk")
          obj.kind = ObjectSpec::Kind::disk;
        else
          fail("unknown object shape '" + shape + "'");
        if (val.fail()) fail("object needs: shape size x0 y0 vx vy ir vis");
        spec.objects.push_back(obj);
      } else {
        fail("unknown key '" + key + "'");
      }
      if (key != "object" && val.fail()) fail("cannot parse value for '" + key + "'");
    } catch (const IoError&) {
      throw;
    }
  }
  if (spec.height < 16 || spec.width < 16 || spec.frames < 1)
    throw IoError(path + ": scene must be at least 16x16 with one frame");
  return spec;
}

inline void write_scene_spec(const std::string& path, const SceneSpec& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << "seed = " << spec.seed << "\n";
  out << "height = " << spec.height << "\n";
  out << "width = " << spec.width << "\n";
  out << "frames = " << spec.frames << "\n";
  out << "vis_texture_amp = " << spec.vis_texture_amp << "\n";
  out << "ir_base = " << spec.ir_base << "\n";
  out << "noise_ir = " << spec.noise_ir << "\n";
  out << "noise_vis = " << spec.noise_vis << "\n";
  for (const auto& obj : spec.objects)
    out << "object = " << (obj.kind == ObjectSpec::Kind::rectangle ? "rectangle" : "disk") << " "
        << obj.size << " " << obj.x0 << " " << obj.y0 << " " << obj.vx << " " << obj.vy << " "
        << obj.ir_intensity << " " << obj.vis_intensity << "\n";
}

}  // namespace mav

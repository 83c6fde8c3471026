#pragma once

// Synthetic datasets and directory ingestion. Fine-grained scenes share a
// common background and body shape and differ only in a small glyph marker,
// so telling classes apart requires finding and reading the marker among
// look-alike distractors. Two-object scenes place two class glyphs with
// disjoint boxes; the first is the label. Bright mode draws the marker on an
// otherwise black image for localization sanity checks.
//
// On disk: root/<class>/<name>.png, plus boxes.csv
// (filename,class,x0,y0,x1,y1 with x1/y1 exclusive) and gen.cfg metadata.

#include <map>
#include <string>
#include <vector>

#include "tdam/image.hpp"
#include "tdam/rng.hpp"

namespace tdam {

struct GtBox {
  int cls = 0;
  float x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  float area() const { return (x1 - x0) * (y1 - y0); }
};

struct SynthSample {
  ImageF image;
  int label = 0;
  std::vector<GtBox> boxes;
  std::string name;  // "class03/img0012.png"
};

struct Dataset {
  int classes = 0;
  std::vector<std::string> class_names;
  std::vector<SynthSample> samples;

  int size() const { return static_cast<int>(samples.size()); }
};

struct FineGrainedOpts {
  int classes = 10;
  int per_class = 200;
  int size = 32;
  int marker_scale = 1;      // glyph cell size in pixels (glyphs are 5x5 cells)
  int distractors = 3;       // non-class glyphs sprinkled per image
  float noise = 0.03f;
  bool base_shape = true;
  bool black_background = false;  // bright-object mode: marker on zeros
};

Dataset gen_fine_grained(const FineGrainedOpts& opts, Rng& rng);

struct TwoObjectOpts {
  int classes = 6;
  int per_class = 150;
  int size = 32;
  int obj_scale = 2;  // glyph cell size; objects are 5x5 cells
  float noise = 0.03f;
};

Dataset gen_two_object(const TwoObjectOpts& opts, Rng& rng);

// the fixed 5x5 glyph pattern for a class id (distractors use ids >= classes)
std::vector<uint8_t> glyph_pattern(int id);

void save_dataset(const Dataset& ds, const std::string& root,
                  const std::map<std::string, std::string>& manifest);
Dataset load_image_dir(const std::string& root, int resize_to = 0);

// deterministic stratified split: the last ceil(val_frac * n) samples of each
// class go to validation
struct Split {
  std::vector<int> train, val;
};
Split split_dataset(const Dataset& ds, float val_frac);

}  // namespace tdam

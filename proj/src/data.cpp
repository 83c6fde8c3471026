#include "tdam/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

namespace fs = std::filesystem;

namespace tdam {

namespace {

constexpr uint64_t kGlyphTableSeed = 0x7d0f3a41c2b85e19ULL;

// non-overlap here means the axis-aligned boxes do not intersect at all
bool boxes_disjoint(const GtBox& a, const GtBox& b) {
  return a.x1 <= b.x0 || b.x1 <= a.x0 || a.y1 <= b.y0 || b.y1 <= a.y0;
}

void fill_background(ImageF& img, Rng& rng, float noise, bool black) {
  if (black) return;  // stays zero
  float base[3];
  for (auto& v : base) v = static_cast<float>(rng.uniform(0.2, 0.4));
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h; ++y)
      for (int x = 0; x < img.w; ++x) img.at(c, y, x) = base[c];
  if (noise > 0)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
          float v = img.at(c, y, x) + static_cast<float>(rng.uniform(-noise, noise));
          img.at(c, y, x) = std::min(1.f, std::max(0.f, v));
        }
}

void draw_ellipse(ImageF& img, Rng& rng) {
  const int s = img.w;
  const float cx = static_cast<float>(rng.uniform(s * 0.3, s * 0.7));
  const float cy = static_cast<float>(rng.uniform(s * 0.3, s * 0.7));
  const float rx = static_cast<float>(rng.uniform(s * 0.18, s * 0.34));
  const float ry = static_cast<float>(rng.uniform(s * 0.18, s * 0.34));
  float col[3];
  for (auto& v : col) v = static_cast<float>(rng.uniform(0.35, 0.65));
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x) {
      const float dx = (x + 0.5f - cx) / rx, dy = (y + 0.5f - cy) / ry;
      if (dx * dx + dy * dy <= 1.f)
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
    }
}

// glyph cells: on-cells bright, off-cells dark; the whole patch overwrites
void draw_glyph(ImageF& img, const std::vector<uint8_t>& pattern, int x0, int y0,
                int cell, Rng& rng, bool bright_mode) {
  const float on = bright_mode ? 1.0f : static_cast<float>(rng.uniform(0.75, 1.0));
  const float off = bright_mode ? 0.0f : static_cast<float>(rng.uniform(0.0, 0.12));
  for (int gy = 0; gy < 5; ++gy)
    for (int gx = 0; gx < 5; ++gx) {
      const float v = pattern[gy * 5 + gx] ? on : off;
      for (int yy = 0; yy < cell; ++yy)
        for (int xx = 0; xx < cell; ++xx)
          for (int c = 0; c < 3; ++c)
            img.at(c, y0 + gy * cell + yy, x0 + gx * cell + xx) = v;
    }
}

std::string class_dir_name(int cls) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "class%02d", cls);
  return buf;
}

std::string image_file_name(int idx) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "img%04d.png", idx);
  return buf;
}

}  // namespace

std::vector<uint8_t> glyph_pattern(int id) {
  // deterministic 5x5 patterns with 10..15 on-cells, independent of dataset
  // seeds so class identity is stable across generations
  uint64_t state = kGlyphTableSeed + static_cast<uint64_t>(id) * 0x9e3779b97f4a7c15ULL;
  for (int attempt = 0; attempt < 256; ++attempt) {
    const uint64_t bits = splitmix64(state);
    std::vector<uint8_t> p(25);
    int on = 0;
    for (int i = 0; i < 25; ++i) {
      p[i] = (bits >> i) & 1;
      on += p[i];
    }
    if (on >= 10 && on <= 15) return p;
  }
  throw std::logic_error("glyph_pattern: no pattern found");
}

Dataset gen_fine_grained(const FineGrainedOpts& opts, Rng& rng) {
  if (opts.classes < 2) throw std::invalid_argument("gen_fine_grained: need >= 2 classes");
  const int cell = std::max(1, opts.marker_scale);
  const int mpx = 5 * cell;
  if (mpx > opts.size)
    throw std::invalid_argument(cat("gen_fine_grained: marker ", mpx,
                                    "px exceeds image size ", opts.size));
  Dataset ds;
  ds.classes = opts.classes;
  for (int c = 0; c < opts.classes; ++c) ds.class_names.push_back(class_dir_name(c));

  for (int cls = 0; cls < opts.classes; ++cls) {
    const auto pattern = glyph_pattern(cls);
    for (int i = 0; i < opts.per_class; ++i) {
      SynthSample s;
      s.label = cls;
      s.name = class_dir_name(cls) + "/" + image_file_name(i);
      s.image = ImageF(opts.size, opts.size, 0.f);
      fill_background(s.image, rng, opts.noise, opts.black_background);
      if (opts.base_shape && !opts.black_background) draw_ellipse(s.image, rng);

      const int mx = rng.range_int(0, opts.size - mpx + 1);
      const int my = rng.range_int(0, opts.size - mpx + 1);
      const GtBox marker_box{cls, static_cast<float>(mx), static_cast<float>(my),
                             static_cast<float>(mx + mpx), static_cast<float>(my + mpx)};

      // distractor glyphs first so the class marker is never occluded
      for (int d = 0; d < opts.distractors; ++d) {
        const auto dpat = glyph_pattern(opts.classes + rng.range_int(0, 5));
        for (int attempt = 0; attempt < 50; ++attempt) {
          const int dx = rng.range_int(0, opts.size - mpx + 1);
          const int dy = rng.range_int(0, opts.size - mpx + 1);
          const GtBox db{-1, static_cast<float>(dx), static_cast<float>(dy),
                         static_cast<float>(dx + mpx), static_cast<float>(dy + mpx)};
          if (boxes_disjoint(db, marker_box)) {
            draw_glyph(s.image, dpat, dx, dy, cell, rng, false);
            break;
          }
        }
      }
      draw_glyph(s.image, pattern, mx, my, cell, rng, opts.black_background);
      s.boxes.push_back(marker_box);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Dataset gen_two_object(const TwoObjectOpts& opts, Rng& rng) {
  if (opts.classes < 2) throw std::invalid_argument("gen_two_object: need >= 2 classes");
  const int cell = std::max(1, opts.obj_scale);
  const int opx = 5 * cell;
  if (2 * opx > opts.size)
    throw std::invalid_argument(cat("gen_two_object: two ", opx,
                                    "px objects cannot fit in ", opts.size));
  Dataset ds;
  ds.classes = opts.classes;
  for (int c = 0; c < opts.classes; ++c) ds.class_names.push_back(class_dir_name(c));

  for (int cls = 0; cls < opts.classes; ++cls) {
    for (int i = 0; i < opts.per_class; ++i) {
      SynthSample s;
      s.label = cls;
      s.name = class_dir_name(cls) + "/" + image_file_name(i);
      s.image = ImageF(opts.size, opts.size, 0.f);
      fill_background(s.image, rng, opts.noise, false);

      int other = rng.range_int(0, opts.classes - 1);
      if (other >= cls) ++other;  // distinct class

      const int px = rng.range_int(0, opts.size - opx + 1);
      const int py = rng.range_int(0, opts.size - opx + 1);
      const GtBox primary{cls, static_cast<float>(px), static_cast<float>(py),
                          static_cast<float>(px + opx), static_cast<float>(py + opx)};
      GtBox second{other, 0, 0, 0, 0};
      bool placed = false;
      for (int attempt = 0; attempt < 100; ++attempt) {
        const int qx = rng.range_int(0, opts.size - opx + 1);
        const int qy = rng.range_int(0, opts.size - opx + 1);
        second = GtBox{other, static_cast<float>(qx), static_cast<float>(qy),
                       static_cast<float>(qx + opx), static_cast<float>(qy + opx)};
        if (boxes_disjoint(primary, second)) {
          placed = true;
          break;
        }
      }
      if (!placed)
        throw std::runtime_error("gen_two_object: object placement failed");
      draw_glyph(s.image, glyph_pattern(other), static_cast<int>(second.x0),
                 static_cast<int>(second.y0), cell, rng, false);
      draw_glyph(s.image, glyph_pattern(cls), px, py, cell, rng, false);
      s.boxes.push_back(primary);
      s.boxes.push_back(second);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

void save_dataset(const Dataset& ds, const std::string& root,
                  const std::map<std::string, std::string>& manifest) {
  fs::create_directories(root);
  for (auto& name : ds.class_names) fs::create_directories(fs::path(root) / name);
  std::ofstream boxes(fs::path(root) / "boxes.csv", std::ios::binary);
  if (!boxes) throw std::runtime_error(cat("cannot write boxes.csv under ", root));
  boxes << "filename,class,x0,y0,x1,y1\n";
  for (auto& s : ds.samples) {
    write_png((fs::path(root) / s.name).string(), s.image);
    for (auto& b : s.boxes)
      boxes << s.name << "," << b.cls << "," << b.x0 << "," << b.y0 << "," << b.x1
            << "," << b.y1 << "\n";
  }
  std::ofstream mf(fs::path(root) / "gen.cfg", std::ios::binary);
  for (auto& [k, v] : manifest) mf << k << " = " << v << "\n";
}

Dataset load_image_dir(const std::string& root, int resize_to) {
  if (!fs::is_directory(root))
    throw std::runtime_error(cat("dataset root ", root, " is not a directory"));
  Dataset ds;
  std::vector<std::string> dirs;
  for (auto& e : fs::directory_iterator(root))
    if (e.is_directory()) dirs.push_back(e.path().filename().string());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw std::runtime_error(cat("no classes found under ", root));
  ds.classes = static_cast<int>(dirs.size());
  ds.class_names = dirs;

  // boxes keyed by relative filename
  std::map<std::string, std::vector<GtBox>> box_map;
  const fs::path boxes_path = fs::path(root) / "boxes.csv";
  if (fs::exists(boxes_path)) {
    std::ifstream f(boxes_path);
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
      ++line_no;
      if (line_no == 1 || line.empty()) continue;  // header
      GtBox b;
      std::string fname;
      std::string field;
      std::vector<std::string> fields;
      for (char c : line) {
        if (c == ',') {
          fields.push_back(field);
          field.clear();
        } else if (c != '\r') {
          field += c;
        }
      }
      fields.push_back(field);
      if (fields.size() != 6)
        throw std::runtime_error(cat("boxes.csv line ", line_no, ": expected 6 fields, got ",
                                     fields.size()));
      try {
        fname = fields[0];
        b.cls = std::stoi(fields[1]);
        b.x0 = std::stof(fields[2]);
        b.y0 = std::stof(fields[3]);
        b.x1 = std::stof(fields[4]);
        b.y1 = std::stof(fields[5]);
      } catch (const std::exception&) {
        throw std::runtime_error(cat("boxes.csv line ", line_no, ": malformed row '",
                                     line, "'"));
      }
      box_map[fname].push_back(b);
    }
  }

  for (int cls = 0; cls < ds.classes; ++cls) {
    std::vector<std::string> files;
    for (auto& e : fs::directory_iterator(fs::path(root) / dirs[cls]))
      if (e.is_regular_file() && e.path().extension() == ".png")
        files.push_back(e.path().filename().string());
    std::sort(files.begin(), files.end());
    for (auto& f : files) {
      SynthSample s;
      s.label = cls;
      s.name = dirs[cls] + "/" + f;
      s.image = read_png((fs::path(root) / dirs[cls] / f).string());
      if (auto it = box_map.find(s.name); it != box_map.end()) s.boxes = it->second;
      if (resize_to > 0 && (s.image.h != resize_to || s.image.w != resize_to)) {
        const float sy = static_cast<float>(resize_to) / s.image.h;
        const float sx = static_cast<float>(resize_to) / s.image.w;
        s.image = resize_bilinear(s.image, resize_to, resize_to);
        for (auto& b : s.boxes) {
          b.x0 *= sx;
          b.x1 *= sx;
          b.y0 *= sy;
          b.y1 *= sy;
        }
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

Split split_dataset(const Dataset& ds, float val_frac) {
  Split sp;
  // per-class contiguous runs in generation order
  std::map<int, std::vector<int>> by_class;
  for (int i = 0; i < ds.size(); ++i) by_class[ds.samples[i].label].push_back(i);
  for (auto& [cls, idx] : by_class) {
    const int n_val = static_cast<int>(std::ceil(val_frac * idx.size()));
    const int n_train = static_cast<int>(idx.size()) - n_val;
    for (int i = 0; i < n_train; ++i) sp.train.push_back(idx[i]);
    for (int i = n_train; i < static_cast<int>(idx.size()); ++i) sp.val.push_back(idx[i]);
  }
  return sp;
}

}  // namespace tdam

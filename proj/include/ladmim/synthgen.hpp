#pragma once

// Procedural multi-object benchmark with logical and structural anomalies.
//
// A scene places a fixed set of coloured objects, one per permitted region,
// with positional jitter. Logical anomalies rearrange or recolour objects using
// only vocabulary colours and shapes, so every local patch still looks normal.
// Structural anomalies keep the layout and paint a small out-of-vocabulary
// defect (scratch or blob).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ladmim/errors.hpp"
#include "ladmim/image.hpp"
#include "ladmim/rng.hpp"
#include "ladmim/util.hpp"

namespace ladmim::synth {

using nlohmann::json;

enum class ShapeKind { rect, disk };

struct ObjectKind {
  std::string name;
  ShapeKind shape = ShapeKind::rect;
  Rgb color;
  int width = 0;
  int height = 0;
};

// Half-open pixel box [x0, x1) x [y0, y1).
struct Region {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  [[nodiscard]] int width() const { return x1 - x0; }
  [[nodiscard]] int height() const { return y1 - y0; }
  [[nodiscard]] bool contains(int x, int y) const { return x >= x0 && x < x1 && y >= y0 && y < y1; }
};

struct Slot {
  int object = 0;  // index into vocabulary
  Region region;
};

struct SceneSpec {
  int width = 32;
  int height = 32;
  Rgb background{28, 28, 32};
  std::vector<ObjectKind> vocabulary;
  std::vector<Slot> layout;          // required objects and where they may sit
  std::vector<Region> free_regions;  // empty in every normal scene
  std::vector<Rgb> defect_colors;    // never used by the vocabulary

  // Three objects in three quadrants, bottom-right quadrant empty.
  static SceneSpec standard() {
    SceneSpec s;
    s.vocabulary = {
        {"red-square", ShapeKind::rect, {210, 50, 40}, 6, 6},
        {"green-hbar", ShapeKind::rect, {40, 180, 70}, 10, 4},
        {"blue-vbar", ShapeKind::rect, {50, 90, 220}, 4, 10},
    };
    s.layout = {
        {0, {2, 2, 14, 14}},
        {1, {18, 2, 30, 14}},
        {2, {2, 18, 14, 30}},
    };
    s.free_regions = {{18, 18, 30, 30}};
    s.defect_colors = {{245, 225, 60}, {250, 250, 250}, {160, 70, 200}};
    return s;
  }

  void validate() const {
    if (width <= 0 || height <= 0) throw ConfigError("scene canvas must be positive");
    if (vocabulary.size() < 3) throw ConfigError("scene vocabulary needs at least 3 object kinds");
    if (layout.empty()) throw ConfigError("scene layout is empty");
    for (const auto& slot : layout) {
      if (slot.object < 0 || static_cast<std::size_t>(slot.object) >= vocabulary.size()) {
        throw ConfigError("layout references unknown object");
      }
      const auto& r = slot.region;
      if (r.x0 < 0 || r.y0 < 0 || r.x1 > width || r.y1 > height || r.width() <= 0 || r.height() <= 0) {
        throw ConfigError("layout region outside canvas");
      }
    }
    for (const auto& d : defect_colors) {
      if (d == background) throw ConfigError("defect colour equals background");
      for (const auto& v : vocabulary)
        if (v.color == d) throw ConfigError("defect colour collides with vocabulary colour");
    }
  }
};

enum class Label { normal, logical, structural };
enum class AnomalyKind { none, missing, extra, swapped_position, wrong_combination, scratch, blob };
enum class Split { train, val, test };

inline const char* to_string(Label l) {
  switch (l) {
    case Label::normal: return "normal";
    case Label::logical: return "logical";
    case Label::structural: return "structural";
  }
  return "?";
}

inline const char* to_string(AnomalyKind k) {
  switch (k) {
    case AnomalyKind::none: return "none";
    case AnomalyKind::missing: return "missing";
    case AnomalyKind::extra: return "extra";
    case AnomalyKind::swapped_position: return "swapped-position";
    case AnomalyKind::wrong_combination: return "wrong-combination";
    case AnomalyKind::scratch: return "scratch";
    case AnomalyKind::blob: return "blob";
  }
  return "?";
}

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Label parse_label(const std::string& s) {
  if (s == "normal") return Label::normal;
  if (s == "logical") return Label::logical;
  if (s == "structural") return Label::structural;
  throw ConfigError("unknown label: " + s);
}

inline AnomalyKind parse_kind(const std::string& s) {
  for (auto k : {AnomalyKind::none, AnomalyKind::missing, AnomalyKind::extra, AnomalyKind::swapped_position,
                 AnomalyKind::wrong_combination, AnomalyKind::scratch, AnomalyKind::blob}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("unknown anomaly kind: " + s);
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split: " + s);
}

struct PlacedObject {
  int object = 0;
  Rgb color;
  int x = 0, y = 0;
  int slot = -1;  // -1 for objects outside the layout (extra)
};

struct LabeledImage {
  Image pixels;
  Label label = Label::normal;
  AnomalyKind kind = AnomalyKind::none;
  Split split = Split::train;
  std::vector<PlacedObject> objects;
};

namespace detail {

inline bool shape_covers(const ObjectKind& k, int dx, int dy) {
  if (k.shape == ShapeKind::rect) return true;
  const double rx = k.width / 2.0, ry = k.height / 2.0;
  const double u = (dx + 0.5 - rx) / rx, v = (dy + 0.5 - ry) / ry;
  return u * u + v * v <= 1.0;
}

inline void draw_object(Image& img, const ObjectKind& k, const PlacedObject& o) {
  for (int dy = 0; dy < k.height; ++dy)
    for (int dx = 0; dx < k.width; ++dx)
      if (shape_covers(k, dx, dy) && img.contains(o.x + dx, o.y + dy)) img.set(o.x + dx, o.y + dy, o.color);
}

inline Image render(const SceneSpec& spec, const std::vector<PlacedObject>& objects) {
  Image img(spec.width, spec.height, spec.background);
  for (const auto& o : objects) draw_object(img, spec.vocabulary[static_cast<std::size_t>(o.object)], o);
  return img;
}

inline PlacedObject place(const SceneSpec& spec, int object, const Region& r, Rng& rng) {
  const auto& k = spec.vocabulary[static_cast<std::size_t>(object)];
  if (k.width > r.width() || k.height > r.height()) {
    throw ConfigError("layout infeasible: " + k.name + " does not fit its region");
  }
  PlacedObject o;
  o.object = object;
  o.color = k.color;
  o.x = rng.range(r.x0, r.x1 - k.width);
  o.y = rng.range(r.y0, r.y1 - k.height);
  return o;
}

inline void draw_line(Image& img, int x0, int y0, int x1, int y1, Rgb c) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    if (img.contains(x0, y0)) img.set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

}  // namespace detail

inline LabeledImage generate_normal(const SceneSpec& spec, Rng& rng) {
  spec.validate();
  LabeledImage out;
  for (std::size_t s = 0; s < spec.layout.size(); ++s) {
    auto o = detail::place(spec, spec.layout[s].object, spec.layout[s].region, rng);
    o.slot = static_cast<int>(s);
    out.objects.push_back(o);
  }
  out.pixels = detail::render(spec, out.objects);
  return out;
}

inline LabeledImage generate_logical_anomaly(const SceneSpec& spec, Rng& rng, AnomalyKind kind) {
  LabeledImage img = generate_normal(spec, rng);
  img.label = Label::logical;
  img.kind = kind;
  auto& objs = img.objects;
  const int n = static_cast<int>(objs.size());
  switch (kind) {
    case AnomalyKind::missing: {
      if (n < 2) throw ConfigError("'missing' needs a layout with at least two objects");
      objs.erase(objs.begin() + static_cast<std::ptrdiff_t>(rng.below(static_cast<std::uint64_t>(n))));
      break;
    }
    case AnomalyKind::extra: {
      if (spec.free_regions.empty()) throw ConfigError("'extra' needs a free region");
      const int object = static_cast<int>(rng.below(spec.vocabulary.size()));
      const auto& r = spec.free_regions[rng.below(spec.free_regions.size())];
      objs.push_back(detail::place(spec, object, r, rng));
      break;
    }
    case AnomalyKind::swapped_position: {
      if (n < 2) throw ConfigError("'swapped-position' needs at least two objects");
      const int i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 1)));
      if (j >= i) ++j;
      const auto& ri = spec.layout[static_cast<std::size_t>(objs[i].slot)].region;
      const auto& rj = spec.layout[static_cast<std::size_t>(objs[j].slot)].region;
      auto relocate = [&](PlacedObject& o, const Region& from, const Region& to) {
        const auto& k = spec.vocabulary[static_cast<std::size_t>(o.object)];
        if (k.width > to.width() || k.height > to.height()) {
          throw ConfigError("'swapped-position' infeasible: " + k.name + " does not fit the other region");
        }
        o.x = std::clamp(to.x0 + (o.x - from.x0), to.x0, to.x1 - k.width);
        o.y = std::clamp(to.y0 + (o.y - from.y0), to.y0, to.y1 - k.height);
      };
      relocate(objs[i], ri, rj);
      relocate(objs[j], rj, ri);
      std::swap(objs[i].slot, objs[j].slot);
      break;
    }
    case AnomalyKind::wrong_combination: {
      std::vector<std::pair<int, int>> options;  // (object index in objs, donor index)
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (!(objs[i].color == objs[j].color)) options.emplace_back(i, j);
      if (options.empty()) throw ConfigError("'wrong-combination' needs two distinct colours");
      const auto [i, j] = options[rng.below(options.size())];
      objs[i].color = objs[j].color;
      break;
    }
    default:
      throw ConfigError(std::string("not a logical anomaly kind: ") + to_string(kind));
  }
  img.pixels = detail::render(spec, objs);
  return img;
}

inline LabeledImage generate_structural_anomaly(const SceneSpec& spec, Rng& rng, AnomalyKind kind) {
  if (spec.defect_colors.empty()) throw ConfigError("scene has no defect colours");
  LabeledImage img = generate_normal(spec, rng);
  img.label = Label::structural;
  img.kind = kind;
  const Rgb color = spec.defect_colors[rng.below(spec.defect_colors.size())];
  auto& px = img.pixels;
  switch (kind) {
    case AnomalyKind::scratch: {
      // two-segment polyline inside a 10x10 window
      constexpr int window = 10;
      const int wx = rng.range(0, spec.width - window);
      const int wy = rng.range(0, spec.height - window);
      int x = wx + rng.range(0, window - 1), y = wy + rng.range(0, window - 1);
      for (int seg = 0; seg < 2; ++seg) {
        const int nx = wx + rng.range(0, window - 1), ny = wy + rng.range(0, window - 1);
        detail::draw_line(px, x, y, nx, ny, color);
        x = nx;
        y = ny;
      }
      break;
    }
    case AnomalyKind::blob: {
      ObjectKind blob{"blob", ShapeKind::disk, color, rng.range(3, 4), rng.range(3, 4)};
      PlacedObject o{0, color, rng.range(0, spec.width - blob.width), rng.range(0, spec.height - blob.height), -1};
      detail::draw_object(px, blob, o);
      break;
    }
    default:
      throw ConfigError(std::string("not a structural anomaly kind: ") + to_string(kind));
  }
  return img;
}

struct LayoutCheck {
  bool ok = true;
  std::string reason;
};

// Re-derives the layout rule from pixels alone: every vocabulary colour must
// sit inside the region(s) of the slot(s) that require it, each such slot
// must hold at least half of its object's area in that colour, and colours
// not required by the layout must be absent.
inline LayoutCheck validate_layout(const SceneSpec& spec, const Image& img) {
  for (std::size_t v = 0; v < spec.vocabulary.size(); ++v) {
    const Rgb color = spec.vocabulary[v].color;
    std::vector<const Slot*> slots;
    for (const auto& s : spec.layout)
      if (spec.vocabulary[static_cast<std::size_t>(s.object)].color == color) slots.push_back(&s);
    std::vector<int> counts(slots.size(), 0);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        if (!(img.get(x, y) == color)) continue;
        bool inside = false;
        for (std::size_t s = 0; s < slots.size() && !inside; ++s) {
          if (slots[s]->region.contains(x, y)) {
            ++counts[s];
            inside = true;
          }
        }
        if (!inside) return {false, spec.vocabulary[v].name + " colour outside its permitted region"};
      }
    }
    for (std::size_t s = 0; s < slots.size(); ++s) {
      const auto& k = spec.vocabulary[static_cast<std::size_t>(slots[s]->object)];
      if (2 * counts[s] < k.width * k.height) return {false, k.name + " missing from its region"};
    }
  }
  return {};
}

struct SplitCounts {
  int train = 160;
  int val = 40;
  int test_normal = 50;
  int test_logical = 50;
  int test_structural = 50;

  [[nodiscard]] int total() const { return train + val + test_normal + test_logical + test_structural; }
};

struct ManifestEntry {
  std::string id;
  std::string path;  // relative to the dataset directory
  Label label = Label::normal;
  AnomalyKind kind = AnomalyKind::none;
  Split split = Split::train;
  std::uint64_t seed = 0;
  int index = 0;
};

inline json to_json(const SceneSpec& s) {
  auto rgb = [](Rgb c) { return json::array({c.r, c.g, c.b}); };
  auto region = [](const Region& r) { return json::array({r.x0, r.y0, r.x1, r.y1}); };
  json j;
  j["width"] = s.width;
  j["height"] = s.height;
  j["background"] = rgb(s.background);
  for (const auto& v : s.vocabulary) {
    j["vocabulary"].push_back({{"name", v.name},
                               {"shape", v.shape == ShapeKind::rect ? "rect" : "disk"},
                               {"color", rgb(v.color)},
                               {"width", v.width},
                               {"height", v.height}});
  }
  for (const auto& l : s.layout) j["layout"].push_back({{"object", l.object}, {"region", region(l.region)}});
  j["free_regions"] = json::array();
  for (const auto& r : s.free_regions) j["free_regions"].push_back(region(r));
  j["defect_colors"] = json::array();
  for (const auto& c : s.defect_colors) j["defect_colors"].push_back(rgb(c));
  return j;
}

inline SceneSpec scene_from_json(const json& j) {
  auto rgb = [](const json& a) { return Rgb{a.at(0).get<std::uint8_t>(), a.at(1).get<std::uint8_t>(), a.at(2).get<std::uint8_t>()}; };
  auto region = [](const json& a) { return Region{a.at(0).get<int>(), a.at(1).get<int>(), a.at(2).get<int>(), a.at(3).get<int>()}; };
  SceneSpec s;
  s.width = j.at("width").get<int>();
  s.height = j.at("height").get<int>();
  s.background = rgb(j.at("background"));
  for (const auto& v : j.at("vocabulary")) {
    s.vocabulary.push_back({v.at("name").get<std::string>(),
                            v.at("shape").get<std::string>() == "disk" ? ShapeKind::disk : ShapeKind::rect,
                            rgb(v.at("color")), v.at("width").get<int>(), v.at("height").get<int>()});
  }
  for (const auto& l : j.at("layout")) s.layout.push_back({l.at("object").get<int>(), region(l.at("region"))});
  for (const auto& r : j.at("free_regions")) s.free_regions.push_back(region(r));
  for (const auto& c : j.at("defect_colors")) s.defect_colors.push_back(rgb(c));
  s.validate();
  return s;
}

struct Manifest {
  std::uint64_t seed = 0;
  SceneSpec spec;
  std::vector<ManifestEntry> images;

  [[nodiscard]] json to_json() const {
    json j;
    j["format"] = "ladmim-manifest";
    j["version"] = 1;
    j["seed"] = seed;
    j["scene"] = synth::to_json(spec);
    j["images"] = json::array();
    for (const auto& e : images) {
      j["images"].push_back({{"id", e.id},
                             {"path", e.path},
                             {"label", to_string(e.label)},
                             {"kind", to_string(e.kind)},
                             {"split", to_string(e.split)},
                             {"seed", e.seed},
                             {"index", e.index}});
    }
    return j;
  }

  static Manifest from_json(const json& j) {
    if (j.value("format", "") != "ladmim-manifest") throw IoError("not a dataset manifest");
    Manifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.spec = scene_from_json(j.at("scene"));
    for (const auto& e : j.at("images")) {
      ManifestEntry me;
      me.id = e.at("id").get<std::string>();
      me.path = e.at("path").get<std::string>();
      me.label = parse_label(e.at("label").get<std::string>());
      me.kind = parse_kind(e.at("kind").get<std::string>());
      me.split = parse_split(e.at("split").get<std::string>());
      me.seed = e.at("seed").get<std::uint64_t>();
      me.index = e.at("index").get<int>();
      if (me.split != Split::test && me.label != Label::normal) {
        throw IoError("manifest puts anomalous image " + me.id + " in split " + to_string(me.split));
      }
      m.images.push_back(std::move(me));
    }
    return m;
  }

  [[nodiscard]] std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < images.size(); ++i)
      if (images[i].split == s) out.push_back(i);
    return out;
  }
};

inline constexpr AnomalyKind kLogicalKinds[] = {AnomalyKind::missing, AnomalyKind::extra,
                                                AnomalyKind::swapped_position, AnomalyKind::wrong_combination};
inline constexpr AnomalyKind kStructuralKinds[] = {AnomalyKind::scratch, AnomalyKind::blob};

// Plan of every image in a dataset; image i draws from Rng(seed, data).derive(i).
inline std::vector<ManifestEntry> plan_dataset(const SplitCounts& counts, std::uint64_t seed) {
  if (counts.train < 1 || counts.val < 0 || counts.test_normal < 0 || counts.test_logical < 0 ||
      counts.test_structural < 0) {
    throw ConfigError("invalid split counts");
  }
  std::vector<ManifestEntry> plan;
  auto add = [&](Split split, Label label, AnomalyKind kind) {
    ManifestEntry e;
    e.index = static_cast<int>(plan.size());
    char id[32];
    std::snprintf(id, sizeof id, "img_%04d", e.index);
    e.id = id;
    e.path = "images/" + e.id + ".ppm";
    e.label = label;
    e.kind = kind;
    e.split = split;
    e.seed = seed;
    plan.push_back(e);
  };
  for (int i = 0; i < counts.train; ++i) add(Split::train, Label::normal, AnomalyKind::none);
  for (int i = 0; i < counts.val; ++i) add(Split::val, Label::normal, AnomalyKind::none);
  for (int i = 0; i < counts.test_normal; ++i) add(Split::test, Label::normal, AnomalyKind::none);
  for (int i = 0; i < counts.test_logical; ++i) add(Split::test, Label::logical, kLogicalKinds[i % 4]);
  for (int i = 0; i < counts.test_structural; ++i) add(Split::test, Label::structural, kStructuralKinds[i % 2]);
  return plan;
}

inline LabeledImage generate_entry(const SceneSpec& spec, const ManifestEntry& e) {
  Rng rng = Rng(e.seed, Stream::data).derive(static_cast<std::uint64_t>(e.index));
  LabeledImage img;
  switch (e.label) {
    case Label::normal: img = generate_normal(spec, rng); break;
    case Label::logical: img = generate_logical_anomaly(spec, rng, e.kind); break;
    case Label::structural: img = generate_structural_anomaly(spec, rng, e.kind); break;
  }
  img.split = e.split;
  return img;
}

inline Manifest write_dataset(const SceneSpec& spec, const SplitCounts& counts, std::uint64_t seed,
                              const std::filesystem::path& dir) {
  spec.validate();
  Manifest m;
  m.seed = seed;
  m.spec = spec;
  m.images = plan_dataset(counts, seed);
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IoError("cannot create " + (dir / "images").string() + ": " + ec.message());
  parallel_for(m.images.size(), [&](std::size_t i) {
    const auto img = generate_entry(spec, m.images[i]);
    write_file_atomic(dir / m.images[i].path, encode_ppm(img.pixels));
  });
  write_file_atomic(dir / "manifest.json", m.to_json().dump(2) + "\n");
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw MissingPrerequisite("dataset manifest not found: " + path.string());
  return Manifest::from_json(json::parse(read_file(path)));
}

}  // namespace ladmim::synth

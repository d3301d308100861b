#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>

#include "ladmim/synthgen.hpp"

using namespace ladmim;
using namespace ladmim::synth;
namespace fs = std::filesystem;

namespace {

const SceneSpec kSpec = SceneSpec::standard();

LabeledImage normal(std::uint64_t seed, std::uint64_t index) {
  Rng rng = Rng(seed, Stream::data).derive(index);
  return generate_normal(kSpec, rng);
}

struct Box {
  int x0 = 1 << 20, y0 = 1 << 20, x1 = -1, y1 = -1, pixels = 0;
};

// Bounding box and pixel count of every colour in the image.
std::map<std::array<int, 3>, Box> colour_boxes(const Image& img) {
  std::map<std::array<int, 3>, Box> out;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const Rgb c = img.get(x, y);
      auto& b = out[{c.r, c.g, c.b}];
      b.x0 = std::min(b.x0, x);
      b.y0 = std::min(b.y0, y);
      b.x1 = std::max(b.x1, x + 1);
      b.y1 = std::max(b.y1, y + 1);
      ++b.pixels;
    }
  return out;
}

std::array<int, 3> key(Rgb c) { return {c.r, c.g, c.b}; }

// Independent statement of the layout rule for the standard scene: each
// vocabulary colour forms exactly one solid rectangle of its object's size
// inside its region; nothing else but background.
bool satisfies_rule(const Image& img) {
  const auto boxes = colour_boxes(img);
  std::size_t expected = 1 + kSpec.layout.size();
  if (boxes.size() != expected) return false;
  for (const auto& slot : kSpec.layout) {
    const auto& k = kSpec.vocabulary[static_cast<std::size_t>(slot.object)];
    const auto it = boxes.find(key(k.color));
    if (it == boxes.end()) return false;
    const auto& b = it->second;
    if (b.x1 - b.x0 != k.width || b.y1 - b.y0 != k.height || b.pixels != k.width * k.height) return false;
    if (b.x0 < slot.region.x0 || b.y0 < slot.region.y0 || b.x1 > slot.region.x1 || b.y1 > slot.region.y1) return false;
  }
  return boxes.count(key(kSpec.background)) == 1;
}

using Patch = std::array<std::uint8_t, 12>;

std::vector<Patch> patches(const Image& img, int p = 2) {
  std::vector<Patch> out;
  for (int y = 0; y < img.height; y += p)
    for (int x = 0; x < img.width; x += p) {
      Patch q{};
      int k = 0;
      for (int dy = 0; dy < p; ++dy)
        for (int dx = 0; dx < p; ++dx) {
          const Rgb c = img.get(x + dx, y + dy);
          q[static_cast<std::size_t>(k++)] = c.r;
          q[static_cast<std::size_t>(k++)] = c.g;
          q[static_cast<std::size_t>(k++)] = c.b;
        }
      out.push_back(q);
    }
  return out;
}

double nn_distance(const Patch& q, const std::set<Patch>& pool) {
  double best = 1e300;
  for (const auto& r : pool) {
    double d = 0;
    for (std::size_t i = 0; i < q.size(); ++i) d += (double(q[i]) - r[i]) * (double(q[i]) - r[i]);
    best = std::min(best, d);
  }
  return best;
}

}  // namespace

TEST(GenerateNormal, ThreeObjectsInsideRegions) {
  const auto img = normal(7, 0);
  ASSERT_EQ(img.objects.size(), 3u);
  for (const auto& o : img.objects) {
    const auto& k = kSpec.vocabulary[static_cast<std::size_t>(o.object)];
    const auto& r = kSpec.layout[static_cast<std::size_t>(o.slot)].region;
    EXPECT_GE(o.x, r.x0);
    EXPECT_GE(o.y, r.y0);
    EXPECT_LE(o.x + k.width, r.x1);
    EXPECT_LE(o.y + k.height, r.y1);
  }
  EXPECT_EQ(img.label, Label::normal);
}

TEST(GenerateNormal, SameSeedBitwiseIdentical) {
  EXPECT_EQ(normal(7, 3).pixels, normal(7, 3).pixels);
  EXPECT_NE(normal(7, 3).pixels, normal(8, 3).pixels);
}

TEST(GenerateNormal, TwoHundredSamplesSatisfyRule) {
  for (std::uint64_t i = 0; i < 200; ++i) {
    const auto img = normal(1, i);
    EXPECT_TRUE(satisfies_rule(img.pixels)) << "sample " << i;
    EXPECT_TRUE(validate_layout(kSpec, img.pixels).ok) << validate_layout(kSpec, img.pixels).reason;
  }
}

TEST(GenerateNormal, InfeasibleLayoutIsAnError) {
  SceneSpec s = kSpec;
  s.layout[0].region = {0, 0, 4, 4};
  Rng rng(1, Stream::data);
  EXPECT_THROW(generate_normal(s, rng), ConfigError);
}

TEST(LogicalAnomaly, MissingDropsOneObject) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng rng(i, Stream::data);
    const auto img = generate_logical_anomaly(kSpec, rng, AnomalyKind::missing);
    EXPECT_EQ(img.objects.size(), kSpec.layout.size() - 1);
    EXPECT_EQ(colour_boxes(img.pixels).size(), kSpec.layout.size());
    EXPECT_FALSE(validate_layout(kSpec, img.pixels).ok);
  }
}

TEST(LogicalAnomaly, SwappedObjectsExchangeRegionsAndKeepPixels) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng a(i, Stream::data), b(i, Stream::data);
    const auto base = generate_normal(kSpec, a);
    const auto img = generate_logical_anomaly(kSpec, b, AnomalyKind::swapped_position);
    int moved = 0;
    for (std::size_t o = 0; o < img.objects.size(); ++o) {
      const auto& k = kSpec.vocabulary[static_cast<std::size_t>(img.objects[o].object)];
      const auto box = colour_boxes(img.pixels).at(key(k.color));
      // same solid rectangle, same colour
      EXPECT_EQ(box.pixels, k.width * k.height);
      EXPECT_EQ(box.x1 - box.x0, k.width);
      if (img.objects[o].slot != base.objects[o].slot) {
        ++moved;
        const auto& r = kSpec.layout[static_cast<std::size_t>(img.objects[o].slot)].region;
        EXPECT_TRUE(r.contains(box.x0, box.y0) && r.contains(box.x1 - 1, box.y1 - 1));
      }
    }
    EXPECT_EQ(moved, 2);
    EXPECT_FALSE(validate_layout(kSpec, img.pixels).ok);
  }
}

TEST(LogicalAnomaly, WrongCombinationRecoloursToVocabularyColour) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng rng(i, Stream::data);
    const auto img = generate_logical_anomaly(kSpec, rng, AnomalyKind::wrong_combination);
    std::set<std::array<int, 3>> vocab;
    for (const auto& v : kSpec.vocabulary) vocab.insert(key(v.color));
    int recoloured = 0;
    for (const auto& o : img.objects) {
      EXPECT_TRUE(vocab.count(key(o.color)));
      if (!(o.color == kSpec.vocabulary[static_cast<std::size_t>(o.object)].color)) ++recoloured;
    }
    EXPECT_EQ(recoloured, 1);
    EXPECT_FALSE(validate_layout(kSpec, img.pixels).ok);
  }
}

TEST(LogicalAnomaly, ExtraObjectLandsInFreeRegion) {
  for (std::uint64_t i = 0; i < 20; ++i) {
    Rng rng(i, Stream::data);
    const auto img = generate_logical_anomaly(kSpec, rng, AnomalyKind::extra);
    ASSERT_EQ(img.objects.size(), kSpec.layout.size() + 1);
    EXPECT_EQ(img.objects.back().slot, -1);
    EXPECT_FALSE(validate_layout(kSpec, img.pixels).ok);
  }
}

TEST(LogicalAnomaly, InapplicableKindIsAnError) {
  SceneSpec s = kSpec;
  s.layout.resize(1);
  Rng rng(1, Stream::data);
  EXPECT_THROW(generate_logical_anomaly(s, rng, AnomalyKind::missing), ConfigError);
  EXPECT_THROW(generate_logical_anomaly(kSpec, rng, AnomalyKind::blob), ConfigError);
}

TEST(StructuralAnomaly, LocalDefectKeepsLayout) {
  std::set<std::array<int, 3>> defects;
  for (const auto& c : kSpec.defect_colors) defects.insert(key(c));
  for (auto kind : {AnomalyKind::scratch, AnomalyKind::blob}) {
    for (std::uint64_t i = 0; i < 50; ++i) {
      Rng rng(i, Stream::data);
      const auto img = generate_structural_anomaly(kSpec, rng, kind);
      EXPECT_TRUE(validate_layout(kSpec, img.pixels).ok) << validate_layout(kSpec, img.pixels).reason;
      int defect_pixels = 0;
      Box box;
      for (const auto& [c, b] : colour_boxes(img.pixels)) {
        if (!defects.count(c)) continue;
        defect_pixels += b.pixels;
        box = b;
      }
      EXPECT_GT(defect_pixels, 0);
      EXPECT_LE(defect_pixels, kSpec.width * kSpec.height / 10);
      if (kind == AnomalyKind::blob) {
        EXPECT_LE(box.x1 - box.x0, 4);
        EXPECT_LE(box.y1 - box.y0, 4);
      } else {
        EXPECT_LE(box.x1 - box.x0, 10);
        EXPECT_LE(box.y1 - box.y0, 10);
      }
    }
  }
}

TEST(Locality, LogicalPatchesNormalStructuralPatchesNot) {
  std::set<Patch> pool;
  for (std::uint64_t i = 0; i < 160; ++i)
    for (const auto& p : patches(normal(2, i).pixels)) pool.insert(p);
  std::vector<double> nn;
  for (std::uint64_t i = 1000; i < 1050; ++i)
    for (const auto& p : patches(normal(2, i).pixels)) nn.push_back(nn_distance(p, pool));
  std::sort(nn.begin(), nn.end());
  const double p99 = nn[static_cast<std::size_t>(0.99 * static_cast<double>(nn.size() - 1))];

  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng rng = Rng(3, Stream::data).derive(i);
    const auto img = generate_logical_anomaly(kSpec, rng, kLogicalKinds[i % 4]);
    for (const auto& p : patches(img.pixels)) EXPECT_LE(nn_distance(p, pool), p99) << to_string(img.kind);
  }
  for (std::uint64_t i = 0; i < 100; ++i) {
    Rng rng = Rng(4, Stream::data).derive(i);
    const auto img = generate_structural_anomaly(kSpec, rng, kStructuralKinds[i % 2]);
    double worst = 0;
    for (const auto& p : patches(img.pixels)) worst = std::max(worst, nn_distance(p, pool));
    EXPECT_GT(worst, p99) << to_string(img.kind);
  }
}

class DatasetTest : public ::testing::Test {
 protected:
  fs::path dir = fs::temp_directory_path() / ("ladmim_synth_" + std::to_string(::getpid()));
  void TearDown() override { fs::remove_all(dir); }
};

TEST_F(DatasetTest, WritesAllFilesWithValidManifest) {
  const SplitCounts counts;
  const auto m = write_dataset(kSpec, counts, 5, dir);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir / "images")) files += e.path().extension() == ".ppm";
  EXPECT_EQ(files, 350u);
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));

  // Hand-written schema check.
  const auto j = nlohmann::json::parse(read_file(dir / "manifest.json"));
  ASSERT_TRUE(j.is_object());
  EXPECT_EQ(j.at("format"), "ladmim-manifest");
  EXPECT_TRUE(j.at("version").is_number_integer());
  EXPECT_TRUE(j.at("seed").is_number_unsigned());
  ASSERT_TRUE(j.at("images").is_array());
  const std::set<std::string> labels = {"normal", "logical", "structural"};
  const std::set<std::string> kinds = {"none", "missing", "extra", "swapped-position", "wrong-combination", "scratch", "blob"};
  const std::set<std::string> splits = {"train", "val", "test"};
  std::map<std::string, int> per_split;
  for (const auto& e : j.at("images")) {
    ASSERT_TRUE(e.is_object());
    for (const char* f : {"id", "path", "label", "kind", "split"}) ASSERT_TRUE(e.at(f).is_string()) << f;
    EXPECT_TRUE(e.at("seed").is_number_unsigned());
    EXPECT_TRUE(labels.count(e.at("label").get<std::string>()));
    EXPECT_TRUE(kinds.count(e.at("kind").get<std::string>()));
    EXPECT_TRUE(splits.count(e.at("split").get<std::string>()));
    EXPECT_TRUE(fs::exists(dir / e.at("path").get<std::string>()));
    EXPECT_EQ(e.at("label") == "normal", e.at("kind") == "none");
    if (e.at("split") != "test") {
      EXPECT_EQ(e.at("label"), "normal");
    }
    ++per_split[e.at("split").get<std::string>() + "/" + e.at("label").get<std::string>()];
  }
  EXPECT_EQ(per_split["train/normal"], 160);
  EXPECT_EQ(per_split["val/normal"], 40);
  EXPECT_EQ(per_split["test/normal"], 50);
  EXPECT_EQ(per_split["test/logical"], 50);
  EXPECT_EQ(per_split["test/structural"], 50);

  const auto back = load_manifest(dir);
  EXPECT_EQ(back.images.size(), m.images.size());
  EXPECT_EQ(back.to_json(), m.to_json());
}

TEST_F(DatasetTest, RerunIsIdenticalAndThreadIndependent) {
  SplitCounts counts{10, 4, 3, 4, 2};
  write_dataset(kSpec, counts, 9, dir / "a");
  ::setenv("LADMIM_THREADS", "1", 1);
  write_dataset(kSpec, counts, 9, dir / "b");
  ::unsetenv("LADMIM_THREADS");
  EXPECT_EQ(fnv1a(read_file(dir / "a" / "manifest.json")), fnv1a(read_file(dir / "b" / "manifest.json")));
  for (const auto& e : load_manifest(dir / "a").images) {
    EXPECT_EQ(read_file(dir / "a" / e.path), read_file(dir / "b" / e.path));
  }
}

TEST_F(DatasetTest, ManifestRejectsAnomalousTrainingImage) {
  write_dataset(kSpec, SplitCounts{2, 2, 1, 1, 1}, 1, dir);
  auto j = nlohmann::json::parse(read_file(dir / "manifest.json"));
  j["images"][0]["label"] = "logical";
  j["images"][0]["kind"] = "missing";
  EXPECT_THROW(Manifest::from_json(j), IoError);
  EXPECT_THROW(load_manifest(dir / "nowhere"), MissingPrerequisite);
}

#pragma once

// Synthetic omni-supervised corpora: panoptic scenes, detection boxes with
// pseudo masks, and captioned images, plus their on-disk splits.
//
// Split layout:
//   <root>/<split>/index.json         categories, images, annotations (RLE)
//   <root>/<split>/images/<id>.vlt    H x W x 3 f32 raster in [0, 1]
//   <root>/<split>/captions.jsonl     {image_id, caption} (caption splits)

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vloss/core/tensor.hpp"
#include "vloss/schedule/stream.hpp"

namespace vloss {

struct LabelSpace {
  std::vector<std::string> names;
  std::vector<bool> is_thing;

  Index size() const { return static_cast<Index>(names.size()); }
  /// -1 when absent.
  Index index_of(std::string_view name) const;
  std::vector<Index> thing_ids() const;
  std::vector<Index> stuff_ids() const;
  void add(const std::string& name, bool thing);
  void validate() const;
  std::uint64_t hash() const;

  bool operator==(const LabelSpace&) const = default;
};

/// Deduplicated union in first-appearance order. A name flagged thing in one
/// input and stuff in another is rejected.
LabelSpace unify_label_space(const std::vector<LabelSpace>& spaces);

/// Row-major binary mask.
struct Mask {
  Index h = 0, w = 0;
  std::vector<std::uint8_t> px;

  Mask() = default;
  Mask(Index h_, Index w_) : h(h_), w(w_), px(h_ * w_, 0) {}

  std::uint8_t at(Index y, Index x) const { return px[y * w + x]; }
  std::uint8_t& at(Index y, Index x) { return px[y * w + x]; }
  Index area() const;
  bool operator==(const Mask&) const = default;
};

/// Uncompressed COCO-style RLE: column-major run lengths, first run counts zeros.
std::vector<std::uint32_t> rle_encode(const Mask& m);
Mask rle_decode(const std::vector<std::uint32_t>& counts, Index h, Index w);

/// Pixel box [x0, x1) x [y0, y1).
struct Box {
  Index x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool operator==(const Box&) const = default;
};

Box bounding_box(const Mask& m);

struct Annotation {
  Index category = 0;  // index into the split's label space
  bool is_thing = true;
  Mask mask;
  std::optional<Box> box;

  bool operator==(const Annotation&) const = default;
};

struct Sample {
  std::string id;
  Tensor<float> image;  // [H, W, 3]
  std::vector<Annotation> annotations;
  std::string caption;

  Index height() const { return image.dim(0); }
  Index width() const { return image.dim(1); }
};

struct Split {
  std::string name;
  Stream stream = Stream::panoptic;
  LabelSpace labels;
  std::vector<Sample> samples;
};

/// Image and annotations mirrored left-right.
Sample horizontal_flip(const Sample& s);

struct SynthConfig {
  Index num_images = 8;
  Index image_size = 64;
  std::vector<std::string> thing_classes{"red circle", "green triangle", "blue rectangle"};
  std::vector<std::string> stuff_classes{"sky", "grass"};
  Index min_shapes = 1;
  Index max_shapes = 3;
  /// Detection only: thing classes beyond `thing_classes`.
  std::vector<std::string> vocab_extra_classes;
  /// Detection only: erode (even draws) or dilate (odd draws) radius in pixels.
  Index mask_noise = 0;
  /// Classes rendered only in the held-out split.
  std::vector<std::string> held_out_classes;
  /// Fraction of the num_images budget used by the detection split.
  double detection_fraction = 1.0;

  void validate() const;
};

/// Parses "color shape" names (the color is optional) into a render recipe.
/// Throws for unknown shapes or colors.
void check_renderable_thing(const std::string& name);
void check_renderable_stuff(const std::string& name);

Split generate_synth_panoptic(const SynthConfig& cfg, std::uint64_t seed, const std::string& name = "panoptic");
Split generate_synth_detection(const SynthConfig& cfg, std::uint64_t seed, const std::string& name = "detection");
Split generate_synth_captions(const SynthConfig& cfg, std::uint64_t seed, const std::string& name = "caption");
/// Panoptic-format images drawing from the training things plus the held-out classes.
Split generate_synth_heldout(const SynthConfig& cfg, std::uint64_t seed, const std::string& name = "heldout");

void write_split(const std::filesystem::path& root, const Split& split);
/// Reads `<root>/<split name>` (or `root` itself if it holds index.json). The
/// stored stream must equal `stream`.
Split load_dataset(const std::filesystem::path& path, Stream stream);

/// Checks that a panoptic sample's segments partition the image.
bool is_partition(const Sample& s);

}  // namespace vloss

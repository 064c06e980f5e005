#include "vloss/data/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "vloss/core/hash.hpp"
#include "vloss/core/serialize.hpp"

namespace vloss {

using json = nlohmann::json;
namespace fs = std::filesystem;

// ---- label spaces ----

Index LabelSpace::index_of(std::string_view name) const {
  for (Index i = 0; i < size(); ++i)
    if (names[i] == name) return i;
  return -1;
}

std::vector<Index> LabelSpace::thing_ids() const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (is_thing[i]) out.push_back(i);
  return out;
}

std::vector<Index> LabelSpace::stuff_ids() const {
  std::vector<Index> out;
  for (Index i = 0; i < size(); ++i)
    if (!is_thing[i]) out.push_back(i);
  return out;
}

void LabelSpace::add(const std::string& name, bool thing) {
  const Index k = index_of(name);
  if (k >= 0) {
    if (is_thing[k] != thing) throw ValidationError("label '" + name + "' is both a thing and a stuff class");
    return;
  }
  names.push_back(name);
  is_thing.push_back(thing);
}

void LabelSpace::validate() const {
  if (names.size() != is_thing.size()) throw ValidationError("label space: names/is_thing length mismatch");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (n.empty()) throw ValidationError("label space: empty class name");
    if (!seen.insert(n).second) throw ValidationError("label space: duplicate class '" + n + "'");
  }
}

std::uint64_t LabelSpace::hash() const {
  std::uint64_t h = fnv1a("labels");
  for (Index i = 0; i < size(); ++i) {
    h = fnv1a(names[i], h);
    h = fnv1a(is_thing[i] ? std::string_view("\x01", 1) : std::string_view("\x00", 1), h);
  }
  return h;
}

LabelSpace unify_label_space(const std::vector<LabelSpace>& spaces) {
  LabelSpace out;
  for (const auto& s : spaces) {
    s.validate();
    for (Index i = 0; i < s.size(); ++i) out.add(s.names[i], s.is_thing[i]);
  }
  return out;
}

// ---- masks ----

Index Mask::area() const {
  Index a = 0;
  for (auto v : px) a += v;
  return a;
}

std::vector<std::uint32_t> rle_encode(const Mask& m) {
  std::vector<std::uint32_t> counts;
  std::uint8_t cur = 0;
  std::uint32_t run = 0;
  for (Index x = 0; x < m.w; ++x)
    for (Index y = 0; y < m.h; ++y) {
      const std::uint8_t v = m.at(y, x) ? 1 : 0;
      if (v != cur) {
        counts.push_back(run);
        run = 0;
        cur = v;
      }
      ++run;
    }
  counts.push_back(run);
  return counts;
}

Mask rle_decode(const std::vector<std::uint32_t>& counts, Index h, Index w) {
  if (h < 0 || w < 0) throw ValidationError("rle_decode: negative size");
  std::uint64_t total = 0;
  for (auto c : counts) total += c;
  if (total != static_cast<std::uint64_t>(h * w)) {
    throw ValidationError("rle_decode: runs cover " + std::to_string(total) + " pixels, expected " +
                          std::to_string(h * w));
  }
  Mask m(h, w);
  Index pos = 0;
  for (std::size_t k = 0; k < counts.size(); ++k) {
    for (std::uint32_t i = 0; i < counts[k]; ++i, ++pos)
      if (k % 2 == 1) m.at(pos % h, pos / h) = 1;
  }
  return m;
}

Box bounding_box(const Mask& m) {
  Box b{m.w, m.h, 0, 0};
  bool any = false;
  for (Index y = 0; y < m.h; ++y)
    for (Index x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        any = true;
        b.x0 = std::min(b.x0, x);
        b.y0 = std::min(b.y0, y);
        b.x1 = std::max(b.x1, x + 1);
        b.y1 = std::max(b.y1, y + 1);
      }
  return any ? b : Box{};
}

Sample horizontal_flip(const Sample& s) {
  Sample out = s;
  const Index h = s.height(), w = s.width();
  std::vector<float> px(s.image.numel());
  for (Index y = 0; y < h; ++y)
    for (Index x = 0; x < w; ++x)
      for (Index c = 0; c < 3; ++c) px[(y * w + x) * 3 + c] = s.image[(y * w + (w - 1 - x)) * 3 + c];
  out.image = Tensor<float>(s.image.shape(), std::move(px));
  for (auto& a : out.annotations) {
    Mask m(a.mask.h, a.mask.w);
    for (Index y = 0; y < m.h; ++y)
      for (Index x = 0; x < m.w; ++x) m.at(y, x) = a.mask.at(y, m.w - 1 - x);
    a.mask = std::move(m);
    if (a.box) a.box = Box{w - a.box->x1, a.box->y0, w - a.box->x0, a.box->y1};
  }
  return out;
}

bool is_partition(const Sample& s) {
  const Index h = s.height(), w = s.width();
  std::vector<int> cover(h * w, 0);
  for (const auto& a : s.annotations) {
    if (a.mask.h != h || a.mask.w != w) return false;
    for (Index i = 0; i < h * w; ++i) cover[i] += a.mask.px[i];
  }
  return std::all_of(cover.begin(), cover.end(), [](int c) { return c == 1; });
}

// ---- rendering ----

namespace {

struct Rgb {
  float r, g, b;
};

const std::map<std::string, Rgb>& color_table() {
  static const std::map<std::string, Rgb> t{
      {"red", {0.90f, 0.15f, 0.15f}},    {"green", {0.15f, 0.85f, 0.20f}}, {"blue", {0.15f, 0.30f, 0.95f}},
      {"yellow", {0.95f, 0.90f, 0.15f}}, {"purple", {0.60f, 0.20f, 0.80f}}, {"orange", {1.00f, 0.55f, 0.10f}},
      {"white", {0.97f, 0.97f, 0.97f}},  {"black", {0.05f, 0.05f, 0.05f}}, {"gray", {0.55f, 0.55f, 0.55f}},
  };
  return t;
}

const std::set<std::string>& shape_set() {
  static const std::set<std::string> s{"circle", "rectangle", "triangle", "diamond", "star"};
  return s;
}

const std::map<std::string, Rgb>& stuff_table() {
  static const std::map<std::string, Rgb> t{
      {"sky", {0.55f, 0.75f, 0.95f}},  {"grass", {0.35f, 0.50f, 0.20f}}, {"sand", {0.85f, 0.75f, 0.50f}},
      {"water", {0.10f, 0.25f, 0.45f}}, {"wall", {0.50f, 0.45f, 0.40f}},
  };
  return t;
}

struct ThingKind {
  std::string color, shape;
};

ThingKind parse_thing(const std::string& name) {
  const auto sp = name.rfind(' ');
  ThingKind k{sp == std::string::npos ? "gray" : name.substr(0, sp),
              sp == std::string::npos ? name : name.substr(sp + 1)};
  if (!shape_set().count(k.shape)) throw ValidationError("thing class '" + name + "': unknown shape '" + k.shape + "'");
  if (!color_table().count(k.color)) throw ValidationError("thing class '" + name + "': unknown color '" + k.color + "'");
  return k;
}

bool inside(const std::string& shape, double px, double py, double cx, double cy, double r) {
  const double dx = px - cx, dy = py - cy;
  if (shape == "circle") return dx * dx + dy * dy <= r * r;
  if (shape == "rectangle") return std::abs(dx) <= r && std::abs(dy) <= 0.6 * r;
  if (shape == "diamond") return std::abs(dx) + std::abs(dy) <= r;
  if (shape == "triangle") {
    if (dy < -r || dy > r) return false;
    return std::abs(dx) <= (dy + r) / 2.0;
  }
  // star: five lobes in polar form
  const double rad = std::sqrt(dx * dx + dy * dy);
  const double th = std::atan2(dy, dx);
  return rad <= r * (0.6 + 0.4 * std::cos(5.0 * th + M_PI / 2.0));
}

struct Placed {
  std::string name;
  Mask full;
};

using Rng = std::mt19937_64;

double uniform(Rng& rng, double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); }
Index pick(Rng& rng, Index n) { return std::uniform_int_distribution<Index>(0, n - 1)(rng); }

Mask rasterize(const std::string& shape, Index size, double cx, double cy, double r) {
  Mask m(size, size);
  for (Index y = 0; y < size; ++y)
    for (Index x = 0; x < size; ++x) m.at(y, x) = inside(shape, x + 0.5, y + 0.5, cx, cy, r) ? 1 : 0;
  return m;
}

// Visible part of shape i given later shapes drawn on top.
std::vector<Mask> visible_masks(const std::vector<Placed>& shapes) {
  std::vector<Mask> vis;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Mask v = shapes[i].full;
    for (std::size_t j = i + 1; j < shapes.size(); ++j)
      for (std::size_t p = 0; p < v.px.size(); ++p)
        if (shapes[j].full.px[p]) v.px[p] = 0;
    vis.push_back(std::move(v));
  }
  return vis;
}

bool acceptable(const std::vector<Placed>& shapes, Index min_pixels) {
  const auto vis = visible_masks(shapes);
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const Index a = vis[i].area();
    if (2 * a < shapes[i].full.area() || a < min_pixels) return false;
  }
  return true;
}

struct Scene {
  Index size = 0;
  std::vector<std::string> stuff;  // top to bottom; one or two entries
  Index boundary = 0;              // first row of the second stuff region
  std::vector<Placed> things;      // back to front
};

// Adds things with z-order occlusion; each keeps >= half of its area visible.
void place_things(Scene& sc, const std::vector<std::string>& names, Rng& rng) {
  const Index s = sc.size;
  const Index min_pixels = std::max<Index>(9, s * s / 160);
  for (const auto& name : names) {
    const ThingKind k = parse_thing(name);
    bool ok = false;
    for (int attempt = 0; attempt < 200 && !ok; ++attempt) {
      const double r = uniform(rng, 0.14 * s, 0.26 * s);
      const double cx = uniform(rng, r, s - r), cy = uniform(rng, r, s - r);
      sc.things.push_back({name, rasterize(k.shape, s, cx, cy, r)});
      if (acceptable(sc.things, min_pixels)) {
        ok = true;
      } else {
        sc.things.pop_back();
      }
    }
    if (!ok) {
      throw ValidationError("image size " + std::to_string(s) + " too small for " + std::to_string(names.size()) +
                            " shapes");
    }
  }
}

Scene random_scene(Index size, const std::vector<std::string>& stuff_pool, const std::vector<std::string>& things,
                   Rng& rng) {
  Scene sc;
  sc.size = size;
  sc.stuff.push_back(stuff_pool[pick(rng, stuff_pool.size())]);
  if (stuff_pool.size() > 1 && uniform(rng, 0, 1) < 0.7) {
    std::string second;
    do second = stuff_pool[pick(rng, stuff_pool.size())];
    while (second == sc.stuff[0]);
    sc.stuff.push_back(second);
    sc.boundary = size / 4 + pick(rng, size / 2 + 1);
  }
  place_things(sc, things, rng);
  return sc;
}

Mask stuff_region(const Scene& sc, std::size_t k) {
  Mask m(sc.size, sc.size);
  for (Index y = 0; y < sc.size; ++y) {
    const std::size_t region = (sc.stuff.size() > 1 && y >= sc.boundary) ? 1 : 0;
    if (region != k) continue;
    for (Index x = 0; x < sc.size; ++x) m.at(y, x) = 1;
  }
  return m;
}

Rgb stuff_color(const std::string& name, Index y, Index x, Index size) {
  Rgb c = stuff_table().at(name);
  float shade = 0;
  if (name == "sky") shade = 0.12f * (static_cast<float>(y) / size - 0.5f);
  if (name == "grass") shade = (x % 4 < 2) ? 0.05f : -0.05f;
  if (name == "sand") shade = ((x * 7 + y * 3) % 5 == 0) ? -0.08f : 0.0f;
  if (name == "water") shade = 0.06f * std::sin(0.8f * x + 0.3f * y);
  if (name == "wall") shade = (y % 6 == 0 || (x + (y / 6) * 4) % 8 == 0) ? -0.12f : 0.0f;
  return {c.r + shade, c.g + shade, c.b + shade};
}

struct Rendered {
  Tensor<float> image;
  std::vector<Mask> thing_masks;  // visible parts, in scene order
  std::vector<Mask> stuff_masks;  // uncovered parts, in scene order
};

Rendered render(const Scene& sc, Rng& rng) {
  const Index s = sc.size;
  std::vector<float> px(s * s * 3);
  std::normal_distribution<float> noise(0.0f, 0.02f);
  const auto vis = visible_masks(sc.things);
  Rendered out;
  Mask covered(s, s);
  for (const auto& v : vis)
    for (std::size_t p = 0; p < v.px.size(); ++p) covered.px[p] |= v.px[p];
  for (std::size_t k = 0; k < sc.stuff.size(); ++k) {
    Mask m = stuff_region(sc, k);
    for (std::size_t p = 0; p < m.px.size(); ++p)
      if (covered.px[p]) m.px[p] = 0;
    out.stuff_masks.push_back(std::move(m));
  }
  for (Index y = 0; y < s; ++y)
    for (Index x = 0; x < s; ++x) {
      Rgb c{0, 0, 0};
      bool thing = false;
      for (std::size_t i = sc.things.size(); i-- > 0;) {
        if (vis[i].at(y, x)) {
          c = color_table().at(parse_thing(sc.things[i].name).color);
          thing = true;
          break;
        }
      }
      if (!thing) {
        const std::size_t region = (sc.stuff.size() > 1 && y >= sc.boundary) ? 1 : 0;
        c = stuff_color(sc.stuff[region], y, x, s);
      }
      const float rgb[3] = {c.r, c.g, c.b};
      for (int ch = 0; ch < 3; ++ch) px[(y * s + x) * 3 + ch] = std::clamp(rgb[ch] + noise(rng), 0.0f, 1.0f);
    }
  out.image = Tensor<float>({s, s, 3}, std::move(px));
  out.thing_masks = vis;
  return out;
}

std::string image_id(Index i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06u", static_cast<unsigned>(i));
  return buf;
}

Rng seeded(std::uint64_t seed, std::string_view stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(fnv1a(stream))};
  return Rng(seq);
}

std::vector<std::string> draw_things(const std::vector<std::string>& pool, const SynthConfig& cfg, Rng& rng,
                                     const std::vector<std::string>& forced) {
  std::vector<std::string> out = forced;
  const Index n = cfg.min_shapes + pick(rng, cfg.max_shapes - cfg.min_shapes + 1);
  while (static_cast<Index>(out.size()) < n && !pool.empty()) out.push_back(pool[pick(rng, pool.size())]);
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

Mask morph(const Mask& m, Index radius, bool dilate) {
  Mask out(m.h, m.w);
  for (Index y = 0; y < m.h; ++y)
    for (Index x = 0; x < m.w; ++x) {
      bool any = false, all = true;
      for (Index dy = -radius; dy <= radius; ++dy)
        for (Index dx = -radius; dx <= radius; ++dx) {
          const Index yy = y + dy, xx = x + dx;
          const bool v = yy >= 0 && yy < m.h && xx >= 0 && xx < m.w && m.at(yy, xx);
          any |= v;
          all &= v;
        }
      out.at(y, x) = dilate ? any : all;
    }
  return out;
}

Split panoptic_split(const SynthConfig& cfg, std::uint64_t seed, const std::string& name,
                     const std::vector<std::string>& thing_pool, const std::vector<std::string>& forced_pool,
                     std::string_view stream_tag) {
  Rng rng = seeded(seed, stream_tag);
  Split sp;
  sp.name = name;
  sp.stream = Stream::panoptic;
  for (const auto& t : thing_pool) sp.labels.add(t, true);
  for (const auto& t : forced_pool) sp.labels.add(t, true);
  for (const auto& s : cfg.stuff_classes) sp.labels.add(s, false);
  for (Index i = 0; i < cfg.num_images; ++i) {
    std::vector<std::string> forced;
    if (!forced_pool.empty() && cfg.max_shapes > 0) forced.push_back(forced_pool[i % forced_pool.size()]);
    const Scene sc = random_scene(cfg.image_size, cfg.stuff_classes, draw_things(thing_pool, cfg, rng, forced), rng);
    Rendered r = render(sc, rng);
    Sample smp;
    smp.id = image_id(i);
    smp.image = std::move(r.image);
    for (std::size_t k = 0; k < sc.things.size(); ++k) {
      smp.annotations.push_back({sp.labels.index_of(sc.things[k].name), true, r.thing_masks[k],
                                 bounding_box(r.thing_masks[k])});
    }
    for (std::size_t k = 0; k < sc.stuff.size(); ++k) {
      if (r.stuff_masks[k].area() == 0) continue;
      smp.annotations.push_back({sp.labels.index_of(sc.stuff[k]), false, r.stuff_masks[k], std::nullopt});
    }
    sp.samples.push_back(std::move(smp));
  }
  return sp;
}

}  // namespace

void check_renderable_thing(const std::string& name) { parse_thing(name); }

void check_renderable_stuff(const std::string& name) {
  if (!stuff_table().count(name)) throw ValidationError("unknown stuff class '" + name + "'");
}

void SynthConfig::validate() const {
  if (num_images < 0) throw ValidationError("num_images must be >= 0");
  if (image_size < 32 || image_size % 32 != 0) {
    throw ValidationError("image_size must be a positive multiple of 32, got " + std::to_string(image_size));
  }
  if (stuff_classes.empty()) throw ValidationError("at least one stuff class (background) is required");
  if (min_shapes < 0 || max_shapes < min_shapes) throw ValidationError("need 0 <= min_shapes <= max_shapes");
  if (mask_noise < 0) throw ValidationError("mask_noise must be >= 0");
  if (!(detection_fraction > 0 && detection_fraction <= 1)) throw ValidationError("detection_fraction must be in (0, 1]");
  LabelSpace all;
  for (const auto& t : thing_classes) check_renderable_thing(t), all.add(t, true);
  for (const auto& t : vocab_extra_classes) check_renderable_thing(t), all.add(t, true);
  for (const auto& t : held_out_classes) check_renderable_thing(t), all.add(t, true);
  for (const auto& s : stuff_classes) check_renderable_stuff(s), all.add(s, false);
  for (const auto& h : held_out_classes) {
    if (std::count(thing_classes.begin(), thing_classes.end(), h) ||
        std::count(vocab_extra_classes.begin(), vocab_extra_classes.end(), h)) {
      throw ValidationError("held-out class '" + h + "' also listed as a training class");
    }
  }
}

Split generate_synth_panoptic(const SynthConfig& cfg, std::uint64_t seed, const std::string& name) {
  cfg.validate();
  if (cfg.thing_classes.empty() && cfg.max_shapes > 0) {
    SynthConfig c = cfg;
    c.min_shapes = c.max_shapes = 0;
    return panoptic_split(c, seed, name, {}, {}, "panoptic");
  }
  return panoptic_split(cfg, seed, name, cfg.thing_classes, {}, "panoptic");
}

Split generate_synth_heldout(const SynthConfig& cfg, std::uint64_t seed, const std::string& name) {
  cfg.validate();
  return panoptic_split(cfg, seed, name, cfg.thing_classes, cfg.held_out_classes, "heldout");
}

Split generate_synth_detection(const SynthConfig& cfg, std::uint64_t seed, const std::string& name) {
  cfg.validate();
  Rng rng = seeded(seed, "detection");
  Split sp;
  sp.name = name;
  sp.stream = Stream::detection;
  std::vector<std::string> pool = cfg.thing_classes;
  for (const auto& e : cfg.vocab_extra_classes)
    if (std::find(pool.begin(), pool.end(), e) == pool.end()) pool.push_back(e);
  for (const auto& t : pool) sp.labels.add(t, true);
  const Index n = static_cast<Index>(std::llround(cfg.num_images * cfg.detection_fraction));
  for (Index i = 0; i < n; ++i) {
    std::vector<std::string> forced;
    // make every extra class appear at least once
    if (i < static_cast<Index>(cfg.vocab_extra_classes.size()) && cfg.max_shapes > 0)
      forced.push_back(cfg.vocab_extra_classes[i]);
    const Scene sc = random_scene(cfg.image_size, cfg.stuff_classes, draw_things(pool, cfg, rng, forced), rng);
    Rendered r = render(sc, rng);
    Sample smp;
    smp.id = image_id(i);
    smp.image = std::move(r.image);
    for (std::size_t k = 0; k < sc.things.size(); ++k) {
      Mask pseudo = r.thing_masks[k];
      const bool dilate = rng() % 2 == 1;  // drawn even without noise so scenes match across noise levels
      if (cfg.mask_noise > 0) {
        Mask noisy = morph(pseudo, cfg.mask_noise, dilate);
        if (noisy.area() > 0) pseudo = std::move(noisy);
      }
      Mask hull = pseudo;
      for (std::size_t p = 0; p < hull.px.size(); ++p) hull.px[p] |= r.thing_masks[k].px[p];
      smp.annotations.push_back({sp.labels.index_of(sc.things[k].name), true, std::move(pseudo), bounding_box(hull)});
    }
    sp.samples.push_back(std::move(smp));
  }
  return sp;
}

Split generate_synth_captions(const SynthConfig& cfg, std::uint64_t seed, const std::string& name) {
  cfg.validate();
  Rng rng = seeded(seed, "caption");
  Split sp;
  sp.name = name;
  sp.stream = Stream::caption;
  std::vector<std::string> colors, shapes;
  auto note = [](std::vector<std::string>& v, const std::string& s) {
    if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
  };
  for (const auto* list : {&cfg.thing_classes, &cfg.vocab_extra_classes}) {
    for (const auto& t : *list) {
      const ThingKind k = parse_thing(t);
      note(colors, k.color);
      note(shapes, k.shape);
    }
  }
  struct Combo {
    std::string thing, stuff;
  };
  std::vector<Combo> combos;
  for (const auto& c : colors)
    for (const auto& s : shapes) {
      const std::string thing = c + " " + s;
      if (std::count(cfg.held_out_classes.begin(), cfg.held_out_classes.end(), thing)) continue;
      for (const auto& st : cfg.stuff_classes) combos.push_back({thing, st});
    }
  if (cfg.num_images > 0 && colors.empty()) throw ValidationError("caption split needs at least one thing class");
  if (cfg.num_images > static_cast<Index>(combos.size())) {
    throw ValidationError("caption split: only " + std::to_string(combos.size()) + " distinct scenes for " +
                          std::to_string(cfg.num_images) + " images");
  }
  std::shuffle(combos.begin(), combos.end(), rng);
  std::set<std::string> used;
  for (Index i = 0; i < cfg.num_images; ++i) {
    const Combo& cb = combos[i];
    Scene sc;
    sc.size = cfg.image_size;
    sc.stuff = {cb.stuff};
    place_things(sc, {cb.thing}, rng);
    Rendered r = render(sc, rng);
    Sample smp;
    smp.id = image_id(i);
    smp.image = std::move(r.image);
    smp.caption = "a " + cb.thing + " on a " + cb.stuff;
    if (!used.insert(smp.caption).second) throw RuntimeAbort("caption collision: " + smp.caption);
    sp.samples.push_back(std::move(smp));
  }
  return sp;
}

// ---- files ----

void write_split(const fs::path& root, const Split& split) {
  const fs::path dir = root / split.name;
  fs::create_directories(dir / "images");
  json idx;
  idx["split"] = split.name;
  idx["stream"] = std::string(to_string(split.stream));
  idx["categories"] = json::array();
  for (Index i = 0; i < split.labels.size(); ++i)
    idx["categories"].push_back({{"id", i}, {"name", split.labels.names[i]}, {"isthing", bool(split.labels.is_thing[i])}});
  idx["images"] = json::array();
  std::ofstream captions;
  if (split.stream == Stream::caption) captions.open(dir / "captions.jsonl", std::ios::binary);
  for (const auto& s : split.samples) {
    const std::string file = "images/" + s.id + ".vlt";
    save_tensor(dir / file, s.image);
    json img{{"id", s.id}, {"file", file}, {"height", s.height()}, {"width", s.width()}};
    img["annotations"] = json::array();
    for (const auto& a : s.annotations) {
      json ann{{"category_id", a.category},
               {"isthing", a.is_thing},
               {"segmentation", {{"size", {a.mask.h, a.mask.w}}, {"counts", rle_encode(a.mask)}}}};
      if (a.box) ann["bbox"] = {a.box->x0, a.box->y0, a.box->x1, a.box->y1};
      img["annotations"].push_back(std::move(ann));
    }
    idx["images"].push_back(std::move(img));
    if (captions.is_open()) captions << json{{"image_id", s.id}, {"caption", s.caption}}.dump() << "\n";
  }
  std::ofstream os(dir / "index.json", std::ios::binary);
  os << idx.dump(1) << "\n";
  if (!os) throw RuntimeAbort("failed to write " + (dir / "index.json").string());
}

namespace {

const json& field(const json& j, const std::string& key, const std::string& path) {
  if (!j.is_object() || !j.contains(key)) throw ValidationError("index.json: missing field " + path + "." + key);
  return j.at(key);
}

template <typename T>
T as(const json& j, const std::string& path) {
  try {
    return j.get<T>();
  } catch (const json::exception&) {
    throw ValidationError("index.json: bad value at " + path);
  }
}

json parse_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ValidationError("cannot open " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  try {
    return json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw ValidationError(p.filename().string() + ": malformed JSON at byte offset " + std::to_string(e.byte));
  }
}

}  // namespace

Split load_dataset(const fs::path& path, Stream stream) {
  fs::path dir = path;
  if (!fs::exists(dir / "index.json")) dir = path / std::string(to_string(stream));
  if (!fs::exists(dir / "index.json")) throw ValidationError("no split index under " + path.string());
  const json idx = parse_file(dir / "index.json");
  Split sp;
  sp.name = as<std::string>(field(idx, "split", "$"), "$.split");
  sp.stream = parse_stream(as<std::string>(field(idx, "stream", "$"), "$.stream"));
  if (sp.stream != stream) {
    throw ValidationError("split " + dir.string() + " holds " + std::string(to_string(sp.stream)) + " data, expected " +
                          std::string(to_string(stream)));
  }
  const json& cats = field(idx, "categories", "$");
  for (std::size_t i = 0; i < cats.size(); ++i) {
    const std::string p = "$.categories[" + std::to_string(i) + "]";
    if (as<Index>(field(cats[i], "id", p), p + ".id") != static_cast<Index>(i))
      throw ValidationError("index.json: non-dense category id at " + p);
    sp.labels.add(as<std::string>(field(cats[i], "name", p), p + ".name"), as<bool>(field(cats[i], "isthing", p), p + ".isthing"));
  }
  sp.labels.validate();

  std::map<std::string, std::string> captions;
  if (stream == Stream::caption) {
    std::ifstream is(dir / "captions.jsonl", std::ios::binary);
    if (!is) throw ValidationError("caption split without captions.jsonl: " + dir.string());
    std::string line;
    std::size_t offset = 0;
    while (std::getline(is, line)) {
      if (!line.empty()) {
        json j;
        try {
          j = json::parse(line);
        } catch (const json::parse_error& e) {
          throw ValidationError("captions.jsonl: malformed JSON at byte offset " + std::to_string(offset + e.byte - 1));
        }
        captions[as<std::string>(field(j, "image_id", "$"), "image_id")] =
            as<std::string>(field(j, "caption", "$"), "caption");
      }
      offset += line.size() + 1;
    }
  }

  const json& imgs = field(idx, "images", "$");
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    const std::string p = "$.images[" + std::to_string(i) + "]";
    Sample s;
    s.id = as<std::string>(field(imgs[i], "id", p), p + ".id");
    const Index h = as<Index>(field(imgs[i], "height", p), p + ".height");
    const Index w = as<Index>(field(imgs[i], "width", p), p + ".width");
    const fs::path file = dir / as<std::string>(field(imgs[i], "file", p), p + ".file");
    try {
      s.image = load_tensor<float>(file);
    } catch (const ValidationError& e) {
      throw ValidationError(file.string() + ": " + e.what());
    }
    if (s.image.shape() != Shape{h, w, 3}) {
      throw ValidationError(file.string() + ": raster shape " + shape_str(s.image.shape()) + " disagrees with " + p);
    }
    const json& anns = field(imgs[i], "annotations", p);
    for (std::size_t k = 0; k < anns.size(); ++k) {
      const std::string q = p + ".annotations[" + std::to_string(k) + "]";
      Annotation a;
      a.category = as<Index>(field(anns[k], "category_id", q), q + ".category_id");
      if (a.category < 0 || a.category >= sp.labels.size()) throw ValidationError("index.json: unknown category at " + q);
      a.is_thing = as<bool>(field(anns[k], "isthing", q), q + ".isthing");
      if (a.is_thing != sp.labels.is_thing[a.category])
        throw ValidationError("index.json: isthing disagrees with category at " + q);
      const json& seg = field(anns[k], "segmentation", q);
      const auto size = as<std::vector<Index>>(field(seg, "size", q + ".segmentation"), q + ".segmentation.size");
      if (size.size() != 2 || size[0] != h || size[1] != w)
        throw ValidationError("index.json: mask size disagrees with image at " + q);
      try {
        a.mask = rle_decode(as<std::vector<std::uint32_t>>(field(seg, "counts", q + ".segmentation"),
                                                          q + ".segmentation.counts"),
                            h, w);
      } catch (const ValidationError& e) {
        throw ValidationError("index.json: " + q + ".segmentation: " + e.what());
      }
      if (anns[k].contains("bbox")) {
        const auto b = as<std::vector<Index>>(anns[k]["bbox"], q + ".bbox");
        if (b.size() != 4) throw ValidationError("index.json: bbox needs 4 values at " + q);
        a.box = Box{b[0], b[1], b[2], b[3]};
      }
      s.annotations.push_back(std::move(a));
    }
    if (stream == Stream::caption) {
      auto it = captions.find(s.id);
      if (it == captions.end()) throw ValidationError("captions.jsonl: no caption for image " + s.id);
      s.caption = it->second;
    }
    sp.samples.push_back(std::move(s));
  }
  return sp;
}

}  // namespace vloss

#include "run_config.hpp"

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace vloss::cli {

namespace {

nlohmann::json scalar_to_json(const YAML::Node& n) {
  const std::string s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s.empty() || s == "~" || s == "null") return nullptr;
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  long long i = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i);
  if (ec == std::errc() && p == s.data() + s.size()) return i;
  char* end = nullptr;
  const double d = std::strtod(s.c_str(), &end);
  if (end == s.c_str() + s.size()) return d;
  return s;
}

nlohmann::json node_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined: return nullptr;
    case YAML::NodeType::Scalar: return scalar_to_json(n);
    case YAML::NodeType::Sequence: {
      auto a = nlohmann::json::array();
      for (const auto& x : n) a.push_back(node_to_json(x));
      return a;
    }
    case YAML::NodeType::Map: {
      auto o = nlohmann::json::object();
      for (const auto& kv : n) o[kv.first.as<std::string>()] = node_to_json(kv.second);
      return o;
    }
  }
  return nullptr;
}

void reject_unknown(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + ": expected a mapping");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      throw ValidationError(where + ": unknown key '" + it.key() + "'");
    }
}

std::uint64_t parse_seed(const std::string& s, const std::string& where) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || p != s.data() + s.size()) {
    throw ValidationError(where + ": seed must be a non-negative integer, got '" + s + "'");
  }
  return v;
}

}  // namespace

nlohmann::json yaml_to_json(const std::string& text) {
  try {
    return node_to_json(YAML::Load(text));
  } catch (const YAML::Exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

nlohmann::ordered_json DataConfig::to_json() const {
  nlohmann::ordered_json j;
  j["num_images"] = synth.num_images;
  j["image_size"] = synth.image_size;
  j["thing_classes"] = synth.thing_classes;
  j["stuff_classes"] = synth.stuff_classes;
  j["min_shapes"] = synth.min_shapes;
  j["max_shapes"] = synth.max_shapes;
  j["vocab_extra_classes"] = synth.vocab_extra_classes;
  j["mask_noise"] = synth.mask_noise;
  j["held_out_classes"] = synth.held_out_classes;
  j["detection_fraction"] = synth.detection_fraction;
  j["heldout_images"] = heldout_images;
  return j;
}

DataConfig DataConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"num_images", "image_size", "thing_classes", "stuff_classes", "min_shapes", "max_shapes",
                  "vocab_extra_classes", "mask_noise", "held_out_classes", "detection_fraction", "heldout_images"},
                 "data config");
  DataConfig c;
  auto& s = c.synth;
  try {
    s.num_images = j.value("num_images", s.num_images);
    s.image_size = j.value("image_size", s.image_size);
    s.thing_classes = j.value("thing_classes", s.thing_classes);
    s.stuff_classes = j.value("stuff_classes", s.stuff_classes);
    s.min_shapes = j.value("min_shapes", s.min_shapes);
    s.max_shapes = j.value("max_shapes", s.max_shapes);
    s.vocab_extra_classes = j.value("vocab_extra_classes", s.vocab_extra_classes);
    s.mask_noise = j.value("mask_noise", s.mask_noise);
    s.held_out_classes = j.value("held_out_classes", s.held_out_classes);
    s.detection_fraction = j.value("detection_fraction", s.detection_fraction);
    c.heldout_images = j.value("heldout_images", c.heldout_images);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("data config: ") + e.what());
  }
  s.validate();
  if (c.heldout_images < 0) throw ValidationError("data config: heldout_images must be >= 0");
  return c;
}

nlohmann::ordered_json EvalConfig::to_json() const {
  return {{"score_thresh", inference.score_thresh}, {"overlap_thresh", inference.overlap_thresh}, {"top_k", top_k}};
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"score_thresh", "overlap_thresh", "top_k"}, "eval config");
  EvalConfig c;
  try {
    c.inference.score_thresh = j.value("score_thresh", c.inference.score_thresh);
    c.inference.overlap_thresh = j.value("overlap_thresh", c.inference.overlap_thresh);
    c.top_k = j.value("top_k", c.top_k);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("eval config: ") + e.what());
  }
  if (c.top_k < 1) throw ValidationError("eval config: top_k must be >= 1");
  return c;
}

nlohmann::ordered_json RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["seed"] = seed;
  j["seed_source"] = seed_source;
  j["data"] = data.to_json();
  j["train"] = train.to_json();
  j["eval"] = eval.to_json();
  return j;
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("VLOSS_SEED");
  if (!v) return std::nullopt;
  return parse_seed(v, "VLOSS_SEED");
}

RunConfig resolve_run_config(const std::optional<std::filesystem::path>& file, std::optional<std::uint64_t> seed_flag) {
  RunConfig rc;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ValidationError("config: cannot read " + file->string());
    std::stringstream ss;
    ss << in.rdbuf();
    const nlohmann::json j = yaml_to_json(ss.str());
    if (!j.is_null()) {
      reject_unknown(j, {"seed", "data", "train", "eval"}, "config");
      if (j.contains("seed")) {
        if (!j["seed"].is_number_integer() || j["seed"].get<long long>() < 0) {
          throw ValidationError("config: seed must be a non-negative integer");
        }
        rc.seed = j["seed"].get<std::uint64_t>();
        rc.seed_source = "config";
      }
      if (j.contains("data")) rc.data = DataConfig::from_json(j["data"]);
      if (j.contains("train")) {
        if (j["train"].contains("seed")) throw ValidationError("config: set the seed at the top level, not under train");
        rc.train = TrainConfig::from_json(j["train"]);
      }
      if (j.contains("eval")) rc.eval = EvalConfig::from_json(j["eval"]);
    }
  }
  if (seed_flag) {
    rc.seed = *seed_flag;
    rc.seed_source = "flag";
  }
  if (auto e = env_seed()) {
    rc.seed = *e;
    rc.seed_source = "env";
  }
  rc.train.seed = rc.seed;
  return rc;
}

}  // namespace vloss::cli

// "VLCK" container:
//   bytes 0..3  magic "VLCK"
//   u32         version (1)
//   u64         manifest length, then the manifest JSON
//   tensors     one VLT1 record per manifest "tensors" entry, in order
// Integers are little-endian.

#include <cstring>
#include <fstream>

#include "vloss/core/hash.hpp"
#include "vloss/core/serialize.hpp"
#include "vloss/train/trainer.hpp"

namespace vloss {
namespace {

constexpr char kMagic[4] = {'V', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& os, T v) {
  unsigned char b[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) b[i] = static_cast<unsigned char>(static_cast<std::uint64_t>(v) >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& is, const std::string& what) {
  unsigned char b[sizeof(T)];
  const auto at = static_cast<long long>(is.tellg());
  if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) {
    throw ValidationError("checkpoint: truncated " + what + " at byte offset " + std::to_string(at));
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return static_cast<T>(v);
}

nlohmann::ordered_json labels_json(const LabelSpace& l) {
  nlohmann::ordered_json j;
  j["names"] = l.names;
  j["is_thing"] = l.is_thing;
  return j;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ck, const std::filesystem::path& path) {
  const auto& items = ck.model.params.items();
  if (ck.opt.m.size() != items.size() || ck.opt.v.size() != items.size()) {
    throw ValidationError("save_checkpoint: optimizer state does not match the model");
  }
  nlohmann::ordered_json man;
  man["format"] = "VLCK";
  man["version"] = kVersion;
  man["dtype"] = Tensor<Scalar>::dtype() == DType::f32 ? "f32" : "f64";
  man["config"] = ck.config.to_json();
  man["config_hash"] = hex64(ck.config.hash());
  man["labels"] = labels_json(ck.labels);
  man["label_hash"] = hex64(ck.labels.hash());
  man["vocab"] = nlohmann::ordered_json::parse(ck.model.vocab.to_json());
  man["rng_state"] = ck.rng_state;
  man["step"] = ck.step;
  man["epoch"] = ck.epoch;
  man["opt_t"] = ck.opt.t;
  auto names = nlohmann::ordered_json::array();
  for (const auto& p : items) names.push_back(p.name);
  for (const auto& p : items) names.push_back("opt.m/" + p.name);
  for (const auto& p : items) names.push_back("opt.v/" + p.name);
  man["tensors"] = names;
  const std::string text = man.dump(1);

  std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw RuntimeAbort("cannot open " + tmp + " for writing");
    os.write(kMagic, 4);
    put_le<std::uint32_t>(os, kVersion);
    put_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& p : items) write_tensor(os, p.value.detach());
    for (std::size_t k = 0; k < items.size(); ++k)
      write_tensor(os, Tensor<Scalar>(items[k].value.shape(), ck.opt.m[k]));
    for (std::size_t k = 0; k < items.size(); ++k)
      write_tensor(os, Tensor<Scalar>(items[k].value.shape(), ck.opt.v[k]));
    if (!os) throw RuntimeAbort("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path, const LabelSpace* expected_labels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("checkpoint: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw ValidationError("checkpoint: " + path.string() + " is not a VLCK file (bad magic at byte offset 0)");
  }
  const auto version = get_le<std::uint32_t>(is, "version");
  if (version != kVersion) throw ValidationError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = get_le<std::uint64_t>(is, "manifest length");
  if (len > (1ull << 30)) throw ValidationError("checkpoint: implausible manifest length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw ValidationError("checkpoint: truncated manifest");

  nlohmann::json man;
  try {
    man = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError("checkpoint: malformed manifest at byte offset " + std::to_string(16 + e.byte));
  }
  Checkpoint<Scalar> ck;
  try {
    ck.config = TrainConfig::from_json(man.at("config"));
    if (hex64(ck.config.hash()) != man.at("config_hash").get<std::string>()) {
      throw ValidationError("checkpoint: config hash mismatch (stored " + man.at("config_hash").get<std::string>() +
                            ", recomputed " + hex64(ck.config.hash()) + ")");
    }
    const auto& lj = man.at("labels");
    ck.labels.names = lj.at("names").get<std::vector<std::string>>();
    ck.labels.is_thing = lj.at("is_thing").get<std::vector<bool>>();
    ck.labels.validate();
    if (hex64(ck.labels.hash()) != man.at("label_hash").get<std::string>()) {
      throw ValidationError("checkpoint: label space hash mismatch");
    }
    if (expected_labels && expected_labels->hash() != ck.labels.hash()) {
      throw ValidationError("checkpoint: label space " + hex64(ck.labels.hash()) + " differs from expected " +
                            hex64(expected_labels->hash()));
    }
    Vocabulary vocab = Vocabulary::from_json(man.at("vocab").dump());
    ck.rng_state = man.at("rng_state").get<std::string>();
    ck.step = man.at("step").get<long>();
    ck.epoch = man.at("epoch").get<Index>();
    ck.model = make_vl_model<Scalar>(ck.config.model, std::move(vocab), ck.config.seed);
    ck.opt = OptimState<Scalar>::init(ck.model.params, ck.config.adamw);
    ck.opt.t = man.at("opt_t").get<long>();
    const auto names = man.at("tensors").get<std::vector<std::string>>();
    auto& items = ck.model.params.items();
    if (names.size() != 3 * items.size()) {
      throw ValidationError("checkpoint: stores " + std::to_string(names.size()) + " tensors, model needs " +
                            std::to_string(3 * items.size()));
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      const std::size_t k = i % items.size();
      const int part = static_cast<int>(i / items.size());
      const std::string want = part == 0 ? items[k].name : (part == 1 ? "opt.m/" : "opt.v/") + items[k].name;
      if (names[i] != want) throw ValidationError("checkpoint: expected tensor '" + want + "', found '" + names[i] + "'");
      const Tensor<Scalar> t = read_tensor<Scalar>(is);
      if (t.shape() != items[k].value.shape()) {
        throw ValidationError("checkpoint: tensor '" + names[i] + "' has shape " + shape_str(t.shape()) + ", model needs " +
                              shape_str(items[k].value.shape()));
      }
      if (part == 0) {
        auto d = items[k].value.mutable_data();
        std::copy(t.data().begin(), t.data().end(), d.begin());
      } else {
        (part == 1 ? ck.opt.m[k] : ck.opt.v[k]) = t.values();
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("checkpoint: bad manifest: " + std::string(e.what()));
  }
  return ck;
}

template void save_checkpoint<float>(const Checkpoint<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const Checkpoint<double>&, const std::filesystem::path&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&, const LabelSpace*);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&, const LabelSpace*);

}  // namespace vloss

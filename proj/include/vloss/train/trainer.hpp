#pragma once

// AdamW, step learning-rate decay, per-stream loss recipes and the epoch loop.

#include <filesystem>
#include <functional>
#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vloss/data/dataset.hpp"
#include "vloss/losses/losses.hpp"
#include "vloss/model/vl_model.hpp"
#include "vloss/schedule/scheduler.hpp"

namespace vloss {

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// First and second moments per parameter, in ParamSet order.
template <typename Scalar>
struct OptimState {
  AdamWHyper hyper;
  long t = 0;
  std::vector<std::vector<Scalar>> m, v;

  static OptimState init(const ParamSet<Scalar>& ps, const AdamWHyper& h);
};

/// One decoupled-decay update of a single tensor; `t` is the step after increment.
template <typename Scalar>
void adamw_update(std::span<Scalar> p, std::span<const Scalar> g, std::span<Scalar> m, std::span<Scalar> v, long t,
                  double lr, const AdamWHyper& h, bool decay);

/// Advances `state.t` and updates every parameter from its accumulated gradient
/// (missing gradients count as zero). Decay applies only to params flagged for it.
template <typename Scalar>
void adamw_step(ParamSet<Scalar>& ps, OptimState<Scalar>& state, double lr_main, double lr_text);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(ParamSet<Scalar>& ps, double max_norm);

template <typename Scalar>
double grad_norm(const ParamSet<Scalar>& ps);

struct TrainConfig {
  Index epochs = 12;
  double base_lr = 2.0e-4;
  double text_encoder_lr = 2.0e-5;
  std::vector<double> decay_epochs{8, 11};
  double decay_factor = 0.1;
  Index batch_detection = 2;
  Index batch_panoptic = 2;
  Index batch_caption = 4;
  Strategy strategy = Strategy::stt;
  std::optional<Index> split_epoch;
  std::uint64_t seed = 0;
  LossWeights weights;
  AdamWHyper adamw;
  double clip_norm = 1.0;
  ClsMode detection_cls = ClsMode::positive_only;
  double no_object_weight = 1.0;
  bool hflip = false;
  /// Adds the matched losses of every intermediate decoder state (averaged with the final one).
  bool deep_supervision = true;
  /// Stops after this many optimizer steps when set.
  std::optional<long> max_steps;
  /// Split directory names under the data root; empty disables a stream.
  std::string panoptic_split = "panoptic";
  std::string detection_split = "detection";
  std::string caption_split = "caption";
  VLModelConfig model;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Unknown keys are rejected; missing keys keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
  std::uint64_t hash() const;
};

/// Group base rate times decay_factor^(decay epochs already reached).
double lr_at(double epoch_progress, const TrainConfig& cfg, ParamGroup group);

struct TrainData {
  std::optional<Split> panoptic, detection, caption;

  /// Loads the splits named in `cfg`; a named but missing split is rejected.
  static TrainData load(const std::filesystem::path& root, const TrainConfig& cfg);
  /// Union of the dense label spaces (panoptic first).
  LabelSpace label_space() const;
  const Split* split(Stream s) const;
};

/// Per-image targets for the mask losses, in the model's scalar type.
template <typename Scalar>
MatchTargets<Scalar> make_targets(const Sample& s);

/// Mean over the batch of the per-image dense loss terms.
template <typename Scalar>
LossTerms<Scalar> dense_loss_terms(const VLModel<Scalar>& model, const std::vector<const Sample*>& batch,
                                   const Tensor<Scalar>& e_cls, const LossWeights& w, ClsMode mode,
                                   double no_object_weight, bool deep_supervision = false);

/// Symmetric image-text contrastive term for one caption batch.
template <typename Scalar>
LossTerms<Scalar> caption_loss_terms(const VLModel<Scalar>& model, const std::vector<const Sample*>& batch);

/// e_img for one image, [1, D].
template <typename Scalar>
Tensor<Scalar> image_embedding(const VLModel<Scalar>& model, const Tensor<float>& hwc);

struct StepLog {
  long step = 0;
  Index epoch = 0;
  Stream stream = Stream::panoptic;
  LossReport report;
  double grad_norm = 0;
  double lr_main = 0;
};

template <typename Scalar>
struct Checkpoint {
  TrainConfig config;
  LabelSpace labels;
  VLModel<Scalar> model;
  OptimState<Scalar> opt;
  std::string rng_state;
  long step = 0;
  Index epoch = 0;
};

template <typename Scalar>
void save_checkpoint(const Checkpoint<Scalar>& ckpt, const std::filesystem::path& path);

/// Rejects missing files, corrupt containers, a stored config whose hash does
/// not match its recorded hash, and (when given) a label space other than
/// `expected_labels`.
template <typename Scalar>
Checkpoint<Scalar> load_checkpoint(const std::filesystem::path& path, const LabelSpace* expected_labels = nullptr);

struct TrainHooks {
  std::function<void(const StepLog&)> on_step;
  /// When set: metrics.csv, last.vlck and best.vlck (lowest epoch-mean loss) go here.
  std::optional<std::filesystem::path> out_dir;
};

template <typename Scalar>
struct TrainResult {
  Checkpoint<Scalar> last;
  std::vector<StepLog> log;
  std::vector<double> epoch_mean_loss;
};

/// Runs the full schedule. Non-finite losses or gradients abort with
/// RuntimeAbort naming the step and stream.
template <typename Scalar>
TrainResult<Scalar> train(const TrainConfig& cfg, const TrainData& data, const TrainHooks& hooks = {});

/// Vocabulary over the class names and captions of the loaded splits.
Vocabulary vocab_for(const TrainData& data, const TrainConfig& cfg, const std::vector<std::string>& extra_names = {});

}  // namespace vloss

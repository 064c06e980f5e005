#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vloss/core/ops.hpp"
#include "vloss/train/trainer.hpp"

using namespace vloss;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("vloss_trainer_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ParamSet<double> scalar_params(double p0, bool decay) {
  ParamSet<double> ps;
  ps.add("p", Tensor<double>::scalar(p0), ParamGroup::main, decay);
  return ps;
}

void set_grad(ParamSet<double>& ps, double g) {
  auto& t = ps.items()[0].value;
  t.zero_grad();
  detail::grad_buffer(t)[0] = g;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.model.seg.dim = 16;
  c.model.seg.queries = 6;
  c.model.seg.decoder_layers = 1;
  c.model.seg.heads = 2;
  c.model.seg.image_h = c.model.seg.image_w = 32;
  c.model.text.dim = 16;
  c.model.text.heads = 2;
  c.model.text.layers = 1;
  c.epochs = 2;
  c.decay_epochs = {1};
  c.batch_panoptic = 2;
  c.batch_detection = 2;
  c.batch_caption = 2;
  return c;
}

SynthConfig tiny_synth(Index n) {
  SynthConfig s;
  s.num_images = n;
  s.image_size = 32;
  s.max_shapes = 2;
  return s;
}

TrainData tiny_data(bool all_streams) {
  TrainData d;
  const SynthConfig s = tiny_synth(4);
  d.panoptic = generate_synth_panoptic(s, 1);
  if (all_streams) {
    d.detection = generate_synth_detection(s, 2);
    d.caption = generate_synth_captions(s, 3);
  }
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

TEST(AdamW, SingleStepClosedForm) {
  auto ps = scalar_params(1.0, true);
  AdamWHyper h;
  h.weight_decay = 0.01;
  auto st = OptimState<double>::init(ps, h);
  set_grad(ps, 1.0);
  adamw_step(ps, st, 0.1, 0.1);
  EXPECT_EQ(st.t, 1);
  EXPECT_NEAR(ps.items()[0].value.item(), 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01), 1e-15);
  EXPECT_NEAR(ps.items()[0].value.item(), 0.8990, 1e-4);
}

TEST(AdamW, ZeroGradientCases) {
  AdamWHyper h;
  h.weight_decay = 0.0;
  auto ps = scalar_params(0.7, true);
  auto st = OptimState<double>::init(ps, h);
  adamw_step(ps, st, 0.1, 0.1);
  EXPECT_EQ(ps.items()[0].value.item(), 0.7);
  h.weight_decay = 0.05;
  auto ps2 = scalar_params(0.7, true);
  auto st2 = OptimState<double>::init(ps2, h);
  adamw_step(ps2, st2, 0.1, 0.1);
  EXPECT_NEAR(ps2.items()[0].value.item(), 0.7 * (1 - 0.1 * 0.05), 1e-15);
  // no decay for parameters flagged off
  auto ps3 = scalar_params(0.7, false);
  auto st3 = OptimState<double>::init(ps3, h);
  adamw_step(ps3, st3, 0.1, 0.1);
  EXPECT_EQ(ps3.items()[0].value.item(), 0.7);
}

TEST(AdamW, FiveStepsMatchScalarRecursion) {
  const std::vector<double> grads{0.3, -1.2, 0.05, 2.0, -0.4};
  AdamWHyper h;
  h.weight_decay = 0.02;
  auto ps = scalar_params(0.5, true);
  auto st = OptimState<double>::init(ps, h);
  double p = 0.5, m = 0, v = 0;
  for (int t = 1; t <= 5; ++t) {
    const double g = grads[t - 1], lr = 0.01 * t;
    set_grad(ps, g);
    adamw_step(ps, st, lr, 1.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    p = p - lr * (mh / (std::sqrt(vh) + 1e-8) + 0.02 * p);
    EXPECT_NEAR(ps.items()[0].value.item(), p, 1e-12) << t;
  }
}

TEST(AdamW, RejectsMismatchedState) {
  auto ps = scalar_params(1.0, true);
  auto st = OptimState<double>::init(ps, {});
  st.m[0].push_back(0.0);
  EXPECT_THROW(adamw_step(ps, st, 0.1, 0.1), ValidationError);
  auto st2 = OptimState<double>::init(ps, {});
  EXPECT_THROW(adamw_step(ps, st2, 0.0, 0.1), ValidationError);
  ParamSet<double> two;
  two.add("a", Tensor<double>::scalar(1), ParamGroup::main, true);
  two.add("b", Tensor<double>::scalar(1), ParamGroup::main, true);
  EXPECT_THROW(adamw_step(two, st2, 0.1, 0.1), ValidationError);
}

TEST(AdamW, TextGroupUsesItsOwnRate) {
  ParamSet<double> ps;
  ps.add("a", Tensor<double>::scalar(1), ParamGroup::main, false);
  ps.add("b", Tensor<double>::scalar(1), ParamGroup::text_encoder, false);
  auto st = OptimState<double>::init(ps, {});
  for (auto& p : ps.items()) detail::grad_buffer(p.value)[0] = 1.0;
  adamw_step(ps, st, 0.1, 0.01);
  EXPECT_NEAR(1 - ps.items()[0].value.item(), 0.1, 1e-7);
  EXPECT_NEAR(1 - ps.items()[1].value.item(), 0.01, 1e-8);
}

TEST(LearningRate, Examples) {
  const TrainConfig c;
  EXPECT_NEAR(lr_at(9, c, ParamGroup::main), 2.0e-5, 1e-18);
  EXPECT_NEAR(lr_at(11.5, c, ParamGroup::main), 2.0e-6, 1e-18);
  EXPECT_NEAR(lr_at(3, c, ParamGroup::text_encoder), 2.0e-5, 1e-18);
  EXPECT_EQ(lr_at(0, c, ParamGroup::main), 2.0e-4);
  EXPECT_THROW(lr_at(12.5, c, ParamGroup::main), ValidationError);
  EXPECT_THROW(lr_at(-0.1, c, ParamGroup::main), ValidationError);
}

TEST(LearningRate, MonotoneNonIncreasing) {
  const TrainConfig c;
  for (ParamGroup g : {ParamGroup::main, ParamGroup::text_encoder}) {
    double prev = lr_at(0, c, g);
    for (double e = 0.05; e <= 12.0; e += 0.05) {
      const double lr = lr_at(e, c, g);
      EXPECT_LE(lr, prev);
      prev = lr;
    }
  }
}

TEST(GradientClipping, PostClipNormBounded) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    ParamSet<double> ps;
    for (int k = 0; k < 3; ++k) {
      auto t = ps.add("p" + std::to_string(k), Tensor<double>::zeros({4}), ParamGroup::main, true);
      std::normal_distribution<double> n(0, 1 + trial);
      for (auto& g : detail::grad_buffer(t)) g = n(rng);
    }
    const double before = grad_norm(ps);
    const double reported = clip_grad_norm(ps, 1.0);
    EXPECT_EQ(reported, before);
    EXPECT_LE(grad_norm(ps), 1.0 + 1e-9);
    if (before <= 1.0) EXPECT_EQ(grad_norm(ps), before);
  }
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig c = tiny_config();
  c.strategy = Strategy::mix;
  c.detection_cls = ClsMode::all;
  c.max_steps = 17;
  const TrainConfig back = TrainConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json().dump(), c.to_json().dump());
  EXPECT_EQ(back.hash(), c.hash());
  auto j = c.to_json();
  j["bogus"] = 1;
  EXPECT_THROW(TrainConfig::from_json(j), ValidationError);
  auto j2 = c.to_json();
  j2["decay_epochs"] = {2};
  EXPECT_THROW(TrainConfig::from_json(j2), ValidationError);
  auto j3 = c.to_json();
  j3["model"]["dim"] = 15;
  EXPECT_THROW(TrainConfig::from_json(j3), ValidationError);
  auto j4 = c.to_json();
  j4["base_lr"] = 0;
  EXPECT_THROW(TrainConfig::from_json(j4), ValidationError);
  TrainConfig d = c;
  d.seed = 1;
  EXPECT_NE(d.hash(), c.hash());
}

TEST(Trainer, MissingSplitRejected) {
  const auto dir = temp_dir("missing");
  EXPECT_THROW(TrainData::load(dir, tiny_config()), ValidationError);
}

TEST(Trainer, DeterministicMetricsAndCheckpointRoundTrip) {
  TrainConfig c = tiny_config();
  c.max_steps = 5;
  const TrainData data = tiny_data(true);
  const auto a = temp_dir("det_a"), b = temp_dir("det_b");
  train<float>(c, data, {{}, a});
  train<float>(c, data, {{}, b});
  const std::string csv = slurp(a / "metrics.csv");
  EXPECT_EQ(csv, slurp(b / "metrics.csv"));
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 6);
  EXPECT_EQ(slurp(a / "last.vlck"), slurp(b / "last.vlck"));

  const auto ck = load_checkpoint<float>(a / "last.vlck");
  EXPECT_EQ(ck.step, 5);
  const auto& smp = data.panoptic->samples[0];
  const auto e_cls = ck.model.class_embeddings(ck.labels.names);
  const auto p1 = predict_image(ck.model, smp.image, e_cls);
  save_checkpoint(ck, a / "again.vlck");
  const auto ck2 = load_checkpoint<float>(a / "again.vlck");
  const auto p2 = predict_image(ck2.model, smp.image, ck2.model.class_embeddings(ck2.labels.names));
  EXPECT_EQ(p1.class_logits.values(), p2.class_logits.values());
  EXPECT_EQ(p1.mask_logits.values(), p2.mask_logits.values());
  EXPECT_EQ(param_hash(ck.model.params), param_hash(ck2.model.params));
  EXPECT_EQ(ck2.opt.m, ck.opt.m);
  EXPECT_EQ(ck2.opt.t, ck.opt.t);
  EXPECT_EQ(slurp(a / "again.vlck"), slurp(a / "last.vlck"));

  LabelSpace other = ck.labels;
  other.add("purple star", true);
  EXPECT_THROW(load_checkpoint<float>(a / "last.vlck", &other), ValidationError);
  EXPECT_NO_THROW(load_checkpoint<float>(a / "last.vlck", &ck.labels));
  EXPECT_THROW(load_checkpoint<float>(a / "nope.vlck"), ValidationError);

  // a float checkpoint widens into a double model
  const auto wide = load_checkpoint<double>(a / "last.vlck");
  EXPECT_EQ(wide.model.params.items()[0].value[0], static_cast<double>(ck.model.params.items()[0].value[0]));
}

TEST(Trainer, TamperedConfigRejected) {
  TrainConfig c = tiny_config();
  c.max_steps = 1;
  const auto dir = temp_dir("tamper");
  train<float>(c, tiny_data(false), {{}, dir});
  std::string bytes = slurp(dir / "last.vlck");
  const auto at = bytes.find("\"decay_factor\": 0.1");
  ASSERT_NE(at, std::string::npos);
  bytes.replace(at, 19, "\"decay_factor\": 0.2");
  std::ofstream(dir / "bad.vlck", std::ios::binary) << bytes;
  try {
    load_checkpoint<float>(dir / "bad.vlck");
    FAIL() << "tampered checkpoint loaded";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("config hash mismatch"), std::string::npos) << e.what();
  }
  std::ofstream(dir / "junk.vlck", std::ios::binary) << "VLCX";
  EXPECT_THROW(load_checkpoint<float>(dir / "junk.vlck"), ValidationError);
}

TEST(Trainer, StrategiesRunTheSameNumberOfSteps) {
  const TrainData data = tiny_data(true);
  std::vector<std::size_t> steps;
  for (Strategy s : {Strategy::stt, Strategy::mix}) {
    TrainConfig c = tiny_config();
    c.epochs = 1;
    c.decay_epochs = {};
    c.strategy = s;
    steps.push_back(train<float>(c, data).log.size());
  }
  EXPECT_EQ(steps[0], steps[1]);
  EXPECT_EQ(steps[0], 6u);  // 2 + 2 + 2 batches of 2 over 4 images per stream
}

TEST(Trainer, NonFiniteLossAborts) {
  TrainConfig c = tiny_config();
  c.base_lr = 1e30;
  c.text_encoder_lr = 1e30;
  c.max_steps = 10;
  try {
    train<float>(c, tiny_data(false));
    FAIL() << "expected an abort";
  } catch (const RuntimeAbort& e) {
    EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
  }
}

TEST(Trainer, TinyOverfitDropsLoss) {
  TrainConfig c = tiny_config();
  c.epochs = 200;
  c.decay_epochs = {};
  c.base_lr = 1e-3;
  c.batch_panoptic = 4;
  c.model.seg.decoder_layers = 2;
  TrainData d;
  SynthConfig s = tiny_synth(8);
  d.panoptic = generate_synth_panoptic(s, 5);
  c.detection_split = c.caption_split = "";
  const auto res = train<float>(c, d);
  const double first = res.log.front().report.total;
  double last = 0;
  for (std::size_t i = res.log.size() - 2; i < res.log.size(); ++i) last += res.log[i].report.total / 2;
  std::printf("initial %.4f final %.4f over %zu steps\n", first, last, res.log.size());
  EXPECT_LT(last, 0.1 * first);
}

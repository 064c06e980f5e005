// vloss: gen | train | eval | verify | schedule-sim
//
// Exit codes: 0 success, 1 validation error, 2 runtime abort.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "run_config.hpp"
#include "vloss/eval/evaluator.hpp"
#include "vloss/schedule/scheduler.hpp"
#include "vloss/train/trainer.hpp"
#include "vloss/verify/suites.hpp"

namespace fs = std::filesystem;
using namespace vloss;
using namespace vloss::cli;

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  bool dry_run = false;
};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

RunConfig load_config(const Globals& g) {
  std::optional<fs::path> file;
  if (!g.config.empty()) file = g.config;
  return resolve_run_config(file, g.seed);
}

// Empty or absent directories are fine; anything else needs --force.
void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw ValidationError(dir.string() + " exists and is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw ValidationError("output directory " + dir.string() + " is not empty (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream f(p);
  if (!f) throw RuntimeAbort("cannot write " + p.string());
  f << text;
  if (!f) throw RuntimeAbort("write failed: " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ValidationError("cannot read " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_provenance(const fs::path& dir, const RunConfig& rc, const std::string& command) {
  auto j = rc.to_json();
  j["command"] = command;
  write_text(dir / "config.json", j.dump(2) + "\n");
}

// ---- gen ----

int cmd_gen(const Globals& g) {
  const RunConfig rc = load_config(g);
  const fs::path out = g.out.empty() ? fs::path("data") : fs::path(g.out);
  const auto& s = rc.data.synth;
  SynthConfig held = s;
  held.num_images = rc.data.heldout_images;
  const Index det = static_cast<Index>(std::llround(s.num_images * s.detection_fraction));
  if (g.dry_run) {
    std::cout << "would write " << out.string() << ": panoptic " << s.num_images << ", detection " << det
              << ", caption " << s.num_images << ", heldout " << held.num_images << " images (seed " << rc.seed
              << ")\n";
    return 0;
  }
  prepare_out_dir(out, g.force);
  const std::uint64_t k = rc.seed;
  const std::vector<Split> splits{generate_synth_panoptic(s, splitmix(k ^ 1)),
                                  generate_synth_detection(s, splitmix(k ^ 2)),
                                  generate_synth_captions(s, splitmix(k ^ 3)),
                                  generate_synth_heldout(held, splitmix(k ^ 4))};
  for (const auto& sp : splits) {
    write_split(out, sp);
    std::cout << sp.name << ": " << sp.samples.size() << " images\n";
  }
  write_provenance(out, rc, "gen");
  return 0;
}

// ---- train ----

struct TrainFlags {
  std::string data = "data";
  std::string strategy;
  std::optional<Index> epochs;
  std::string detection_cls;
  std::optional<long> max_steps;
  bool smoke = false;
};

int cmd_train(const Globals& g, const TrainFlags& f) {
  RunConfig rc = load_config(g);
  auto& c = rc.train;
  if (!f.strategy.empty()) c.strategy = parse_strategy(f.strategy);
  if (f.epochs) c.epochs = *f.epochs;
  if (!f.detection_cls.empty()) {
    if (f.detection_cls == "all") c.detection_cls = ClsMode::all;
    else if (f.detection_cls == "positive_only") c.detection_cls = ClsMode::positive_only;
    else throw ValidationError("--detection-cls must be all or positive_only");
  }
  if (f.max_steps) c.max_steps = *f.max_steps;
  if (f.smoke) c.max_steps = std::min<long>(c.max_steps.value_or(10), 10);
  c.validate();
  const fs::path out = g.out.empty() ? fs::path("runs") / "train" : fs::path(g.out);
  const TrainData data = TrainData::load(f.data, c);

  if (g.dry_run) {
    std::cout << rc.to_json().dump(2) << "\n";
    for (Stream s : {Stream::detection, Stream::panoptic, Stream::caption})
      if (const Split* sp = data.split(s)) std::cout << to_string(s) << ": " << sp->samples.size() << " images\n";
    return 0;
  }
  prepare_out_dir(out, g.force);
  write_provenance(out, rc, "train");
  TrainHooks hooks;
  hooks.out_dir = out;
  const auto t0 = std::chrono::steady_clock::now();
  long last_print = -1;
  hooks.on_step = [&](const StepLog& s) {
    if (s.step / 50 != last_print / 50 || last_print < 0) {
      last_print = s.step;
      std::cout << "step " << s.step << " epoch " << s.epoch << " " << to_string(s.stream) << " loss " << s.report.total
                << "\n";
    }
  };
  const auto res = train<float>(c, data, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << "done: " << res.log.size() << " steps in " << secs << " s; checkpoints in " << out.string() << "\n";
  return 0;
}

// ---- eval ----

struct EvalFlags {
  std::string ckpt;
  std::string split;
  std::string classes;
  bool per_class = false;
  bool retrieval = false;
};

Split load_any_split(const fs::path& p) {
  // The stream is recorded in the split index; try each.
  for (Stream s : {Stream::panoptic, Stream::detection, Stream::caption}) {
    try {
      return load_dataset(p, s);
    } catch (const ValidationError&) {
    }
  }
  return load_dataset(p, Stream::panoptic);  // rethrows the panoptic error
}

int cmd_eval(const Globals& g, const EvalFlags& f) {
  const RunConfig rc = load_config(g);
  if (f.ckpt.empty() || f.split.empty()) throw ValidationError("eval needs --ckpt and --split");
  if (!fs::exists(f.ckpt)) throw ValidationError("checkpoint not found: " + f.ckpt);
  const Split split = load_any_split(f.split);
  const auto ck = load_checkpoint<float>(f.ckpt);
  LabelSpace classes = ck.labels;
  if (!f.classes.empty()) classes = extend_label_space(classes, read_class_list(read_text(f.classes)));
  if (split.stream != Stream::caption)
    for (const auto& n : split.labels.names)
      if (classes.index_of(n) < 0) {
        throw ValidationError("class '" + n + "' of split '" + split.name +
                              "' is not in the checkpoint labels (pass it with --classes)");
      }
  if (g.dry_run) {
    std::cout << "would evaluate " << split.samples.size() << " images of " << split.name << " against "
              << classes.size() << " classes\n";
    return 0;
  }
  const fs::path out = g.out.empty() ? fs::path("runs") / "eval" : fs::path(g.out);
  prepare_out_dir(out, g.force);
  write_provenance(out, rc, "eval");

  nlohmann::ordered_json j;
  j["checkpoint"] = f.ckpt;
  j["split"] = split.name;
  j["zero_shot"] = !f.classes.empty();
  if (split.stream == Stream::caption || f.retrieval) {
    const auto r = evaluate_retrieval(ck.model, split);
    j["retrieval"] = {{"image_to_text", r.image_to_text}, {"text_to_image", r.text_to_image}, {"pairs", r.pairs}};
    std::cout << "retrieval i2t " << r.image_to_text << " t2i " << r.text_to_image << "\n";
  }
  if (split.stream != Stream::caption) {
    EvalOptions opts;
    opts.inference = rc.eval.inference;
    opts.top_k = rc.eval.top_k;
    const EvalReport rep = evaluate_split(ck.model, split, classes, opts);
    j["classes"] = classes.names;
    j["panoptic"] = rep.pq.to_json(f.per_class);
    j["instance"] = rep.ap.to_json();
    j["param_hash_before"] = rep.param_hash_before;
    j["param_hash_after"] = rep.param_hash_after;
    write_text(out / "eval.csv", rep.pq.to_csv(f.per_class));
    std::cout << "PQ_all " << rep.pq.pq_all << " PQ_th " << rep.pq.pq_th << " PQ_st " << rep.pq.pq_st << " AP "
              << rep.ap.ap << "\n";
  }
  write_text(out / "eval.json", j.dump(2) + "\n");
  return 0;
}

// ---- verify ----

int cmd_verify(const Globals& g, const std::string& suite) {
  std::vector<std::string> names;
  if (suite == "all") names = verify_suite_names();
  else names = {suite};
  for (const auto& n : names)
    if (std::find(verify_suite_names().begin(), verify_suite_names().end(), n) == verify_suite_names().end()) {
      throw ValidationError("unknown verify suite '" + n + "'");
    }
  if (g.dry_run) {
    for (const auto& n : names) std::cout << "would run " << n << "\n";
    return 0;
  }
  bool ok = true;
  for (const auto& n : names) {
    std::cout << "# suite " << n << "\n";
    const SuiteReport r = run_verify_suite(n);
    r.write_tap(std::cout);
    std::cout << "# " << n << ": " << (r.checks.size() - r.failures()) << "/" << r.checks.size() << " passed in "
              << r.seconds << " s\n";
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

// ---- schedule-sim ----

struct ScheduleFlags {
  std::string strategy;
  Index detection = 4, panoptic = 4, caption = 4;
  std::optional<Index> epoch;
  std::optional<Index> epochs;
  std::optional<Index> split_epoch;
};

int cmd_schedule(const Globals& g, const ScheduleFlags& f) {
  const RunConfig rc = load_config(g);
  const Strategy st = f.strategy.empty() ? rc.train.strategy : parse_strategy(f.strategy);
  const Index total = f.epochs.value_or(rc.train.epochs);
  if (total < 1) throw ValidationError("--epochs must be >= 1");
  const std::vector<DatasetHandle> h{{Stream::detection, f.detection, rc.train.batch_detection},
                                     {Stream::panoptic, f.panoptic, rc.train.batch_panoptic},
                                     {Stream::caption, f.caption, rc.train.batch_caption}};
  PlanOptions po;
  po.split_epoch = f.split_epoch ? f.split_epoch : rc.train.split_epoch;
  nlohmann::ordered_json out = nlohmann::ordered_json::array();
  const Index first = f.epoch.value_or(0), last = f.epoch ? *f.epoch + 1 : total;
  if (first < 0 || first >= total) throw ValidationError("--epoch must be in [0, epochs)");
  for (Index e = first; e < last; ++e) {
    const EpochPlan p = build_epoch_plan(st, h, e, total, rc.seed, po);
    out.push_back(nlohmann::ordered_json::parse(plan_stats_json(plan_stats(p))));
  }
  const std::string text = (f.epoch ? out[0] : out).dump(2) + "\n";
  std::cout << text;
  if (!g.out.empty() && !g.dry_run) {
    prepare_out_dir(g.out, g.force);
    write_text(fs::path(g.out) / "schedule.json", text);
    write_provenance(g.out, rc, "schedule-sim");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vloss: synthetic data, training, evaluation and verification"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  Globals g;
  app.add_option("--config", g.config, "run config (YAML or JSON)");
  app.add_option("--seed", g.seed, "seed (VLOSS_SEED takes precedence)");
  app.add_option("--out", g.out, "output directory");
  app.add_flag("--force", g.force, "replace a non-empty output directory");
  app.add_flag("--dry-run", g.dry_run, "report what would happen, write nothing");

  auto* gen = app.add_subcommand("gen", "write the synthetic panoptic, detection, caption and held-out splits");

  TrainFlags tf;
  auto* tr = app.add_subcommand("train", "train a model on a generated data tree");
  tr->add_option("--data", tf.data, "data root")->capture_default_str();
  tr->add_option("--strategy", tf.strategy, "stt | mix | pretrain_finetune");
  tr->add_option("--epochs", tf.epochs, "epochs");
  tr->add_option("--detection-cls", tf.detection_cls, "all | positive_only");
  tr->add_option("--max-steps", tf.max_steps, "stop after this many steps");
  tr->add_flag("--smoke", tf.smoke, "stop after 10 steps");

  EvalFlags ef;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  ev->add_option("--ckpt", ef.ckpt, "checkpoint file")->required();
  ev->add_option("--split", ef.split, "split directory")->required();
  ev->add_option("--classes", ef.classes, "class list to extend the checkpoint labels with");
  ev->add_flag("--per-class", ef.per_class, "per-class rows in the reports");
  ev->add_flag("--retrieval", ef.retrieval, "also report image-text retrieval");

  std::string suite;
  auto* ve = app.add_subcommand("verify", "run an oracle suite: gradcheck | hungarian | metrics | scheduler | all");
  ve->add_option("suite", suite, "suite name")->required();

  ScheduleFlags sf;
  auto* sc = app.add_subcommand("schedule-sim", "print epoch plan statistics as JSON");
  sc->add_option("--strategy", sf.strategy, "stt | mix | pretrain_finetune");
  sc->add_option("--detection", sf.detection, "detection batches per epoch")->capture_default_str();
  sc->add_option("--panoptic", sf.panoptic, "panoptic batches per epoch")->capture_default_str();
  sc->add_option("--caption", sf.caption, "caption batches per epoch")->capture_default_str();
  sc->add_option("--epoch", sf.epoch, "single epoch to plan (default: all)");
  sc->add_option("--epochs", sf.epochs, "total epochs");
  sc->add_option("--split-epoch", sf.split_epoch, "pretrain_finetune switch epoch");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen(g);
    if (*tr) return cmd_train(g, tf);
    if (*ev) return cmd_eval(g, ef);
    if (*ve) return cmd_verify(g, suite);
    if (*sc) return cmd_schedule(g, sf);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const RuntimeAbort& e) {
    std::cerr << "abort: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "abort: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

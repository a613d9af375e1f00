// Command-line surface: dataset generation, training, sampling, evaluation,
// and the paired bidirectional/unidirectional ablation.
//
// Exit codes: 0 success, 1 usage error, 2 runtime/data error.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "btdm/image_io.hpp"
#include "btdm/metrics.hpp"
#include "btdm/sampling.hpp"
#include "btdm/toy_data.hpp"
#include "btdm/training.hpp"
#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace btdm;

namespace {

struct GenArgs {
  std::string out;
  int train = 64, test = 16, frames = 16, size = 32, identities = 8;
  std::uint64_t seed = 0;
};

void run_gen_data(const GenArgs& a) {
  auto make = [&](int count, std::uint64_t id_base, std::uint64_t motion_base,
                  std::uint32_t id_offset) {
    std::vector<SequenceSample> out;
    for (int i = 0; i < count; ++i) {
      std::uint64_t identity = a.seed * 1000 + id_base + (std::uint64_t)(i % a.identities);
      std::uint64_t motion = a.seed * 100000 + motion_base + (std::uint64_t)i;
      SequenceSample s = generate_sequence(identity, motion, a.frames, a.size, a.size);
      s.id = id_offset + (std::uint32_t)i;
      out.push_back(std::move(s));
    }
    return out;
  };
  write_dataset(make(a.train, 0, 1000, 0), (fs::path(a.out) / "train").string());
  write_dataset(make(a.test, 0, 500000, 10000), (fs::path(a.out) / "test").string());
  std::cout << "wrote " << a.train << " train / " << a.test << " test sequences under " << a.out
            << "\n";
}

struct TrainArgs {
  std::string data, config, out, log, mode = "single-image";
  int steps = -1, batch = -1, k = -1;
  double lr = 0;
  std::uint64_t seed = 0;
  bool seed_set = false;
  bool uni = false, paper = false;
  int threads = 0;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg;
  if (!a.config.empty()) cfg = TrainConfig::from_file(a.config);
  if (!a.data.empty()) cfg.data_dir = a.data;
  if (!a.mode.empty()) cfg.mode = mode_from_name(a.mode);
  if (a.paper) cfg.apply_paper_defaults();
  if (a.steps >= 0) cfg.steps = a.steps;
  if (a.batch > 0) cfg.batch = a.batch;
  if (a.k > 0) cfg.K = a.k;
  if (a.lr > 0) cfg.lr = a.lr;
  if (a.seed_set) cfg.seed = a.seed;
  if (!a.out.empty()) cfg.checkpoint_path = a.out;
  if (!a.log.empty()) cfg.loss_log_path = a.log;
  cfg.unidirectional = a.uni || cfg.unidirectional;
  return cfg;
}

void run_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_train_config(a);
  if (cfg.data_dir.empty()) throw ConfigError("train: --data is required");
  if (cfg.checkpoint_path.empty()) throw ConfigError("train: --out is required");
  if (cfg.loss_log_path.empty()) cfg.loss_log_path = cfg.checkpoint_path + ".losses.jsonl";
  TrainResult r = train(cfg);
  if (r.aborted) throw TensorError("train: aborted on non-finite loss at step " +
                                   std::to_string(r.final_step + 1) +
                                   "; last good checkpoint retained");
  std::cout << "trained " << r.final_step << " steps; checkpoint at " << cfg.checkpoint_path
            << "\n";
  std::cout << "config: " << cfg.echo_json() << "\n";
}

struct SampleArgs {
  std::string ckpt, poses, cond = "none", out, grid;
  unsigned id = 0;
  int k = 50;
  std::string first_direction = "forward";
  bool uni = false;
  std::uint64_t seed = 0;
  int threads = 0;
};

void run_sample(const SampleArgs& a) {
  CheckpointMeta meta = peek_checkpoint(a.ckpt);
  DenoiserModel model(meta.model_cfg, 0);
  load_checkpoint(a.ckpt, model.params, nullptr);
  NoiseSchedule sched = make_schedule(meta.K, meta.lambda_max, meta.lambda_min);

  SequenceSample ref = read_sequence_file(a.poses);
  if (ref.H != model.cfg.height || ref.W != model.cfg.width || ref.P != model.cfg.pose_channels)
    throw TensorError("sample: pose sequence dims do not match the checkpointed model");

  Tensor cond;
  bool has_cond = false;
  if (a.cond != "none") {
    cond = read_sequence_file(a.cond).condition;
    has_cond = true;
  }

  SamplerConfig scfg;
  scfg.k_sample = a.k;
  scfg.seed = a.seed;
  scfg.first_direction =
      a.first_direction == "backward" ? TimeDir::Backward : TimeDir::Forward;

  auto denoiser = model_denoiser(model, ref.poses, has_cond ? &cond : nullptr);
  Shape frame_shape{model.cfg.channels, model.cfg.height, model.cfg.width};
  std::vector<Tensor> frames =
      a.uni ? unidirectional_sample(ref.T, frame_shape, sched, denoiser, scfg)
            : bidirectional_recursive_sample(ref.T, frame_shape, sched, denoiser, scfg);

  SequenceSample out = ref;  // poses and condition carried through
  out.id = a.id;
  out.frames = frames;
  if (has_cond) out.condition = cond;
  write_dataset({out}, a.out);
  if (!a.grid.empty()) write_png_grid(a.grid, frames, 8);
  std::cout << "sampled " << ref.T << " frames -> " << a.out << "\n";
}

struct EvalArgs {
  std::string pred, gt, report;
};

EvalReport evaluate_dirs(const std::string& pred_dir, const std::string& gt_dir) {
  std::vector<SequenceSample> pred = read_dataset(pred_dir);
  std::vector<SequenceSample> gt = read_dataset(gt_dir);
  if (pred.size() != gt.size())
    throw TensorError("eval: sequence count mismatch: pred has " + std::to_string(pred.size()) +
                      ", gt has " + std::to_string(gt.size()));
  std::vector<SequenceScores> scores;
  for (const auto& p : pred) {
    const SequenceSample* match = nullptr;
    for (const auto& g : gt)
      if (g.id == p.id) match = &g;
    if (!match) throw TensorError("eval: no ground-truth sequence with id " + std::to_string(p.id));
    SequenceScores s = score_sequence(p.frames, match->frames);
    s.id = p.id;
    scores.push_back(std::move(s));
  }
  return aggregate_report(std::move(scores));
}

void run_eval(const EvalArgs& a) {
  EvalReport r = evaluate_dirs(a.pred, a.gt);
  json echo{{"pred", a.pred}, {"gt", a.gt}};
  r.config_echo = echo.dump();
  std::ofstream os(a.report);
  if (!os) throw TensorError("eval: cannot open report path " + a.report);
  os << r.to_json() << "\n";
  std::cout << "ssim_mean=" << r.ssim_mean << " tconsist_mean=" << r.tconsist_mean
            << " drift_slope=" << r.drift_slope << "\n";
}

struct AblateArgs {
  std::string data, out;
  int steps = 2000, batch = 4, k_sample = 50;
  std::uint64_t seed = 1;
  int threads = 0;
};

// Trains bidirectional and unidirectional variants with identical budgets and
// sample streams, samples the test split with each, and reports both rows.
json run_ablate_once(const std::string& data_dir, int steps, int batch, int k_sample,
                     std::uint64_t seed) {
  std::vector<SequenceSample> train_set = read_dataset((fs::path(data_dir) / "train").string());
  std::vector<SequenceSample> test_set = read_dataset((fs::path(data_dir) / "test").string());

  TrainConfig cfg;
  cfg.mode = TrainMode::SingleImage;
  cfg.steps = steps;
  cfg.batch = batch;
  cfg.seed = seed;
  cfg.model.height = cfg.model.width = train_set.front().H;
  cfg.validate();
  NoiseSchedule sched = make_schedule(cfg.K, cfg.lambda_max, cfg.lambda_min);

  auto train_variant = [&](bool uni, std::vector<std::array<int, 3>>* stream) {
    DenoiserModel model(cfg.model, cfg.seed);
    Adam opt(cfg.lr);
    opt.attach(model.params);
    Rng rng(cfg.seed + 0x5851f42d4c957f2dull);
    TrainConfig c = cfg;
    c.unidirectional = uni;
    TrainHooks hooks;
    hooks.sample_stream = stream;
    train_loop(model, opt, rng, train_set, c, sched, 0, hooks);
    return model;
  };

  std::vector<std::array<int, 3>> stream_bi, stream_uni;
  DenoiserModel bi = train_variant(false, &stream_bi);
  DenoiserModel uni = train_variant(true, &stream_uni);
  if (stream_bi != stream_uni)
    throw TensorError("ablate: sample streams diverged between variants");

  auto evaluate = [&](const DenoiserModel& model, bool unidir) {
    std::vector<SequenceScores> scores;
    for (const auto& seq : test_set) {
      auto denoiser = model_denoiser(model, seq.poses, &seq.condition);
      SamplerConfig scfg;
      scfg.k_sample = k_sample;
      scfg.seed = seed * 7919 + seq.id;
      Shape fshape{model.cfg.channels, model.cfg.height, model.cfg.width};
      std::vector<Tensor> frames =
          unidir ? unidirectional_sample(seq.T, fshape, sched, denoiser, scfg)
                 : bidirectional_recursive_sample(seq.T, fshape, sched, denoiser, scfg);
      SequenceScores s = score_sequence(frames, seq.frames);
      s.id = seq.id;
      scores.push_back(std::move(s));
    }
    EvalReport r = aggregate_report(std::move(scores));
    return json{{"ssim_mean", r.ssim_mean},
                {"tconsist_mean", r.tconsist_mean},
                {"drift_slope", r.drift_slope}};
  };

  json row_bi = evaluate(bi, false);
  json row_uni = evaluate(uni, true);
  return json{{"seed", seed},
              {"steps", steps},
              {"bidirectional", row_bi},
              {"unidirectional", row_uni},
              {"sample_stream_matched", true}};
}

void run_ablate(const AblateArgs& a) {
  json result = run_ablate_once(a.data, a.steps, a.batch, a.k_sample, a.seed);
  {
    std::ofstream os(a.out);
    if (!os) throw TensorError("ablate: cannot open output path " + a.out);
    os << result.dump(2) << "\n";
  }
  auto row = [&](const char* name, const json& r) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "| %-14s | %9.4f | %13.5f | %11.5f |", name,
                  r.at("ssim_mean").get<double>(), r.at("tconsist_mean").get<double>(),
                  r.at("drift_slope").get<double>());
    return std::string(buf);
  };
  std::string md;
  md += "| variant        | ssim_mean | tconsist_mean | drift_slope |\n";
  md += "|----------------|-----------|---------------|-------------|\n";
  md += row("bidirectional", result["bidirectional"]) + "\n";
  md += row("unidirectional", result["unidirectional"]) + "\n";
  std::ofstream md_os(a.out + ".md");
  md_os << md;
  std::cout << md;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bidirectional temporal diffusion toy pipeline"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* cgen = app.add_subcommand("gen-data", "generate the pendulum toy dataset");
  cgen->add_option("--out", gen.out, "output directory")->required();
  cgen->add_option("--train", gen.train, "training sequences");
  cgen->add_option("--test", gen.test, "test sequences");
  cgen->add_option("--frames", gen.frames, "frames per sequence");
  cgen->add_option("--size", gen.size, "frame height/width");
  cgen->add_option("--identities", gen.identities, "distinct identities");
  cgen->add_option("--seed", gen.seed, "generation seed");

  TrainArgs tr;
  auto* ctr = app.add_subcommand("train", "train a denoiser");
  ctr->add_option("--data", tr.data, "dataset directory (with manifest.json)");
  ctr->add_option("--mode", tr.mode, "single-image | person | unconditional")
      ->check(CLI::IsMember({"single-image", "single_image", "person", "person-specific",
                             "person_specific", "unconditional"}));
  ctr->add_option("--steps", tr.steps, "optimizer steps");
  ctr->add_option("--batch", tr.batch, "batch size");
  ctr->add_option("--k", tr.k, "diffusion steps K");
  ctr->add_option("--lr", tr.lr, "learning rate");
  ctr->add_option("--config", tr.config, "key = value config file");
  ctr->add_option("--out", tr.out, "checkpoint output path");
  ctr->add_option("--log", tr.log, "loss log path (json lines)");
  ctr->add_option("--seed", tr.seed, "training seed")->each([&](const std::string&) {
    tr.seed_set = true;
  });
  ctr->add_flag("--uni", tr.uni, "train with the forward prediction term only");
  ctr->add_flag("--paper-mode", tr.paper, "reference recipe: K=1000, lr=1e-5");
  ctr->add_option("--threads", tr.threads, "worker threads (0 = default)");

  SampleArgs sa;
  auto* csa = app.add_subcommand("sample", "sample a sequence for a pose track");
  csa->add_option("--ckpt", sa.ckpt, "checkpoint path")->required();
  csa->add_option("--poses", sa.poses, "BTDS file providing the pose sequence")->required();
  csa->add_option("--cond", sa.cond, "BTDS file whose condition image is used, or 'none'");
  csa->add_option("--k", sa.k, "sampling steps");
  csa->add_option("--first-direction", sa.first_direction, "forward | backward")
      ->check(CLI::IsMember({"forward", "backward"}));
  csa->add_flag("--uni", sa.uni, "forward-only sampling");
  csa->add_option("--seed", sa.seed, "sampling seed");
  csa->add_option("--id", sa.id, "sequence id recorded in the output manifest");
  csa->add_option("--out", sa.out, "output dataset directory")->required();
  csa->add_option("--grid", sa.grid, "optional PNG contact sheet path");
  csa->add_option("--threads", sa.threads, "worker threads (0 = default)");

  EvalArgs ev;
  auto* cev = app.add_subcommand("eval", "evaluate predictions against ground truth");
  cev->add_option("--pred", ev.pred, "predicted dataset directory")->required();
  cev->add_option("--gt", ev.gt, "ground-truth dataset directory")->required();
  cev->add_option("--report", ev.report, "output report path (json)")->required();

  AblateArgs ab;
  auto* cab = app.add_subcommand("ablate", "bidirectional vs unidirectional comparison");
  cab->add_option("--data", ab.data, "dataset root (train/ and test/ subdirs)")->required();
  cab->add_option("--out", ab.out, "output json path (markdown sibling written too)")->required();
  cab->add_option("--steps", ab.steps, "training steps per variant");
  cab->add_option("--batch", ab.batch, "batch size");
  cab->add_option("--k", ab.k_sample, "sampling steps");
  cab->add_option("--seed", ab.seed, "shared seed for both variants");
  cab->add_option("--threads", ab.threads, "worker threads (0 = default)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;  // 0 for --help, 1 for any usage error
  }

  int threads = tr.threads + sa.threads + ab.threads;
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#else
  (void)threads;
#endif

  try {
    if (cgen->parsed()) run_gen_data(gen);
    if (ctr->parsed()) run_train(tr);
    if (csa->parsed()) run_sample(sa);
    if (cev->parsed()) run_eval(ev);
    if (cab->parsed()) run_ablate(ab);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

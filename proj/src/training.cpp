#include "btdm/training.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace btdm {

std::string mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::SingleImage: return "single_image";
    case TrainMode::PersonSpecific: return "person_specific";
    case TrainMode::Unconditional: return "unconditional";
  }
  return "single_image";
}

TrainMode mode_from_name(const std::string& s) {
  if (s == "single_image" || s == "single-image") return TrainMode::SingleImage;
  if (s == "person_specific" || s == "person-specific" || s == "person")
    return TrainMode::PersonSpecific;
  if (s == "unconditional") return TrainMode::Unconditional;
  throw ConfigError("unknown training mode: " + s);
}

void TrainConfig::validate() const {
  if (K < 1) throw ConfigError("train config: K must be >= 1");
  if (!(lambda_max > lambda_min)) throw ConfigError("train config: lambda_max must exceed lambda_min");
  if (batch < 1 || steps < 0) throw ConfigError("train config: bad batch/steps");
  if (cond_dropout < 0 || cond_dropout > 1) throw ConfigError("train config: bad cond_dropout");
  if (mode != TrainMode::SingleImage && cond_dropout != 0)
    throw ConfigError("train config: condition dropout only applies to single_image mode");
  model.validate();
}

std::string TrainConfig::echo_json() const {
  json j;
  j["mode"] = mode_name(mode);
  j["K"] = K;
  j["lambda_max"] = lambda_max;
  j["lambda_min"] = lambda_min;
  j["lr"] = lr;
  j["batch"] = batch;
  j["steps"] = steps;
  j["seed"] = seed;
  j["data_dir"] = data_dir;
  j["cond_dropout"] = cond_dropout;
  j["unidirectional"] = unidirectional;
  j["model"] = {{"channels", model.channels}, {"height", model.height}, {"width", model.width},
                {"base", model.base},         {"mults", model.mults},   {"attention_sizes", model.attention_sizes},
                {"heads", model.heads},       {"pose_channels", model.pose_channels},
                {"emb_dim", model.emb_dim},   {"groups", model.groups}};
  return j.dump();
}

TrainConfig TrainConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  TrainConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
      if (!blank)
        throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      size_t a = s.find_first_not_of(" \t\r");
      size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    try {
      if (key == "mode") cfg.mode = mode_from_name(val);
      else if (key == "K") cfg.K = std::stoi(val);
      else if (key == "lambda_max") cfg.lambda_max = std::stod(val);
      else if (key == "lambda_min") cfg.lambda_min = std::stod(val);
      else if (key == "lr") cfg.lr = std::stod(val);
      else if (key == "batch") cfg.batch = std::stoi(val);
      else if (key == "steps") cfg.steps = std::stoi(val);
      else if (key == "seed") cfg.seed = std::stoull(val);
      else if (key == "data_dir") cfg.data_dir = val;
      else if (key == "checkpoint_path") cfg.checkpoint_path = val;
      else if (key == "loss_log_path") cfg.loss_log_path = val;
      else if (key == "cond_dropout") cfg.cond_dropout = std::stod(val);
      else if (key == "checkpoint_interval") cfg.checkpoint_interval = std::stoi(val);
      else if (key == "unidirectional") cfg.unidirectional = val == "true" || val == "1";
      else if (key == "paper_mode" && (val == "true" || val == "1")) cfg.apply_paper_defaults();
      else if (key == "base") cfg.model.base = std::stoi(val);
      else if (key == "emb_dim") cfg.model.emb_dim = std::stoi(val);
      else if (key == "heads") cfg.model.heads = std::stoi(val);
      else if (key == "size") cfg.model.height = cfg.model.width = std::stoi(val);
      else throw ConfigError("config line " + std::to_string(lineno) + ": unknown key " + key);
    } catch (const std::invalid_argument&) {
      throw ConfigError("config line " + std::to_string(lineno) + ": bad value for " + key);
    }
  }
  return cfg;
}

TrainingPair sample_training_pair(const std::vector<SequenceSample>& data, Rng& rng,
                                  const TrainConfig& cfg, const NoiseSchedule& sched) {
  if (data.empty()) throw TensorError("sample_training_pair: empty dataset");
  int si = (int)rng.integer(data.size());
  const SequenceSample& seq = data[si];
  if (seq.T < 2) throw TensorError("sample_training_pair: sequence has T < 2");
  TrainingPair p;
  p.seq_index = si;
  p.t = 2 + (int)rng.integer(seq.T - 1);  // uniform over [2, T]
  p.k = 1 + (int)rng.integer(sched.K);
  p.y_t = seq.frames[p.t - 1];
  p.y_tm1 = seq.frames[p.t - 2];
  p.s_t = seq.poses[p.t - 1];
  p.s_tm1 = seq.poses[p.t - 2];
  p.eps_t = randn<float>(p.y_t.dims(), rng);
  p.eps_tm1 = randn<float>(p.y_tm1.dims(), rng);
  if (cfg.mode == TrainMode::SingleImage) {
    bool drop = cfg.cond_dropout > 0 && rng.uniform() < cfg.cond_dropout;
    if (!drop) {
      p.c = seq.condition;
      p.has_c = true;
    }
  }
  return p;
}

namespace {

Tensor stack_frames(const std::vector<const Tensor*>& frames) {
  Shape dims = frames.front()->dims();
  Shape out_dims = dims;
  out_dims.insert(out_dims.begin(), (int)frames.size());
  Tensor out{out_dims};
  std::int64_t sz = frames.front()->numel();
  for (size_t i = 0; i < frames.size(); ++i)
    std::copy(frames[i]->data(), frames[i]->data() + sz, out.data() + (std::int64_t)i * sz);
  return out;
}

Tensor group_loss(const DenoiserModel& model, Tape* tape,
                  const std::vector<const TrainingPair*>& group, const NoiseSchedule& sched,
                  bool unidirectional, bool with_cond) {
  std::vector<const Tensor*> yt, ytm1, st, stm1, cs;
  std::vector<Tensor> noised_t, noised_tm1;
  std::vector<double> lambdas;
  noised_t.reserve(group.size());
  noised_tm1.reserve(group.size());
  for (const TrainingPair* p : group) {
    noised_t.push_back(forward_marginal(p->y_t, p->k, p->eps_t, sched));
    noised_tm1.push_back(forward_marginal(p->y_tm1, p->k, p->eps_tm1, sched));
    lambdas.push_back(sched.lambda_at(p->k));
    yt.push_back(&p->y_t);
    ytm1.push_back(&p->y_tm1);
    st.push_back(&p->s_t);
    stm1.push_back(&p->s_tm1);
    if (with_cond) cs.push_back(&p->c);
  }
  std::vector<const Tensor*> nt, ntm1;
  for (auto& t : noised_t) nt.push_back(&t);
  for (auto& t : noised_tm1) ntm1.push_back(&t);
  Tensor y_t_b = stack_frames(yt), y_tm1_b = stack_frames(ytm1);
  Tensor yk_t_b = stack_frames(nt), yk_tm1_b = stack_frames(ntm1);
  Tensor s_t_b = stack_frames(st), s_tm1_b = stack_frames(stm1);
  Tensor c_b;
  if (with_cond) c_b = stack_frames(cs);
  auto denoise = [&model](Tape* tp, const Tensor& a, const Tensor& b,
                          const std::vector<double>& lam, const Tensor& sa, const Tensor& sb,
                          const Tensor* c, TimeDir dir) {
    return model.denoise_pair_lambda(tp, a, b, lam, sa, sb, c, dir);
  };
  return pair_loss_with<float>(tape, denoise, y_t_b, y_tm1_b, yk_t_b, yk_tm1_b, lambdas, s_t_b,
                               s_tm1_b, with_cond ? &c_b : nullptr, unidirectional);
}

}  // namespace

Tensor btdm_loss(const DenoiserModel& model, Tape* tape, const std::vector<TrainingPair>& batch,
                 const NoiseSchedule& sched, bool unidirectional) {
  if (batch.empty()) throw TensorError("btdm_loss: empty batch");
  std::vector<const TrainingPair*> with_c, without_c;
  for (const auto& p : batch) (p.has_c ? with_c : without_c).push_back(&p);
  double n = (double)batch.size();
  Tensor loss;
  if (!with_c.empty()) {
    Tensor l = group_loss(model, tape, with_c, sched, unidirectional, true);
    loss = ops::scale(tape, l, (float)(with_c.size() / n));
  }
  if (!without_c.empty()) {
    Tensor l = group_loss(model, tape, without_c, sched, unidirectional, false);
    Tensor scaled = ops::scale(tape, l, (float)(without_c.size() / n));
    loss = loss.defined() ? ops::add(tape, loss, scaled) : scaled;
  }
  return loss;
}

// --- checkpoint format -------------------------------------------------------
// magic "BTCK", u32 version, u64 json length, json metadata (config echo,
// schedule parameters, step counter, parameter manifest, rng state), then raw
// f32 parameter data in manifest order followed by Adam first/second moments.

namespace {

constexpr std::uint32_t kCkptVersion = 1;

json config_to_json(const DenoiserConfig& c) {
  return json{{"channels", c.channels}, {"height", c.height}, {"width", c.width},
              {"base", c.base},         {"mults", c.mults},   {"attention_sizes", c.attention_sizes},
              {"heads", c.heads},       {"pose_channels", c.pose_channels},
              {"emb_dim", c.emb_dim},   {"groups", c.groups}};
}

DenoiserConfig config_from_json(const json& j) {
  DenoiserConfig c;
  c.channels = j.at("channels").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.base = j.at("base").get<int>();
  c.mults = j.at("mults").get<std::vector<int>>();
  c.attention_sizes = j.at("attention_sizes").get<std::vector<int>>();
  c.heads = j.at("heads").get<int>();
  c.pose_channels = j.at("pose_channels").get<int>();
  c.emb_dim = j.at("emb_dim").get<int>();
  c.groups = j.at("groups").get<int>();
  return c;
}

void put_u32(std::ostream& os, std::uint32_t v) { os.write((const char*)&v, 4); }
void put_u64(std::ostream& os, std::uint64_t v) { os.write((const char*)&v, 8); }

json read_ckpt_header(std::istream& is, const std::string& path) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "BTCK") throw FormatError("checkpoint: bad magic in " + path);
  std::uint32_t ver = 0;
  is.read((char*)&ver, 4);
  if (!is || ver != kCkptVersion) throw FormatError("checkpoint: unsupported version in " + path);
  std::uint64_t jlen = 0;
  is.read((char*)&jlen, 8);
  if (!is) throw FormatError("checkpoint: truncated header in " + path);
  std::string text(jlen, '\0');
  is.read(text.data(), (std::streamsize)jlen);
  if (!is) throw FormatError("checkpoint: truncated metadata in " + path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint: bad metadata json: " + std::string(e.what()));
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params, Adam* opt) {
  json j;
  j["model"] = config_to_json(meta.model_cfg);
  j["schedule"] = {{"K", meta.K}, {"lambda_max", meta.lambda_max}, {"lambda_min", meta.lambda_min}};
  j["step"] = meta.step;
  j["mode"] = mode_name(meta.mode);
  j["unidirectional"] = meta.unidirectional;
  j["adam"] = {{"lr", meta.lr}, {"beta1", meta.beta1}, {"beta2", meta.beta2}, {"eps", meta.eps},
               {"step", opt ? opt->step_count() : 0}, {"present", opt != nullptr}};
  j["rng_state"] = meta.rng_state;
  j["params"] = json::array();
  params.for_each([&](const std::string& name, const Tensor& p) {
    j["params"].push_back({{"name", name}, {"shape", p.dims()}});
  });
  std::string text = j.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("checkpoint: cannot open for writing: " + tmp);
    os.write("BTCK", 4);
    put_u32(os, kCkptVersion);
    put_u64(os, text.size());
    os.write(text.data(), (std::streamsize)text.size());
    params.for_each([&](const std::string&, const Tensor& p) {
      os.write((const char*)p.data(), p.numel() * 4);
    });
    if (opt) {
      for (auto& m : opt->moments1()) os.write((const char*)m.data(), m.numel() * 4);
      for (auto& v : opt->moments2()) os.write((const char*)v.data(), v.numel() * 4);
    }
    if (!os) throw FormatError("checkpoint: write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

CheckpointMeta peek_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open: " + path);
  json j = read_ckpt_header(is, path);
  CheckpointMeta m;
  m.model_cfg = config_from_json(j.at("model"));
  m.K = j.at("schedule").at("K").get<int>();
  m.lambda_max = j.at("schedule").at("lambda_max").get<double>();
  m.lambda_min = j.at("schedule").at("lambda_min").get<double>();
  m.step = j.at("step").get<std::int64_t>();
  m.mode = mode_from_name(j.at("mode").get<std::string>());
  m.unidirectional = j.value("unidirectional", false);
  m.lr = j.at("adam").at("lr").get<double>();
  m.beta1 = j.at("adam").at("beta1").get<double>();
  m.beta2 = j.at("adam").at("beta2").get<double>();
  m.eps = j.at("adam").at("eps").get<double>();
  m.rng_state = j.at("rng_state").get<std::string>();
  return m;
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore& params, Adam* opt) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open: " + path);
  json j = read_ckpt_header(is, path);
  CheckpointMeta meta = peek_checkpoint(path);

  const auto& manifest = j.at("params");
  if (manifest.size() != params.size())
    throw FormatError("checkpoint: parameter count mismatch (file " +
                      std::to_string(manifest.size()) + ", model " + std::to_string(params.size()) +
                      ")");
  size_t idx = 0;
  params.for_each([&](const std::string& name, Tensor& p) {
    const auto& e = manifest[idx++];
    if (e.at("name").get<std::string>() != name)
      throw FormatError("checkpoint: parameter order mismatch at " + name);
    if (e.at("shape").get<Shape>() != p.dims())
      throw FormatError("checkpoint: parameter shape mismatch at " + name);
    is.read((char*)p.data(), p.numel() * 4);
    if (!is) throw FormatError("checkpoint: truncated parameter data at " + name);
  });
  if (opt) {
    bool present = j.at("adam").value("present", false);
    opt->attach(params);
    opt->set_lr(meta.lr);
    if (present) {
      opt->set_step_count(j.at("adam").at("step").get<std::int64_t>());
      for (auto& m : opt->moments1()) {
        is.read((char*)m.data(), m.numel() * 4);
        if (!is) throw FormatError("checkpoint: truncated optimizer state");
      }
      for (auto& v : opt->moments2()) {
        is.read((char*)v.data(), v.numel() * 4);
        if (!is) throw FormatError("checkpoint: truncated optimizer state");
      }
    }
  }
  return meta;
}

// --- training loops ----------------------------------------------------------

TrainResult train_loop(DenoiserModel& model, Adam& opt, Rng& rng,
                       const std::vector<SequenceSample>& data, const TrainConfig& cfg,
                       const NoiseSchedule& sched, std::int64_t start_step,
                       const TrainHooks& hooks) {
  TrainResult result;
  std::ofstream log;
  if (!cfg.loss_log_path.empty()) {
    log.open(cfg.loss_log_path, start_step == 0 ? std::ios::trunc : std::ios::app);
    if (!log) throw ConfigError("cannot open loss log: " + cfg.loss_log_path);
  }
  auto t0 = std::chrono::steady_clock::now();
  auto save = [&](std::int64_t step) {
    if (cfg.checkpoint_path.empty()) return;
    CheckpointMeta meta;
    meta.model_cfg = model.cfg;
    meta.K = cfg.K;
    meta.lambda_max = cfg.lambda_max;
    meta.lambda_min = cfg.lambda_min;
    meta.step = step;
    meta.mode = cfg.mode;
    meta.unidirectional = cfg.unidirectional;
    meta.lr = opt.lr();
    meta.beta1 = opt.beta1();
    meta.beta2 = opt.beta2();
    meta.eps = opt.eps();
    meta.rng_state = rng.serialize();
    save_checkpoint(cfg.checkpoint_path, meta, model.params, &opt);
  };

  for (std::int64_t step = start_step + 1; step <= start_step + cfg.steps; ++step) {
    double loss_value = 0;
    try {
      std::vector<TrainingPair> batch;
      batch.reserve(cfg.batch);
      for (int b = 0; b < cfg.batch; ++b) {
        batch.push_back(sample_training_pair(data, rng, cfg, sched));
        if (hooks.sample_stream)
          hooks.sample_stream->push_back({batch.back().seq_index, batch.back().t, batch.back().k});
      }
      Tape tape;
      Tensor loss = btdm_loss(model, &tape, batch, sched, cfg.unidirectional);
      loss_value = loss[0];
      if (!std::isfinite(loss_value)) throw TensorError("non-finite loss");
      GradMap<float> grads = backprop_gradients(loss, model.params, tape);
      opt.update(model.params, grads);
    } catch (const TensorError& e) {
      result.aborted = true;
      result.final_step = step - 1;
      if (log) log << json{{"step", step}, {"error", e.what()}}.dump() << "\n";
      return result;  // last good checkpoint stays on disk
    }
    result.losses.push_back(loss_value);
    result.final_step = step;
    if (hooks.on_step) hooks.on_step(step, loss_value);
    if (log) {
      double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << json{{"step", step}, {"loss", loss_value}, {"wall_s", wall}}.dump() << "\n";
    }
    if (cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) save(step);
  }
  save(start_step + cfg.steps);
  return result;
}

TrainResult train(const TrainConfig& cfg) {
  std::vector<SequenceSample> data = read_dataset(cfg.data_dir);
  for (const auto& s : data)
    if (s.T < 2) throw TensorError("train: dataset contains a sequence with T < 2");
  TrainConfig resolved = cfg;
  // frame geometry follows the dataset
  resolved.model.height = data.front().H;
  resolved.model.width = data.front().W;
  resolved.model.channels = data.front().C;
  resolved.model.pose_channels = data.front().P;
  resolved.validate();
  NoiseSchedule sched = make_schedule(resolved.K, resolved.lambda_max, resolved.lambda_min);
  DenoiserModel model(resolved.model, resolved.seed);
  Adam opt(resolved.lr);
  opt.attach(model.params);
  Rng rng(resolved.seed + 0x5851f42d4c957f2dull);
  return train_loop(model, opt, rng, data, resolved, sched, 0);
}

void fine_tune_single_image(DenoiserModel& model, Adam& opt, Rng& rng, const Tensor& c,
                            const Tensor& c_pose, int iterations, double lr,
                            const NoiseSchedule& sched) {
  if (c.ndim() != 3 || c.dim(0) != model.cfg.channels || c.dim(1) != model.cfg.height ||
      c.dim(2) != model.cfg.width)
    throw TensorError("fine_tune: condition image does not match the model frame shape");
  if (!c_pose.defined() || c_pose.ndim() != 3 || c_pose.dim(0) != model.cfg.pose_channels)
    throw TensorError("fine_tune: missing or malformed pose for the condition image");
  opt.set_lr(lr);
  for (int it = 0; it < iterations; ++it) {
    // length-1 sequence: the frame-pair rule degenerates to the self pair
    TrainingPair p;
    p.seq_index = 0;
    p.t = 1;
    p.k = 1 + (int)rng.integer(sched.K);
    p.y_t = c;
    p.y_tm1 = c;
    p.s_t = c_pose;
    p.s_tm1 = c_pose;
    p.eps_t = randn<float>(c.dims(), rng);
    p.eps_tm1 = randn<float>(c.dims(), rng);
    p.c = c;
    p.has_c = true;
    Tape tape;
    Tensor loss = btdm_loss(model, &tape, {p}, sched, false);
    GradMap<float> grads = backprop_gradients(loss, model.params, tape);
    opt.update(model.params, grads);
  }
}

}  // namespace btdm

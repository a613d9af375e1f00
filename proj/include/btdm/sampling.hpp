#pragma once

#include <functional>
#include <vector>

#include "btdm/model.hpp"
#include "btdm/schedule.hpp"

namespace btdm {

// How a pass treats the frame with no neighbor on its conditioning side
// (frame 1 in forward passes, frame T in backward passes). DuplicateNeighbor
// feeds the frame its own latent, so every frame updates in every pass and
// the sequence stays level-synchronized.
enum class BoundaryPolicy { DuplicateNeighbor };

struct SamplerConfig {
  int k_sample = 50;
  TimeDir first_direction = TimeDir::Forward;
  std::uint64_t seed = 0;
  BoundaryPolicy boundary = BoundaryPolicy::DuplicateNeighbor;
  // Clamp clean-frame predictions to [-1,1] before each latent update.
  // Disabled for analytic denoisers whose chains must stay exactly linear.
  bool clamp_x0 = true;
};

struct PassRecord {
  int pass_index = 0;  // 1-based
  bool forward = true;
  double lambda = 0;
  double alpha_bar_from = 0, alpha_bar_to = 1;
};

// One frame update inside a pass. Latent pointers refer to the pre-pass
// snapshot; the target conditions on its neighbor's level-k latent, never on
// an already-updated one. Boundary frames use themselves as neighbor.
template <class Real>
struct DenoiseRequest {
  int t_target = 0;
  int t_neighbor = 0;
  const TensorT<Real>* y_target = nullptr;
  const TensorT<Real>* y_neighbor = nullptr;
};

// Batch denoiser for one directional pass: returns one clean-frame
// prediction per request (the prediction for the *target* stream).
template <class Real>
using PairDenoiserFn = std::function<std::vector<TensorT<Real>>(
    const std::vector<DenoiseRequest<Real>>& jobs, const PassRecord& pass)>;

template <class Real>
struct SampleProbe {
  std::function<void(const PassRecord&, const std::vector<TensorT<Real>>&)> on_pass_begin;
  std::function<void(const PassRecord&, const DenoiseRequest<Real>&)> on_update;
  std::function<void(const PassRecord&, const std::vector<TensorT<Real>>&)> on_pass_end;
};

template <class Real>
struct SamplerState {
  std::vector<TensorT<Real>> latents;
  std::vector<int> denoise_counts;  // updates applied per frame
  std::vector<int> levels;          // remaining passes per frame
  std::vector<char> pass_directions;  // 'F' / 'B' in execution order
};

namespace detail {

template <class Real>
std::vector<TensorT<Real>> recursive_sample_core(int T, const Shape& frame_shape,
                                                 const std::vector<PlanLevel>& plan,
                                                 const PairDenoiserFn<Real>& denoiser,
                                                 const SamplerConfig& cfg, bool alternate,
                                                 SamplerState<Real>* state_out,
                                                 const SampleProbe<Real>* probe) {
  if (T < 1) throw TensorError("sampler: T must be >= 1");
  int ks = (int)plan.size();
  SamplerState<Real> local;
  SamplerState<Real>& st = state_out ? *state_out : local;
  st.latents.clear();
  st.denoise_counts.assign(T, 0);
  st.levels.assign(T, ks);
  st.pass_directions.clear();

  Rng rng(cfg.seed);
  for (int t = 0; t < T; ++t) st.latents.push_back(randn<Real>(frame_shape, rng));

  bool first_forward = cfg.first_direction == TimeDir::Forward;
  for (int p = 1; p <= ks; ++p) {
    int level = ks - p;  // plan index the latents currently sit at
    PassRecord rec;
    rec.pass_index = p;
    // A single frame has no temporal direction; the chain degenerates to one
    // canonical per-frame denoising sequence.
    rec.forward = !alternate || T == 1 ? true : ((p % 2 == 1) == first_forward);
    rec.lambda = plan[level].lambda;
    rec.alpha_bar_from = plan[level].alpha_bar;
    rec.alpha_bar_to = level == 0 ? 1.0 : plan[level - 1].alpha_bar;

    std::vector<TensorT<Real>> snapshot;
    snapshot.reserve(T);
    for (const auto& l : st.latents) snapshot.push_back(l.clone());
    if (probe && probe->on_pass_begin) probe->on_pass_begin(rec, snapshot);

    std::vector<DenoiseRequest<Real>> jobs;
    jobs.reserve(T);
    for (int i = 0; i < T; ++i) {
      int t = rec.forward ? i : T - 1 - i;
      int nb;
      switch (cfg.boundary) {
        case BoundaryPolicy::DuplicateNeighbor:
        default:
          nb = rec.forward ? (t > 0 ? t - 1 : t) : (t < T - 1 ? t + 1 : t);
          break;
      }
      jobs.push_back(DenoiseRequest<Real>{t, nb, &snapshot[t], &snapshot[nb]});
      if (probe && probe->on_update) probe->on_update(rec, jobs.back());
    }
    std::vector<TensorT<Real>> x0 = denoiser(jobs, rec);
    if ((int)x0.size() != T) throw TensorError("sampler: denoiser returned wrong batch size");
    for (int i = 0; i < T; ++i) {
      const auto& job = jobs[i];
      TensorT<Real> pred = x0[i];
      if (!pred.same_shape(snapshot[job.t_target]))
        throw TensorError("sampler: denoiser output shape mismatch");
      if (cfg.clamp_x0)
        for (std::int64_t e = 0; e < pred.numel(); ++e)
          pred[e] = std::min(Real(1), std::max(Real(-1), pred[e]));
      try {
        st.latents[job.t_target] =
            reverse_step_between(snapshot[job.t_target], pred, rec.alpha_bar_from, rec.alpha_bar_to);
      } catch (const TensorError& e) {
        throw TensorError("sampler: " + std::string(e.what()) + " at pass " +
                          std::to_string(p) + ", frame " + std::to_string(job.t_target));
      }
      st.denoise_counts[job.t_target]++;
      st.levels[job.t_target]--;
    }
    st.pass_directions.push_back(rec.forward ? 'F' : 'B');
    if (probe && probe->on_pass_end) probe->on_pass_end(rec, st.latents);
  }
  return st.latents;
}

}  // namespace detail

// Alternating-direction recursive sampling: all frames start as unit
// Gaussian noise and every directional pass lowers the whole sequence by one
// noise level, frames conditioning on their neighbors' pre-pass latents.
template <class Real>
std::vector<TensorT<Real>> bidirectional_recursive_sample(
    int T, const Shape& frame_shape, const NoiseSchedule& sched,
    const PairDenoiserFn<Real>& denoiser, const SamplerConfig& cfg,
    SamplerState<Real>* state_out = nullptr, const SampleProbe<Real>* probe = nullptr) {
  return detail::recursive_sample_core(T, frame_shape, respace(sched, cfg.k_sample), denoiser,
                                       cfg, /*alternate=*/true, state_out, probe);
}

// Ablation baseline: identical update math but every pass runs forward.
template <class Real>
std::vector<TensorT<Real>> unidirectional_sample(int T, const Shape& frame_shape,
                                                 const NoiseSchedule& sched,
                                                 const PairDenoiserFn<Real>& denoiser,
                                                 const SamplerConfig& cfg,
                                                 SamplerState<Real>* state_out = nullptr,
                                                 const SampleProbe<Real>* probe = nullptr) {
  return detail::recursive_sample_core(T, frame_shape, respace(sched, cfg.k_sample), denoiser,
                                       cfg, /*alternate=*/false, state_out, probe);
}

// Binds a trained model to the sampler interface: stacks per-pass jobs into
// one joint forward and returns the target-stream predictions.
inline PairDenoiserFn<float> model_denoiser(const DenoiserModel& model,
                                            const std::vector<Tensor>& poses,
                                            const Tensor* condition /* [C,H,W] or null */) {
  const DenoiserConfig& cfg = model.cfg;
  for (const auto& p : poses)
    if (p.ndim() != 3 || p.dim(0) != cfg.pose_channels || p.dim(1) != cfg.height ||
        p.dim(2) != cfg.width)
      throw TensorError("model_denoiser: pose sequence does not match the model configuration");
  Tensor cond_copy;
  bool has_cond = condition != nullptr;
  if (has_cond) {
    if (condition->ndim() != 3 || condition->dim(0) != cfg.channels ||
        condition->dim(1) != cfg.height || condition->dim(2) != cfg.width)
      throw TensorError("model_denoiser: condition image does not match the model configuration");
    cond_copy = condition->clone();
  }
  return [&model, poses, cond_copy, has_cond](const std::vector<DenoiseRequest<float>>& jobs,
                                              const PassRecord& pass) {
    const DenoiserConfig& mc = model.cfg;
    int n = (int)jobs.size();
    std::int64_t fsz = (std::int64_t)mc.channels * mc.height * mc.width;
    std::int64_t psz = (std::int64_t)mc.pose_channels * mc.height * mc.width;
    Tensor ya{{n, mc.channels, mc.height, mc.width}}, yb{{n, mc.channels, mc.height, mc.width}};
    Tensor sa{{n, mc.pose_channels, mc.height, mc.width}},
        sb{{n, mc.pose_channels, mc.height, mc.width}};
    for (int i = 0; i < n; ++i) {
      const auto& j = jobs[i];
      std::copy(j.y_target->data(), j.y_target->data() + fsz, ya.data() + i * fsz);
      std::copy(j.y_neighbor->data(), j.y_neighbor->data() + fsz, yb.data() + i * fsz);
      std::copy(poses.at(j.t_target).data(), poses.at(j.t_target).data() + psz,
                sa.data() + i * psz);
      std::copy(poses.at(j.t_neighbor).data(), poses.at(j.t_neighbor).data() + psz,
                sb.data() + i * psz);
    }
    Tensor cond_batch;
    if (has_cond) {
      cond_batch = Tensor{{n, mc.channels, mc.height, mc.width}};
      for (int i = 0; i < n; ++i)
        std::copy(cond_copy.data(), cond_copy.data() + fsz, cond_batch.data() + i * fsz);
    }
    std::vector<double> lambdas((size_t)n, pass.lambda);
    auto out = model.denoise_pair_lambda(nullptr, ya, yb, lambdas, sa, sb,
                                         has_cond ? &cond_batch : nullptr,
                                         pass.forward ? TimeDir::Forward : TimeDir::Backward);
    std::vector<Tensor> preds;
    preds.reserve(n);
    for (int i = 0; i < n; ++i) {
      Tensor p{{mc.channels, mc.height, mc.width}};
      std::copy(out.a.data() + i * fsz, out.a.data() + (i + 1) * fsz, p.data());
      preds.push_back(std::move(p));
    }
    return preds;
  };
}

}  // namespace btdm

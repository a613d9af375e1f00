#include "btdm/schedule.hpp"

#include <cmath>

namespace btdm {

NoiseSchedule make_schedule(int K, double lambda_max, double lambda_min) {
  if (K < 1) throw ScheduleError("make_schedule: K must be >= 1");
  if (!(lambda_max > lambda_min)) throw ScheduleError("make_schedule: lambda_max must exceed lambda_min");
  NoiseSchedule s;
  s.K = K;
  s.lambda_max = lambda_max;
  s.lambda_min = lambda_min;
  s.lambdas.resize(K);
  s.alphas.resize(K);
  s.alpha_bars.assign(K + 1, 1.0);
  for (int i = 0; i < K; ++i) {
    double t = K == 1 ? 0.0 : (double)i / (double)(K - 1);
    s.lambdas[i] = lambda_max + (lambda_min - lambda_max) * t;
    s.alphas[i] = 1.0 / (1.0 + std::exp(-s.lambdas[i]));
    s.alpha_bars[i + 1] = s.alpha_bars[i] * s.alphas[i];
    if (!(s.alpha_bars[i + 1] > 0.0))
      throw ScheduleError("make_schedule: cumulative signal underflows at step " +
                          std::to_string(i + 1) + "; raise lambda_min or lower K");
  }
  return s;
}

std::vector<PlanLevel> respace(const NoiseSchedule& sched, int k_sample) {
  if (k_sample < 1 || k_sample > sched.K)
    throw ScheduleError("respace: k_sample must be in [1, K]");
  std::vector<PlanLevel> plan(k_sample);
  for (int j = 0; j < k_sample; ++j) {
    int idx = k_sample == 1
                  ? sched.K
                  : 1 + (int)std::llround((double)j * (double)(sched.K - 1) / (double)(k_sample - 1));
    plan[j] = PlanLevel{sched.lambda_at(idx), sched.alpha_bar_at(idx)};
  }
  return plan;
}

}  // namespace btdm

#pragma once

#include <string>
#include <vector>

#include "btdm/tensor.hpp"

namespace btdm {

// Mean local SSIM over an 11x11 Gaussian window (sigma 1.5), constants
// K1 = 0.01 / K2 = 0.03, computed per channel on inputs remapped from
// [-1,1] to [0,1] (dynamic range 1) and averaged across channels. Only
// windows fully inside the image contribute.
double ssim(const Tensor& x, const Tensor& y);

inline double dssim(const Tensor& x, const Tensor& y) { return (1.0 - ssim(x, y)) / 2.0; }

// Mean over consecutive-frame pairs of
// | dssim(pred_t, pred_{t-1}) - dssim(gt_t, gt_{t-1}) |.
double temporal_consistency(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt);

// Per-frame SSIM against ground truth plus its least-squares slope over the
// frame index (unit spacing); a negative slope means quality decays along
// the sequence.
struct DriftProfile {
  std::vector<double> per_frame_ssim;
  double slope = 0;
};
DriftProfile drift_profile(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt);

double least_squares_slope(const std::vector<double>& values);

struct SequenceScores {
  std::uint32_t id = 0;
  double ssim_mean = 0;
  double tconsist = 0;
  double drift_slope = 0;
  std::vector<double> per_frame_ssim;
};

struct EvalReport {
  double ssim_mean = 0;
  double tconsist_mean = 0;
  double drift_slope = 0;  // mean of per-sequence slopes
  std::vector<SequenceScores> per_sequence;
  std::string config_echo;

  std::string to_json() const;
  static EvalReport from_json(const std::string& text);
};

SequenceScores score_sequence(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt);
EvalReport aggregate_report(std::vector<SequenceScores> scores);

}  // namespace btdm

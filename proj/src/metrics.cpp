#include "btdm/metrics.hpp"

#include <cmath>

#include "json.hpp"

using nlohmann::json;

namespace btdm {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1 * L)^2 with L = 1
constexpr double kC2 = 0.03 * 0.03;

const std::vector<double>& gaussian_kernel() {
  static const std::vector<double> k = [] {
    std::vector<double> v(kWin);
    double sum = 0;
    for (int i = 0; i < kWin; ++i) {
      double d = i - (kWin - 1) / 2.0;
      v[i] = std::exp(-d * d / (2 * kSigma * kSigma));
      sum += v[i];
    }
    for (auto& x : v) x /= sum;
    return v;
  }();
  return k;
}

// separable weighted filtering of one channel, valid region only
void gauss_filter_valid(const std::vector<double>& img, int H, int W, std::vector<double>& out) {
  const auto& k = gaussian_kernel();
  int Hv = H - kWin + 1, Wv = W - kWin + 1;
  std::vector<double> rowpass((std::int64_t)H * Wv);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < Wv; ++j) {
      double acc = 0;
      for (int d = 0; d < kWin; ++d) acc += k[d] * img[(std::int64_t)i * W + j + d];
      rowpass[(std::int64_t)i * Wv + j] = acc;
    }
  out.assign((std::int64_t)Hv * Wv, 0.0);
  for (int i = 0; i < Hv; ++i)
    for (int j = 0; j < Wv; ++j) {
      double acc = 0;
      for (int d = 0; d < kWin; ++d) acc += k[d] * rowpass[(std::int64_t)(i + d) * Wv + j];
      out[(std::int64_t)i * Wv + j] = acc;
    }
}

}  // namespace

double ssim(const Tensor& x, const Tensor& y) {
  if (!x.same_shape(y))
    throw TensorError("ssim: shape mismatch " + shape_str(x.dims()) + " vs " + shape_str(y.dims()));
  if (x.ndim() != 3) throw TensorError("ssim: expects [C,H,W] frames");
  int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (H < kWin || W < kWin) throw TensorError("ssim: frame smaller than the 11x11 window");

  double total = 0;
  std::vector<double> a((std::int64_t)H * W), b((std::int64_t)H * W);
  std::vector<double> aa((std::int64_t)H * W), bb((std::int64_t)H * W), ab((std::int64_t)H * W);
  std::vector<double> mu_a, mu_b, m_aa, m_bb, m_ab;
  for (int c = 0; c < C; ++c) {
    const float* xp = x.data() + (std::int64_t)c * H * W;
    const float* yp = y.data() + (std::int64_t)c * H * W;
    for (std::int64_t i = 0; i < (std::int64_t)H * W; ++i) {
      a[i] = ((double)xp[i] + 1.0) / 2.0;
      b[i] = ((double)yp[i] + 1.0) / 2.0;
      aa[i] = a[i] * a[i];
      bb[i] = b[i] * b[i];
      ab[i] = a[i] * b[i];
    }
    gauss_filter_valid(a, H, W, mu_a);
    gauss_filter_valid(b, H, W, mu_b);
    gauss_filter_valid(aa, H, W, m_aa);
    gauss_filter_valid(bb, H, W, m_bb);
    gauss_filter_valid(ab, H, W, m_ab);
    double acc = 0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
      double va = m_aa[i] - mu_a[i] * mu_a[i];
      double vb = m_bb[i] - mu_b[i] * mu_b[i];
      double cov = m_ab[i] - mu_a[i] * mu_b[i];
      double num = (2 * mu_a[i] * mu_b[i] + kC1) * (2 * cov + kC2);
      double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (va + vb + kC2);
      acc += num / den;
    }
    total += acc / (double)mu_a.size();
  }
  return total / C;
}

double temporal_consistency(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
  if (pred.size() != gt.size())
    throw TensorError("temporal_consistency: length mismatch, pred " +
                      std::to_string(pred.size()) + " vs gt " + std::to_string(gt.size()));
  if (pred.size() < 2) throw TensorError("temporal_consistency: needs T >= 2");
  double acc = 0;
  for (size_t t = 1; t < pred.size(); ++t)
    acc += std::abs(dssim(pred[t], pred[t - 1]) - dssim(gt[t], gt[t - 1]));
  return acc / (double)(pred.size() - 1);
}

double least_squares_slope(const std::vector<double>& v) {
  size_t n = v.size();
  if (n < 2) throw TensorError("least_squares_slope: needs at least two points");
  double mx = (n - 1) / 2.0, my = 0;
  for (double y : v) my += y;
  my /= (double)n;
  double num = 0, den = 0;
  for (size_t i = 0; i < n; ++i) {
    num += (i - mx) * (v[i] - my);
    den += (i - mx) * (i - mx);
  }
  return num / den;
}

DriftProfile drift_profile(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
  if (pred.size() != gt.size())
    throw TensorError("drift_profile: length mismatch, pred " + std::to_string(pred.size()) +
                      " vs gt " + std::to_string(gt.size()));
  if (pred.size() < 2) throw TensorError("drift_profile: needs T >= 2");
  DriftProfile d;
  d.per_frame_ssim.reserve(pred.size());
  for (size_t t = 0; t < pred.size(); ++t) d.per_frame_ssim.push_back(ssim(pred[t], gt[t]));
  d.slope = least_squares_slope(d.per_frame_ssim);
  return d;
}

SequenceScores score_sequence(const std::vector<Tensor>& pred, const std::vector<Tensor>& gt) {
  SequenceScores s;
  DriftProfile d = drift_profile(pred, gt);
  s.per_frame_ssim = d.per_frame_ssim;
  s.drift_slope = d.slope;
  double acc = 0;
  for (double v : d.per_frame_ssim) acc += v;
  s.ssim_mean = acc / (double)d.per_frame_ssim.size();
  s.tconsist = temporal_consistency(pred, gt);
  return s;
}

EvalReport aggregate_report(std::vector<SequenceScores> scores) {
  if (scores.empty()) throw TensorError("aggregate_report: no sequences");
  EvalReport r;
  for (const auto& s : scores) {
    r.ssim_mean += s.ssim_mean;
    r.tconsist_mean += s.tconsist;
    r.drift_slope += s.drift_slope;
  }
  double n = (double)scores.size();
  r.ssim_mean /= n;
  r.tconsist_mean /= n;
  r.drift_slope /= n;
  r.per_sequence = std::move(scores);
  return r;
}

std::string EvalReport::to_json() const {
  json j;
  j["ssim_mean"] = ssim_mean;
  j["tconsist_mean"] = tconsist_mean;
  j["drift_slope"] = drift_slope;
  j["per_sequence"] = json::array();
  for (const auto& s : per_sequence)
    j["per_sequence"].push_back({{"id", s.id},
                                 {"ssim_mean", s.ssim_mean},
                                 {"tconsist", s.tconsist},
                                 {"drift_slope", s.drift_slope},
                                 {"per_frame_ssim", s.per_frame_ssim}});
  if (!config_echo.empty()) j["config_echo"] = json::parse(config_echo);
  return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
  json j = json::parse(text);
  EvalReport r;
  r.ssim_mean = j.at("ssim_mean").get<double>();
  r.tconsist_mean = j.at("tconsist_mean").get<double>();
  r.drift_slope = j.at("drift_slope").get<double>();
  for (const auto& e : j.at("per_sequence")) {
    SequenceScores s;
    s.id = e.at("id").get<std::uint32_t>();
    s.ssim_mean = e.at("ssim_mean").get<double>();
    s.tconsist = e.at("tconsist").get<double>();
    s.drift_slope = e.at("drift_slope").get<double>();
    s.per_frame_ssim = e.at("per_frame_ssim").get<std::vector<double>>();
    r.per_sequence.push_back(std::move(s));
  }
  if (j.contains("config_echo")) r.config_echo = j["config_echo"].dump();
  return r;
}

}  // namespace btdm

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "btdm/tensor.hpp"

namespace btdm {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One pose-conditioned sequence: frames in [-1,1], pose maps in [0,1], and a
// condition image rendered at the identity's rest pose.
struct SequenceSample {
  int T = 0, C = 3, H = 0, W = 0, P = 3;
  std::vector<Tensor> frames;  // each [C,H,W]
  std::vector<Tensor> poses;   // each [P,H,W]
  Tensor condition;            // [C,H,W]
  std::uint32_t id = 0;
  std::uint64_t identity_seed = 0;
  std::uint64_t motion_seed = 0;
};

// Damped pendulum with a striped flag at the arm tip. The pose map covers the
// arm only, so a single pose underdetermines the flag: its shear follows the
// angular velocity, clamp(kappa * omega, +-shear_max).
struct PendulumWorld {
  // identity appearance
  std::array<float, 3> color_a{}, color_b{}, arm_color{};
  int stripes = 4;
  // geometry (unit square, y down)
  static constexpr double pivot_x = 0.5, pivot_y = 0.20;
  static constexpr double arm_len = 0.34, arm_halfwidth = 0.045;
  static constexpr double flag_len = 0.18, flag_halfwidth = 0.10;
  static constexpr double kappa = 0.04, shear_max = 0.05;
  // dynamics
  static constexpr double gravity_over_len = 6.0, damping = 0.15, frame_dt = 0.06;
  static constexpr double theta0_range = 0.9, omega0_range = 1.8;

  static PendulumWorld for_identity(std::uint64_t identity_seed);

  double shear_for(double omega) const {
    double s = kappa * omega;
    return s > shear_max ? shear_max : (s < -shear_max ? -shear_max : s);
  }
};

struct PendulumState {
  double theta = 0, omega = 0;
};

// Deterministic trajectory of T states from the seeded initial condition.
std::vector<PendulumState> simulate_trajectory(std::uint64_t motion_seed, int T);

// Analytic pose rasterization for an arm angle: channel 0 is part/P over
// three arm segments, channels 1-2 the segment-local (u,v). Background is
// exactly zero; pixels are point-sampled at their centers.
Tensor pose_for_state(const PendulumState& state, int H, int W);

// Anti-aliased (2x2 supersampled) frame render for a full world state.
Tensor render_frame(const PendulumWorld& world, const PendulumState& state, int H, int W);

SequenceSample generate_sequence(std::uint64_t identity_seed, std::uint64_t motion_seed, int T,
                                 int H, int W);

// --- BTDS container ---------------------------------------------------------
// magic "BTDS", then little-endian u32 {version, T, C, H, W, P}, then frames
// as f32 [T][C][H][W], poses [T][P][H][W], condition [C][H][W].

inline constexpr std::uint32_t kBtdsVersion = 1;

void write_sequence_file(const SequenceSample& s, const std::string& path);
SequenceSample read_sequence_file(const std::string& path);

// Dataset directory: manifest.json plus one BTDS file per sequence.
void write_dataset(const std::vector<SequenceSample>& samples, const std::string& dir);
std::vector<SequenceSample> read_dataset(const std::string& dir);

std::int64_t btds_file_size(int T, int C, int H, int W, int P);

}  // namespace btdm

#include "btdm/toy_data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace btdm {

namespace {

std::array<float, 3> hsv_to_signed_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  double r = 0, g = 0, b = 0;
  int i = (int)(h * 6.0);
  double f = h * 6.0 - i;
  double p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i % 6) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    case 5: r = v, g = p, b = q; break;
  }
  return {(float)(2 * r - 1), (float)(2 * g - 1), (float)(2 * b - 1)};
}

constexpr float kBackground = -0.88f;

struct LocalFrame {
  double dir_x, dir_y;    // along the arm (theta = 0 points straight down)
  double perp_x, perp_y;  // lateral
};

LocalFrame arm_frame(double theta) {
  return {std::sin(theta), std::cos(theta), std::cos(theta), -std::sin(theta)};
}

// color at a continuous point (x, y) in the unit square
void shade_point(const PendulumWorld& w, double theta, double shear, double x, double y,
                 float out[3]) {
  LocalFrame f = arm_frame(theta);
  double rx = x - PendulumWorld::pivot_x, ry = y - PendulumWorld::pivot_y;
  double s = rx * f.dir_x + ry * f.dir_y;
  double u = rx * f.perp_x + ry * f.perp_y;
  if (s >= 0 && s <= PendulumWorld::arm_len && std::abs(u) <= PendulumWorld::arm_halfwidth) {
    out[0] = w.arm_color[0], out[1] = w.arm_color[1], out[2] = w.arm_color[2];
    return;
  }
  double sf = s - PendulumWorld::arm_len;
  if (sf >= 0 && sf <= PendulumWorld::flag_len) {
    double frac = sf / PendulumWorld::flag_len;
    double center = shear * frac;  // lateral displacement grows toward the flag tip
    if (std::abs(u - center) <= PendulumWorld::flag_halfwidth) {
      int stripe = (int)(frac * w.stripes);
      if (stripe >= w.stripes) stripe = w.stripes - 1;
      const auto& c = (stripe % 2 == 0) ? w.color_a : w.color_b;
      out[0] = c[0], out[1] = c[1], out[2] = c[2];
      return;
    }
  }
  out[0] = out[1] = out[2] = kBackground;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {(unsigned char)(v & 0xff), (unsigned char)((v >> 8) & 0xff),
                        (unsigned char)((v >> 16) & 0xff), (unsigned char)((v >> 24) & 0xff)};
  os.write((const char*)b, 4);
}

std::uint32_t get_u32(std::istream& is, const char* what, std::int64_t offset) {
  unsigned char b[4];
  is.read((char*)b, 4);
  if (!is)
    throw FormatError(std::string("BTDS: truncated while reading ") + what + " at offset " +
                      std::to_string(offset));
  return (std::uint32_t)b[0] | ((std::uint32_t)b[1] << 8) | ((std::uint32_t)b[2] << 16) |
         ((std::uint32_t)b[3] << 24);
}

void write_f32_block(std::ostream& os, const float* p, std::int64_t n) {
  static_assert(sizeof(float) == 4);
  os.write((const char*)p, n * 4);  // little-endian host assumed (x86/arm64)
}

void read_f32_block(std::istream& is, float* p, std::int64_t n, const char* what,
                    std::int64_t offset) {
  is.read((char*)p, n * 4);
  if (!is)
    throw FormatError(std::string("BTDS: truncated ") + what + " block at offset " +
                      std::to_string(offset));
}

}  // namespace

PendulumWorld PendulumWorld::for_identity(std::uint64_t identity_seed) {
  Rng rng(identity_seed * 0x9e3779b97f4a7c15ull + 1);
  PendulumWorld w;
  double hue = rng.uniform();
  double gap = 0.3 + 0.35 * rng.uniform();
  w.color_a = hsv_to_signed_rgb(hue, 0.85, 0.9);
  w.color_b = hsv_to_signed_rgb(hue + gap, 0.85, 0.9);
  w.arm_color = hsv_to_signed_rgb(hue + 0.5, 0.45, 0.55);
  w.stripes = 3 + (int)rng.integer(4);
  return w;
}

std::vector<PendulumState> simulate_trajectory(std::uint64_t motion_seed, int T) {
  Rng rng(motion_seed * 0xbf58476d1ce4e5b9ull + 7);
  PendulumState st;
  st.theta = rng.uniform(-PendulumWorld::theta0_range, PendulumWorld::theta0_range);
  st.omega = rng.uniform(-PendulumWorld::omega0_range, PendulumWorld::omega0_range);
  std::vector<PendulumState> traj(T);
  const int substeps = 8;
  const double h = PendulumWorld::frame_dt / substeps;
  auto accel = [](double theta, double omega) {
    return -PendulumWorld::gravity_over_len * std::sin(theta) - PendulumWorld::damping * omega;
  };
  for (int t = 0; t < T; ++t) {
    traj[t] = st;
    for (int i = 0; i < substeps; ++i) {
      // classic RK4 on (theta, omega)
      double k1t = st.omega, k1w = accel(st.theta, st.omega);
      double k2t = st.omega + 0.5 * h * k1w, k2w = accel(st.theta + 0.5 * h * k1t, st.omega + 0.5 * h * k1w);
      double k3t = st.omega + 0.5 * h * k2w, k3w = accel(st.theta + 0.5 * h * k2t, st.omega + 0.5 * h * k2w);
      double k4t = st.omega + h * k3w, k4w = accel(st.theta + h * k3t, st.omega + h * k3w);
      st.theta += h / 6.0 * (k1t + 2 * k2t + 2 * k3t + k4t);
      st.omega += h / 6.0 * (k1w + 2 * k2w + 2 * k3w + k4w);
    }
  }
  return traj;
}

Tensor pose_for_state(const PendulumState& state, int H, int W) {
  const int P = 3;
  Tensor pose{{P, H, W}};
  LocalFrame f = arm_frame(state.theta);
  const double seg = PendulumWorld::arm_len / 3.0;
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double y = (i + 0.5) / H, x = (j + 0.5) / W;
      double rx = x - PendulumWorld::pivot_x, ry = y - PendulumWorld::pivot_y;
      double s = rx * f.dir_x + ry * f.dir_y;
      double u = rx * f.perp_x + ry * f.perp_y;
      if (s >= 0 && s <= PendulumWorld::arm_len && std::abs(u) <= PendulumWorld::arm_halfwidth) {
        int part = (int)(s / seg) + 1;
        if (part > 3) part = 3;
        pose[(std::int64_t)0 * H * W + i * W + j] = (float)part / (float)P;
        pose[(std::int64_t)1 * H * W + i * W + j] = (float)((s - (part - 1) * seg) / seg);
        pose[(std::int64_t)2 * H * W + i * W + j] =
            (float)((u + PendulumWorld::arm_halfwidth) / (2 * PendulumWorld::arm_halfwidth));
      }
    }
  return pose;
}

Tensor render_frame(const PendulumWorld& world, const PendulumState& state, int H, int W) {
  const int C = 3;
  Tensor frame{{C, H, W}};
  double shear = world.shear_for(state.omega);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      float acc[3] = {0, 0, 0};
      for (int si = 0; si < 2; ++si)
        for (int sj = 0; sj < 2; ++sj) {
          double y = (i + 0.25 + 0.5 * si) / H;
          double x = (j + 0.25 + 0.5 * sj) / W;
          float c[3];
          shade_point(world, state.theta, shear, x, y, c);
          acc[0] += c[0], acc[1] += c[1], acc[2] += c[2];
        }
      for (int c = 0; c < C; ++c) frame[(std::int64_t)c * H * W + i * W + j] = acc[c] * 0.25f;
    }
  return frame;
}

SequenceSample generate_sequence(std::uint64_t identity_seed, std::uint64_t motion_seed, int T,
                                 int H, int W) {
  if (T < 2) throw TensorError("generate_sequence: T must be >= 2");
  if (H != W || H < 16) throw TensorError("generate_sequence: H = W >= 16 required");
  SequenceSample s;
  s.T = T;
  s.H = H;
  s.W = W;
  s.identity_seed = identity_seed;
  s.motion_seed = motion_seed;
  PendulumWorld world = PendulumWorld::for_identity(identity_seed);
  auto traj = simulate_trajectory(motion_seed, T);
  s.frames.reserve(T);
  s.poses.reserve(T);
  for (int t = 0; t < T; ++t) {
    s.frames.push_back(render_frame(world, traj[t], H, W));
    s.poses.push_back(pose_for_state(traj[t], H, W));
  }
  s.condition = render_frame(world, PendulumState{0.0, 0.0}, H, W);
  return s;
}

std::int64_t btds_file_size(int T, int C, int H, int W, int P) {
  return 28 + 4ll * ((std::int64_t)T * C * H * W + (std::int64_t)T * P * H * W +
                     (std::int64_t)C * H * W);
}

void write_sequence_file(const SequenceSample& s, const std::string& path) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("cannot open for writing: " + tmp);
    os.write("BTDS", 4);
    put_u32(os, kBtdsVersion);
    put_u32(os, (std::uint32_t)s.T);
    put_u32(os, (std::uint32_t)s.C);
    put_u32(os, (std::uint32_t)s.H);
    put_u32(os, (std::uint32_t)s.W);
    put_u32(os, (std::uint32_t)s.P);
    for (const auto& f : s.frames) write_f32_block(os, f.data(), f.numel());
    for (const auto& p : s.poses) write_f32_block(os, p.data(), p.numel());
    write_f32_block(os, s.condition.data(), s.condition.numel());
    if (!os) throw FormatError("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

SequenceSample read_sequence_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "BTDS")
    throw FormatError("BTDS: bad magic at offset 0 in " + path);
  std::uint32_t version = get_u32(is, "version", 4);
  if (version != kBtdsVersion)
    throw FormatError("BTDS: unsupported version " + std::to_string(version) + " at offset 4");
  SequenceSample s;
  s.T = (int)get_u32(is, "T", 8);
  s.C = (int)get_u32(is, "C", 12);
  s.H = (int)get_u32(is, "H", 16);
  s.W = (int)get_u32(is, "W", 20);
  s.P = (int)get_u32(is, "P", 24);
  if (s.T < 1 || s.C < 1 || s.H < 1 || s.W < 1 || s.P < 1)
    throw FormatError("BTDS: invalid header dims in " + path);
  std::int64_t off = 28;
  std::int64_t fsz = (std::int64_t)s.C * s.H * s.W, psz = (std::int64_t)s.P * s.H * s.W;
  s.frames.resize(s.T);
  for (int t = 0; t < s.T; ++t) {
    s.frames[t] = Tensor{{s.C, s.H, s.W}};
    read_f32_block(is, s.frames[t].data(), fsz, "frame", off);
    off += fsz * 4;
  }
  s.poses.resize(s.T);
  for (int t = 0; t < s.T; ++t) {
    s.poses[t] = Tensor{{s.P, s.H, s.W}};
    read_f32_block(is, s.poses[t].data(), psz, "pose", off);
    off += psz * 4;
  }
  s.condition = Tensor{{s.C, s.H, s.W}};
  read_f32_block(is, s.condition.data(), fsz, "condition", off);
  return s;
}

void write_dataset(const std::vector<SequenceSample>& samples, const std::string& dir) {
  if (samples.empty()) throw FormatError("write_dataset: no samples");
  fs::create_directories(dir);
  const auto& first = samples.front();
  json manifest;
  manifest["version"] = kBtdsVersion;
  manifest["count"] = samples.size();
  manifest["T"] = first.T;
  manifest["C"] = first.C;
  manifest["H"] = first.H;
  manifest["W"] = first.W;
  manifest["P"] = first.P;
  manifest["sequences"] = json::array();
  for (size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.T != first.T || s.C != first.C || s.H != first.H || s.W != first.W || s.P != first.P)
      throw FormatError("write_dataset: inconsistent dims across samples");
    char name[32];
    std::snprintf(name, sizeof(name), "seq_%04zu.btds", i);
    write_sequence_file(s, (fs::path(dir) / name).string());
    manifest["sequences"].push_back({{"id", s.id ? s.id : (std::uint32_t)i},
                                     {"file", name},
                                     {"identity_seed", s.identity_seed},
                                     {"motion_seed", s.motion_seed}});
  }
  std::string tmp = (fs::path(dir) / "manifest.json.tmp").string();
  {
    std::ofstream os(tmp);
    os << manifest.dump(2) << "\n";
    if (!os) throw FormatError("write_dataset: manifest write failed");
  }
  fs::rename(tmp, (fs::path(dir) / "manifest.json").string());
}

std::vector<SequenceSample> read_dataset(const std::string& dir) {
  fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream is(mpath);
  if (!is) throw FormatError("read_dataset: missing manifest: " + mpath.string());
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw FormatError("read_dataset: bad manifest json: " + std::string(e.what()));
  }
  std::vector<SequenceSample> out;
  for (const auto& e : manifest.at("sequences")) {
    SequenceSample s = read_sequence_file((fs::path(dir) / e.at("file").get<std::string>()).string());
    s.id = e.at("id").get<std::uint32_t>();
    s.identity_seed = e.at("identity_seed").get<std::uint64_t>();
    s.motion_seed = e.at("motion_seed").get<std::uint64_t>();
    out.push_back(std::move(s));
  }
  if (out.empty()) throw FormatError("read_dataset: empty dataset in " + dir);
  return out;
}

}  // namespace btdm

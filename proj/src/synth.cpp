#include "transpose/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "transpose/io.hpp"
#include "transpose/rng.hpp"

namespace transpose {

namespace {

namespace fs = std::filesystem;

// All geometry is drawn in resolution-independent units (fractions of the
// extents or of min(H,W)) so that one seed produces the same pose at any
// same-aspect scale. Keypoints must stay inside this relative margin, which
// is >= 4 px for the smallest supported extent (32).
constexpr double kMarginFrac = 0.125;
constexpr double kBaseExtent = 48.0;  // stroke widths are 2-4 px at min(H,W)=48

struct Vec2 {
  double x, y;
};

double dist_point_segment(double px, double py, Vec2 a, Vec2 b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0.0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx);
  const double dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

void paint_capsule(Tensor& image, Vec2 a, Vec2 b, double half_width,
                   const std::array<double, 3>& color) {
  const int h = image.dim(1), w = image.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  double* data = image.value().data();
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(a.x, b.x) - half_width - 1)));
  const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max(a.x, b.x) + half_width + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(a.y, b.y) - half_width - 1)));
  const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max(a.y, b.y) + half_width + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = dist_point_segment(x + 0.5, y + 0.5, a, b);
      const double alpha = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
      if (alpha <= 0.0) continue;
      for (int c = 0; c < 3; ++c) {
        double& px = data[c * plane + static_cast<int64_t>(y) * w + x];
        px = alpha * color[static_cast<size_t>(c)] + (1.0 - alpha) * px;
      }
    }
  }
}

void paint_disk(Tensor& image, Vec2 center, double radius,
                const std::array<double, 3>& color) {
  paint_capsule(image, center, center, radius, color);
}

void paint_rect(Tensor& image, int rx, int ry, int rw, int rh,
                const std::array<double, 3>& color) {
  const int h = image.dim(1), w = image.dim(2);
  const int64_t plane = static_cast<int64_t>(h) * w;
  double* data = image.value().data();
  const int x0 = std::max(0, rx), x1 = std::min(w - 1, rx + rw - 1);
  const int y0 = std::max(0, ry), y1 = std::min(h - 1, ry + rh - 1);
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      for (int c = 0; c < 3; ++c) {
        data[c * plane + static_cast<int64_t>(y) * w + x] = color[static_cast<size_t>(c)];
      }
    }
  }
}

}  // namespace

FigureSample sample_figure(uint64_t seed, int height, int width, double occlusion_p) {
  if (height < 32 || width < 32) {
    throw std::invalid_argument("sample_figure needs extents >= 32");
  }
  Rng geom(Rng::mix(seed, 1));
  Rng pixel(Rng::mix(seed, 2));
  Rng occ(Rng::mix(seed, 3));

  const double min_ext = std::min(height, width);
  const double scale = min_ext / kBaseExtent;

  // chain geometry, rejected until every joint respects the margin
  std::array<Vec2, kFigureKeypoints> joints{};
  for (int attempt = 0;; ++attempt) {
    if (attempt > 10000) throw std::runtime_error("figure sampling failed to converge");
    const double root_u = geom.uniform(0.15, 0.85);
    const double root_v = geom.uniform(0.15, 0.85);
    std::array<double, 3> seg_frac{};
    for (double& s : seg_frac) s = geom.uniform(0.15, 0.35);
    double angle = geom.uniform(0.0, 2.0 * std::numbers::pi);
    const double bend1 = geom.uniform(-1.2, 1.2);
    const double bend2 = geom.uniform(-1.2, 1.2);

    joints[0] = {root_u * width, root_v * height};
    double a = angle;
    for (int s = 0; s < 3; ++s) {
      if (s == 1) a += bend1;
      if (s == 2) a += bend2;
      joints[static_cast<size_t>(s + 1)] = {
          joints[static_cast<size_t>(s)].x + seg_frac[static_cast<size_t>(s)] * min_ext * std::cos(a),
          joints[static_cast<size_t>(s)].y + seg_frac[static_cast<size_t>(s)] * min_ext * std::sin(a)};
    }
    bool ok = true;
    for (const Vec2& j : joints) {
      if (j.x < kMarginFrac * width || j.x > (1.0 - kMarginFrac) * width ||
          j.y < kMarginFrac * height || j.y > (1.0 - kMarginFrac) * height) {
        ok = false;
        break;
      }
    }
    if (ok) break;
  }

  const double stroke = geom.uniform(2.0, 4.0) * scale;
  std::array<double, 3> color{};
  for (double& c : color) c = geom.uniform(0.55, 1.0);

  FigureSample sample;
  sample.image = Tensor::zeros({3, height, width});

  // background: flat base color plus low-amplitude per-pixel noise
  std::array<double, 3> bg{};
  for (double& c : bg) c = pixel.uniform(0.08, 0.28);
  {
    double* data = sample.image.value().data();
    const int64_t plane = static_cast<int64_t>(height) * width;
    for (int64_t p = 0; p < plane; ++p) {
      const double noise = pixel.uniform(-0.04, 0.04);
      for (int c = 0; c < 3; ++c) {
        data[c * plane + p] = std::clamp(bg[static_cast<size_t>(c)] + noise, 0.0, 1.0);
      }
    }
  }

  for (int s = 0; s < 3; ++s) {
    paint_capsule(sample.image, joints[static_cast<size_t>(s)],
                  joints[static_cast<size_t>(s + 1)], stroke * 0.5, color);
  }
  // joint markers with strictly decreasing radius make every keypoint
  // visually identifiable (root largest, tip smallest)
  constexpr std::array<double, 4> kDotFactor{2.6, 2.0, 1.5, 1.1};
  for (int k = 0; k < kFigureKeypoints; ++k) {
    paint_disk(sample.image, joints[static_cast<size_t>(k)],
               kDotFactor[static_cast<size_t>(k)] * stroke * 0.5, color);
  }

  sample.keypoints.resize(kFigureKeypoints);
  for (int k = 0; k < kFigureKeypoints; ++k) {
    sample.keypoints[static_cast<size_t>(k)] =
        Keypoint{joints[static_cast<size_t>(k)].x, joints[static_cast<size_t>(k)].y, 1.0, true};
  }

  if (occ.next_double() < occlusion_p) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int target = occ.uniform_int(0, kFigureKeypoints - 1);
      const double bw = occ.uniform(0.10, 0.16) * min_ext;
      const double bh = occ.uniform(0.10, 0.16) * min_ext;
      const Vec2 kp = joints[static_cast<size_t>(target)];
      const double x0 = kp.x - bw * occ.uniform(0.3, 0.7);
      const double y0 = kp.y - bh * occ.uniform(0.3, 0.7);
      bool covers_other = false;
      for (int k = 0; k < kFigureKeypoints; ++k) {
        if (k == target) continue;
        const Vec2& p = joints[static_cast<size_t>(k)];
        if (p.x >= x0 - 1 && p.x <= x0 + bw + 1 && p.y >= y0 - 1 && p.y <= y0 + bh + 1) {
          covers_other = true;
          break;
        }
      }
      std::array<double, 3> box_color{};
      for (double& c : box_color) c = occ.uniform(0.05, 0.45);
      if (covers_other) continue;
      const int rx = static_cast<int>(std::lround(x0));
      const int ry = static_cast<int>(std::lround(y0));
      const int rw = std::max(1, static_cast<int>(std::lround(bw)));
      const int rh = std::max(1, static_cast<int>(std::lround(bh)));
      paint_rect(sample.image, rx, ry, rw, rh, box_color);
      sample.occlusion_boxes.push_back({rx, ry, rw, rh});
      break;
    }
  }

  // quantize to the 8-bit levels the PPM export round-trips through
  for (double& v : sample.image.value()) {
    v = std::clamp(std::lround(v * 255.0) / 255.0, 0.0, 1.0);
  }
  return sample;
}

std::vector<FigureSample> make_dataset(int n, uint64_t seed, int height, int width,
                                       double occlusion_p) {
  if (n < 1) throw std::invalid_argument("make_dataset needs n >= 1");
  std::vector<FigureSample> samples;
  samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    samples.push_back(sample_figure(Rng::mix(seed, static_cast<uint64_t>(i)), height, width,
                                    occlusion_p));
  }
  return samples;
}

std::pair<std::vector<int>, std::vector<int>> split_dataset(int n) {
  const int train_n = n - std::max(1, n / 10);
  std::vector<int> train, test;
  for (int i = 0; i < n; ++i) (i < train_n ? train : test).push_back(i);
  return {train, test};
}

void export_dataset(const std::vector<FigureSample>& samples, uint64_t seed,
                    double occlusion_p, const std::string& dir) {
  fs::create_directories(dir);
  nlohmann::json meta;
  meta["n"] = samples.size();
  meta["seed"] = std::to_string(seed);
  meta["h"] = samples.empty() ? 0 : samples[0].image.dim(1);
  meta["w"] = samples.empty() ? 0 : samples[0].image.dim(2);
  meta["occlusion_p"] = occlusion_p;
  std::ofstream(dir + "/meta.json") << meta.dump(2) << "\n";

  std::FILE* kf = std::fopen((dir + "/keypoints.csv").c_str(), "w");
  if (!kf) throw std::runtime_error("cannot write keypoints.csv in " + dir);
  std::fprintf(kf, "sample,keypoint,x,y,visible\n");
  std::FILE* bf = std::fopen((dir + "/boxes.csv").c_str(), "w");
  if (!bf) throw std::runtime_error("cannot write boxes.csv in " + dir);
  std::fprintf(bf, "sample,x0,y0,w,h\n");
  char name[64];
  for (size_t i = 0; i < samples.size(); ++i) {
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    write_ppm(dir + "/" + name, samples[i].image);
    for (size_t k = 0; k < samples[i].keypoints.size(); ++k) {
      const Keypoint& kp = samples[i].keypoints[k];
      std::fprintf(kf, "%zu,%zu,%.17g,%.17g,%d\n", i, k, kp.x, kp.y, kp.visible ? 1 : 0);
    }
    for (const auto& b : samples[i].occlusion_boxes) {
      std::fprintf(bf, "%zu,%d,%d,%d,%d\n", i, b[0], b[1], b[2], b[3]);
    }
  }
  std::fclose(kf);
  std::fclose(bf);
}

std::vector<FigureSample> import_dataset(const std::string& dir) {
  std::ifstream meta_in(dir + "/meta.json");
  if (!meta_in) throw std::runtime_error("no meta.json in " + dir);
  nlohmann::json meta = nlohmann::json::parse(meta_in);
  const size_t n = meta.at("n").get<size_t>();

  std::vector<FigureSample> samples(n);
  char name[64];
  for (size_t i = 0; i < n; ++i) {
    std::snprintf(name, sizeof(name), "img_%05zu.ppm", i);
    samples[i].image = read_ppm(dir + "/" + name);
  }

  std::ifstream kf(dir + "/keypoints.csv");
  if (!kf) throw std::runtime_error("no keypoints.csv in " + dir);
  std::string line;
  std::getline(kf, line);  // header
  while (std::getline(kf, line)) {
    if (line.empty()) continue;
    size_t si, ki;
    double x, y;
    int vis;
    if (std::sscanf(line.c_str(), "%zu,%zu,%lg,%lg,%d", &si, &ki, &x, &y, &vis) != 5) {
      throw std::runtime_error("bad keypoints.csv line: " + line);
    }
    if (si >= n) throw std::runtime_error("keypoints.csv sample index out of range");
    auto& kps = samples[si].keypoints;
    if (kps.size() <= ki) kps.resize(ki + 1);
    kps[ki] = Keypoint{x, y, 1.0, vis != 0};
  }

  std::ifstream bf(dir + "/boxes.csv");
  if (bf) {
    std::getline(bf, line);
    while (std::getline(bf, line)) {
      if (line.empty()) continue;
      size_t si;
      int x0, y0, w, h;
      if (std::sscanf(line.c_str(), "%zu,%d,%d,%d,%d", &si, &x0, &y0, &w, &h) != 5) {
        throw std::runtime_error("bad boxes.csv line: " + line);
      }
      if (si >= n) throw std::runtime_error("boxes.csv sample index out of range");
      samples[si].occlusion_boxes.push_back({x0, y0, w, h});
    }
  }
  return samples;
}

}  // namespace transpose

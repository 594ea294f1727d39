#include "transpose/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace transpose {

namespace {

void write_pgm_body(std::FILE* f, const double* data, int height, int width,
                    const std::vector<double>& row_scale, int rows_per_scale) {
  std::fprintf(f, "P2\n%d %d\n65535\n", width, height);
  for (int y = 0; y < height; ++y) {
    const double scale = row_scale[static_cast<size_t>(y / rows_per_scale)];
    for (int x = 0; x < width; ++x) {
      const double v = data[static_cast<int64_t>(y) * width + x];
      const int q = scale > 0.0
                        ? static_cast<int>(std::lround(std::clamp(v / scale, 0.0, 1.0) * 65535.0))
                        : 0;
      std::fprintf(f, x ? " %d" : "%d", q);
    }
    std::fputc('\n', f);
  }
}

}  // namespace

void write_pgm_map(const std::string& path, const double* data, int height, int width) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  double mx = 0.0;
  for (int64_t i = 0; i < static_cast<int64_t>(height) * width; ++i) mx = std::max(mx, data[i]);
  write_pgm_body(f, data, height, width, {mx}, height);
  std::fclose(f);
}

void write_pgm_rows_scaled(const std::string& path, const Tensor& matrix) {
  if (!matrix.defined() || matrix.ndim() != 2) {
    throw std::invalid_argument("write_pgm_rows_scaled expects a 2-d matrix");
  }
  const int h = matrix.dim(0), w = matrix.dim(1);
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  const double* data = matrix.value().data();
  std::vector<double> row_max(static_cast<size_t>(h), 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      row_max[static_cast<size_t>(y)] =
          std::max(row_max[static_cast<size_t>(y)], data[static_cast<int64_t>(y) * w + x]);
    }
  }
  write_pgm_body(f, data, h, w, row_max, 1);
  std::fclose(f);
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (!image.defined() || image.ndim() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("write_ppm expects a [3 x H x W] image");
  }
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "P6\n" << w << " " << h << "\n255\n";
  const double* data = image.value().data();
  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(data[c * plane + static_cast<int64_t>(y) * w + x], 0.0, 1.0);
        row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw std::runtime_error("write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string magic;
  in >> magic;
  if (magic != "P6") throw std::runtime_error(path + " is not a P6 PPM");
  auto next_token = [&in, &path]() {
    std::string tok;
    for (;;) {
      if (!(in >> tok)) throw std::runtime_error("truncated PPM header in " + path);
      if (tok[0] == '#') {
        std::string rest;
        std::getline(in, rest);
        continue;
      }
      return tok;
    }
  };
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval != 255) throw std::runtime_error(path + ": only maxval 255 supported");
  in.get();  // single whitespace after header
  Tensor image = Tensor::zeros({3, h, w});
  double* data = image.value().data();
  const int64_t plane = static_cast<int64_t>(h) * w;
  std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(row.size()));
    if (!in) throw std::runtime_error("truncated PPM data in " + path);
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        data[c * plane + static_cast<int64_t>(y) * w + x] =
            row[static_cast<size_t>(x) * 3 + static_cast<size_t>(c)] / 255.0;
      }
    }
  }
  return image;
}

}  // namespace transpose

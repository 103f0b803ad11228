#include "coswin/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "coswin/ops.hpp"

namespace coswin::saliency {

std::vector<float> bilinear_upsample(const std::vector<float>& src, std::size_t sh,
                                     std::size_t sw, std::size_t dh, std::size_t dw) {
  std::vector<float> dst(dh * dw);
  const double sy = static_cast<double>(sh) / static_cast<double>(dh);
  const double sx = static_cast<double>(sw) / static_cast<double>(dw);
  for (std::size_t y = 0; y < dh; ++y) {
    // half-pixel centers
    const double fy = (static_cast<double>(y) + 0.5) * sy - 0.5;
    const double cy = std::clamp(fy, 0.0, static_cast<double>(sh - 1));
    const std::size_t y0 = static_cast<std::size_t>(cy);
    const std::size_t y1 = std::min(y0 + 1, sh - 1);
    const double wy = cy - static_cast<double>(y0);
    for (std::size_t x = 0; x < dw; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) * sx - 0.5;
      const double cx = std::clamp(fx, 0.0, static_cast<double>(sw - 1));
      const std::size_t x0 = static_cast<std::size_t>(cx);
      const std::size_t x1 = std::min(x0 + 1, sw - 1);
      const double wx = cx - static_cast<double>(x0);
      const double v = (1 - wy) * ((1 - wx) * src[y0 * sw + x0] + wx * src[y0 * sw + x1]) +
                       wy * ((1 - wx) * src[y1 * sw + x0] + wx * src[y1 * sw + x1]);
      dst[y * dw + x] = static_cast<float>(v);
    }
  }
  return dst;
}

SaliencyResult grad_cam(CoSwinModel<float>& model, const Tensor<float>& image) {
  if (image.ndim() != 3) {
    throw ShapeError("grad_cam: image must be [H, W, C], got " + shape_str(image.shape()));
  }
  Tensor<float> batch =
      reshape(image.detached(), {1, image.dim(0), image.dim(1), image.dim(2)});
  GradTape<float> tape;
  tape.watch(batch);  // gives the forward graph a root so activations are taped
  ForwardTrace<float> trace;
  auto logits = model.forward(batch, RunMode::kEval, nullptr, &trace);
  auto lv = logits.data();
  const std::size_t pred = argmax_row(lv);
  auto target = slice(logits, 1, pred, 1);  // [1, 1]
  tape.backward(target);

  auto grads = tape.grad(trace.final_norm_out);  // [1, N, d]
  const std::size_t n = grads.dim(1), d = grads.dim(2);
  auto gv = grads.data();
  auto av = trace.final_norm_out.data();
  std::vector<double> weights(d, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t c = 0; c < d; ++c) weights[c] += gv[t * d + c];
  }
  for (auto& wv : weights) wv /= static_cast<double>(n);

  SaliencyResult res;
  res.predicted_class = static_cast<int>(pred);
  res.grid_h = trace.grid_h;
  res.grid_w = trace.grid_w;
  res.out_h = image.dim(0);
  res.out_w = image.dim(1);
  std::vector<float> cam(n);
  for (std::size_t t = 0; t < n; ++t) {
    double acc = 0;
    for (std::size_t c = 0; c < d; ++c) acc += weights[c] * av[t * d + c];
    cam[t] = acc > 0 ? static_cast<float>(acc) : 0.0f;
  }
  res.raw = bilinear_upsample(cam, res.grid_h, res.grid_w, res.out_h, res.out_w);

  float lo = res.raw[0], hi = res.raw[0];
  for (float v : res.raw) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  res.bytes.resize(res.raw.size());
  if (hi > lo) {
    for (std::size_t i = 0; i < res.raw.size(); ++i) {
      res.bytes[i] = static_cast<unsigned char>(
          std::lround(255.0 * (res.raw[i] - lo) / (hi - lo)));
    }
  }  // zero range -> all zeros
  return res;
}

void write_pgm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<unsigned char>& bytes) {
  if (bytes.size() != width * height) {
    throw ContractError("write_pgm: byte count does not match dimensions");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failure on " + path);
}

namespace {

int next_pnm_token(std::ifstream& in) {
  // skips whitespace and '#' comments
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF) throw DataError("unexpected end of PNM header");
  int value = 0;
  while (ch != EOF && std::isdigit(ch)) {
    value = value * 10 + (ch - '0');
    ch = in.get();
  }
  return value;
}

}  // namespace

PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image " + path);
  char p, kind;
  in.get(p);
  in.get(kind);
  if (p != 'P' || (kind != '5' && kind != '6')) {
    throw DataError("unsupported image format in " + path + " (want binary PGM/PPM)");
  }
  PnmImage img;
  img.c = kind == '5' ? 1 : 3;
  img.w = static_cast<std::size_t>(next_pnm_token(in));
  img.h = static_cast<std::size_t>(next_pnm_token(in));
  const int maxval = next_pnm_token(in);
  if (maxval != 255) throw DataError("PNM maxval " + std::to_string(maxval) + " unsupported");
  std::vector<unsigned char> raw(img.h * img.w * img.c);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw DataError("truncated image data in " + path);
  img.pixels.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    img.pixels[i] = static_cast<float>(raw[i]) / 255.0f;
  }
  return img;
}

}  // namespace coswin::saliency

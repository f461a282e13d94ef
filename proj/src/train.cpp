#include "llfdisc/train.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "llfdisc/metrics.hpp"

namespace llf {

FeatureExtractor extractor_from_spec(const std::string& spec) {
  if (spec.rfind("seed:", 0) == 0) {
    try {
      return FeatureExtractor::seeded(std::stoull(spec.substr(5)));
    } catch (const std::exception&) {
      throw ValidationError("extractor spec: bad seed in '" + spec + "'");
    }
  }
  return FeatureExtractor::import_file(spec);
}

LossConfig loss_config_for(const TrainConfig& config) {
  LossConfig lc = preset(config.preset_name);
  if (config.weights) lc.weights = *config.weights;
  return lc;
}

namespace {

void validate(const TrainConfig& c, std::size_t pairs) {
  if (c.steps < 1) throw ValidationError("train: steps must be >= 1");
  if (c.lr < 0.0) throw ValidationError("train: negative learning rate");
  if (c.batch < 1) throw ValidationError("train: batch must be >= 1");
  if (c.crop < 4 || c.crop % 4 != 0) {
    throw ValidationError("train: crop must be a positive multiple of 4");
  }
  if (pairs == 0) throw ValidationError("train: empty dataset");
}

// Stacks `count` crops into one (count,3,crop,crop) constant tensor.
Tensor gather_crops(const std::vector<const Tensor*>& images, int crop,
                    const std::vector<std::pair<int, int>>& offsets) {
  const int n = static_cast<int>(images.size());
  Array out(static_cast<Eigen::Index>(n) * 3 * crop * crop);
  for (int i = 0; i < n; ++i) {
    const Shape s = images[i]->shape();
    const Array& v = images[i]->value();
    const auto [oy, ox] = offsets[static_cast<std::size_t>(i)];
    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < crop; ++y) {
        for (int x = 0; x < crop; ++x) {
          out[((static_cast<Eigen::Index>(i) * 3 + c) * crop + y) * crop + x] =
              v[(static_cast<Eigen::Index>(c) * s.h + oy + y) * s.w + ox + x];
        }
      }
    }
  }
  return Tensor::from_array({n, 3, crop, crop}, std::move(out));
}

}  // namespace

TrainResult train_toy(const TrainConfig& config,
                      const std::vector<PairedSample>& data) {
  validate(config, data.size());
  for (const PairedSample& p : data) {
    if (p.low.shape().h < config.crop || p.low.shape().w < config.crop) {
      throw ValidationError("train: sample " + p.id +
                            " is smaller than the crop size");
    }
  }
  const LossConfig lc = loss_config_for(config);
  const FeatureExtractor fx = extractor_from_spec(config.extractor_spec);

  TrainResult result;
  result.params = init_params(config.net);
  std::vector<Tensor*> params = param_tensors(result.params);

  const Scalar beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::vector<Array> m(params.size()), v(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = Array::Zero(params[i]->shape().numel());
    v[i] = Array::Zero(params[i]->shape().numel());
  }

  Rng rng(config.seed);
  const bool full_batch = config.batch >= static_cast<int>(data.size());
  const int bsz =
      full_batch ? static_cast<int>(data.size()) : config.batch;

  for (int step = 1; step <= config.steps; ++step) {
    std::vector<const Tensor*> lows, normals;
    std::vector<std::pair<int, int>> offsets;
    for (int b = 0; b < bsz; ++b) {
      const std::size_t idx =
          full_batch ? static_cast<std::size_t>(b)
                     : static_cast<std::size_t>(rng.uniform_int(
                           0, static_cast<int>(data.size()) - 1));
      const PairedSample& s = data[idx];
      const int oy = s.low.shape().h > config.crop
                         ? rng.uniform_int(0, s.low.shape().h - config.crop)
                         : 0;
      const int ox = s.low.shape().w > config.crop
                         ? rng.uniform_int(0, s.low.shape().w - config.crop)
                         : 0;
      lows.push_back(&s.low);
      normals.push_back(&s.normal);
      offsets.emplace_back(oy, ox);
    }
    const Tensor low = gather_crops(lows, config.crop, offsets);
    const Tensor gt = gather_crops(normals, config.crop, offsets);

    CompositeResult res;
    try {
      res = composite_loss(llfdisc_forward(low, result.params), gt, lc, fx);
      const Scalar value = res.composite.item();
      if (!std::isfinite(value)) throw NumericError("non-finite composite");
      backward(res.composite);
    } catch (const NumericError& e) {
      // Overflow guards inside ops also land here; the step number is what
      // the caller needs to locate the divergence.
      throw NumericError("train: aborted at step " + std::to_string(step) +
                         ": " + e.what());
    }

    const Scalar c1 = 1.0 - std::pow(beta1, step);
    const Scalar c2 = 1.0 - std::pow(beta2, step);
    {
      NoGradGuard ng;
      for (std::size_t i = 0; i < params.size(); ++i) {
        const Array g = params[i]->grad();
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g.square();
        const Array next = params[i]->value() -
                           config.lr * (m[i] / c1) /
                               ((v[i] / c2).sqrt() + eps);
        *params[i] = Tensor::leaf(params[i]->shape(), next);
      }
    }
    result.history.push_back(res.report());
  }

  result.initial_composite = result.history.front().composite;
  result.final_composite = result.history.back().composite;

  if (!config.out_dir.empty()) {
    save_checkpoint(result.params, config.out_dir + "/model.ckpt");
    write_train_csv(result.history, config.out_dir + "/train_log.csv");
  }
  return result;
}

void write_train_csv(const std::vector<LossReport>& history,
                     const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("train csv: cannot open " + path);
  f << "step,composite,l_s,l_hist,l_msssim,l_psnr,l_color,l_vggkl,l_fkl\n";
  char line[256];
  for (std::size_t i = 0; i < history.size(); ++i) {
    const LossReport& r = history[i];
    std::snprintf(line, sizeof line,
                  "%zu,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g,%.12g\n",
                  i + 1, r.composite, r.l_s, r.l_hist, r.l_msssim, r.l_psnr,
                  r.l_color, r.l_vggkl, r.l_fkl);
    f << line;
  }
  if (!f) throw ValidationError("train csv: write failed for " + path);
}

namespace {

// Reflection index into [0, n) without repeating the edge sample.
int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  int m = i % period;
  if (m < 0) m += period;
  return m < n ? m : period - m;
}

}  // namespace

Tensor enhance_image(const Tensor& image, const NetworkParams& params) {
  if (!image.defined() || image.shape().c != 3) {
    throw ValidationError("enhance: expected a (B,3,H,W) image");
  }
  NoGradGuard ng;
  const Shape s = image.shape();
  const int ph = (4 - s.h % 4) % 4;
  const int pw = (4 - s.w % 4) % 4;

  Tensor input = image;
  if (ph > 0 || pw > 0) {
    const int hh = s.h + ph, ww = s.w + pw;
    Array padded(static_cast<Eigen::Index>(s.b) * s.c * hh * ww);
    const Array& v = image.value();
    for (int b = 0; b < s.b; ++b) {
      for (int c = 0; c < s.c; ++c) {
        for (int y = 0; y < hh; ++y) {
          const int sy = mirror(y, s.h);
          for (int x = 0; x < ww; ++x) {
            padded[((static_cast<Eigen::Index>(b) * s.c + c) * hh + y) * ww +
                   x] =
                v[((static_cast<Eigen::Index>(b) * s.c + c) * s.h + sy) * s.w +
                  mirror(x, s.w)];
          }
        }
      }
    }
    input = Tensor::from_array({s.b, s.c, hh, ww}, std::move(padded));
  }

  const Tensor out = llfdisc_forward(input, params);
  const Shape so = out.shape();
  Array res(s.numel());
  const Array& ov = out.value();
  for (int b = 0; b < s.b; ++b) {
    for (int c = 0; c < s.c; ++c) {
      for (int y = 0; y < s.h; ++y) {
        for (int x = 0; x < s.w; ++x) {
          const Scalar t =
              ov[((static_cast<Eigen::Index>(b) * so.c + c) * so.h + y) * so.w +
                 x];
          res[((static_cast<Eigen::Index>(b) * s.c + c) * s.h + y) * s.w + x] =
              std::min(1.0, std::max(0.0, t));
        }
      }
    }
  }
  return Tensor::from_array(s, std::move(res));
}

std::vector<SweepRow> sweep_fkl(const TrainConfig& base,
                                const std::vector<Scalar>& a7_values,
                                const std::vector<PairedSample>& train_data,
                                const std::vector<PairedSample>& eval_data) {
  if (eval_data.empty()) throw ValidationError("sweep: empty eval set");
  const LossConfig base_lc = loss_config_for(base);

  std::vector<SweepRow> rows;
  rows.reserve(a7_values.size());
  for (const Scalar a7 : a7_values) {
    TrainConfig cfg = base;
    LossWeights w = base_lc.weights;
    w.a7 = a7;
    cfg.weights = w;
    cfg.out_dir.clear();  // the sweep reports one CSV, not per-run files
    const TrainResult run = train_toy(cfg, train_data);

    Scalar psnr_sum = 0.0, ssim_sum = 0.0;
    for (const PairedSample& p : eval_data) {
      const Tensor enhanced = enhance_image(p.low, run.params);
      psnr_sum += psnr_db(enhanced, p.normal);
      ssim_sum += ssim_metric(enhanced, p.normal);
    }
    const Scalar n = static_cast<Scalar>(eval_data.size());
    rows.push_back({a7, psnr_sum / n, ssim_sum / n});
  }
  return rows;
}

void write_sweep_csv(const std::vector<SweepRow>& rows,
                     const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw ValidationError("sweep csv: cannot open " + path);
  f << "a7,psnr_db,ssim\n";
  char line[128];
  for (const SweepRow& r : rows) {
    std::snprintf(line, sizeof line, "%.12g,%.12g,%.12g\n", r.a7, r.psnr,
                  r.ssim);
    f << line;
  }
  if (!f) throw ValidationError("sweep csv: write failed for " + path);
}

}  // namespace llf

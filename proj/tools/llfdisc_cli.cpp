#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "llfdisc/base_losses.hpp"
#include "llfdisc/data.hpp"
#include "llfdisc/fourier.hpp"
#include "llfdisc/image_io.hpp"
#include "llfdisc/metrics.hpp"
#include "llfdisc/network.hpp"
#include "llfdisc/spectral_kl.hpp"
#include "llfdisc/train.hpp"

namespace fs = std::filesystem;
using namespace llf;

namespace {

std::string num(Scalar v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

// ---- amp-swap ----

void write_log_amplitude(const Tensor& image, const fs::path& path) {
  const AmplitudeMap amp = amplitude(fft2d(image));
  Array vis = (1.0 + amp.values).log();
  const Scalar top = vis.maxCoeff();
  if (top > 0.0) vis /= top;
  write_png(Tensor::from_array(amp.shape, vis), path.string());
}

void write_phase(const Tensor& image, const fs::path& path) {
  const PhaseMap pha = phase(fft2d(image));
  const Array vis = (pha.values + M_PI) / (2.0 * M_PI);
  write_png(Tensor::from_array(pha.shape, vis), path.string());
}

int run_amp_swap(const std::string& a_path, const std::string& b_path,
                 const std::string& outdir) {
  const Tensor a = read_png(a_path);
  const Tensor b = read_png(b_path);
  fs::create_directories(outdir);
  const fs::path out(outdir);

  const auto [a_with_b_amp, b_with_a_amp] = amplitude_swap(a, b);
  write_png(a_with_b_amp, (out / "a_with_b_amplitude.png").string());
  write_png(b_with_a_amp, (out / "b_with_a_amplitude.png").string());
  write_log_amplitude(a, out / "a_log_amplitude.png");
  write_log_amplitude(b, out / "b_log_amplitude.png");
  write_phase(a, out / "a_phase.png");
  write_phase(b, out / "b_phase.png");
  return 0;
}

// ---- loss-eval ----

int run_loss_eval(const std::string& loss, const std::string& pred_path,
                  const std::string& truth_path, const std::string& preset_name,
                  const std::string& extractor_spec) {
  const Tensor pred = read_png(pred_path);
  const Tensor truth = read_png(truth_path);
  if (loss == "fkl") {
    const FklBreakdown b = fourier_kl_loss(pred, truth);
    std::cout << "d_amp,d_pha,total\n"
              << num(b.d_amp.item()) << ',' << num(b.d_pha.item()) << ','
              << num(b.total.item()) << '\n';
  } else if (loss == "vggkl") {
    const FeatureExtractor fx = extractor_from_spec(extractor_spec);
    std::cout << "l_vggkl\n" << num(feature_kl_loss(pred, truth, fx).item())
              << '\n';
  } else if (loss == "all") {
    const FeatureExtractor fx = extractor_from_spec(extractor_spec);
    const LossReport r =
        composite_loss(pred, truth, preset(preset_name), fx).report();
    std::cout << "l_s,l_hist,l_msssim,l_psnr,l_color,l_vggkl,l_fkl,composite\n"
              << num(r.l_s) << ',' << num(r.l_hist) << ',' << num(r.l_msssim)
              << ',' << num(r.l_psnr) << ',' << num(r.l_color) << ','
              << num(r.l_vggkl) << ',' << num(r.l_fkl) << ','
              << num(r.composite) << '\n';
  } else {
    throw ValidationError("loss-eval: unknown loss '" + loss +
                          "' (expected fkl, vggkl, all)");
  }
  return 0;
}

// ---- gradcheck ----

// Pixel values clear of the soft-histogram bin edges, so the probe step of
// the finite-difference check never straddles a kink.
Tensor bin_safe_image(const Shape& s, Rng& rng, int parity) {
  Array v(s.numel());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    const std::int64_t k = 2 * rng.uniform_int(0, 126) + parity;
    v[i] = (static_cast<Scalar>(k) + rng.uniform(0.15, 0.85)) / 255.0;
  }
  return Tensor::leaf(s, std::move(v));
}

// The histogram loss is piecewise linear, so a generic random point has
// coordinates the relative-error metric cannot score (plateaus and |.|
// kinks). This pair pins every pred pixel to an even bin whose only mass
// difference sits in the odd neighbor, keeping all gradients nonzero and
// kink-free within the probe radius.
std::pair<Tensor, Tensor> hist_grad_pair(const Shape& s, Rng& rng) {
  const std::int64_t o = 2 * rng.uniform_int(0, 40);
  const std::int64_t plane = s.plane();
  Array pv(s.numel()), tv(s.numel());
  std::vector<std::int64_t> slot(plane);
  for (std::int64_t i = 0; i < plane; ++i) slot[i] = i % 8;
  for (std::int64_t p = 0; p < s.b * s.c; ++p) {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::int64_t i = plane - 1; i > 0; --i) {
        std::swap(slot[i], slot[rng.uniform_int(0, i)]);
      }
      Array& dst = pass == 0 ? pv : tv;
      const int shift = pass;  // truth sits one bin above pred
      for (std::int64_t i = 0; i < plane; ++i) {
        const std::int64_t base = o + 4 * slot[i] + shift;
        dst[p * plane + i] =
            (static_cast<Scalar>(base) + rng.uniform(0.2, 0.4)) / 255.0;
      }
    }
  }
  return {Tensor::leaf(s, std::move(pv)), Tensor::from_array(s, std::move(tv))};
}

int run_gradcheck(int points, std::uint64_t seed, Scalar tol,
                  const std::string& extractor_spec) {
  if (points < 1) throw ValidationError("gradcheck: points must be >= 1");
  const FeatureExtractor fx = extractor_from_spec(extractor_spec);
  const Shape s{1, 3, 8, 8};

  using Fn = std::function<Tensor(const Tensor&, const Tensor&)>;
  const std::vector<std::pair<std::string, Fn>> losses = {
      {"l_s", [](const Tensor& x, const Tensor& t) { return smooth_l1(x, t, 0.3); }},
      {"l_hist", [](const Tensor& x, const Tensor& t) { return histogram_loss(x, t); }},
      {"l_msssim", [](const Tensor& x, const Tensor& t) { return ms_ssim_loss(x, t); }},
      {"l_psnr", [](const Tensor& x, const Tensor& t) { return psnr_loss(x, t); }},
      {"l_color", [](const Tensor& x, const Tensor& t) { return color_loss(x, t); }},
      {"l_vggkl",
       [&fx](const Tensor& x, const Tensor& t) { return feature_kl_loss(x, t, fx); }},
      {"l_fkl",
       [](const Tensor& x, const Tensor& t) { return fourier_kl_loss(x, t).total; }},
      {"composite",
       [&fx](const Tensor& x, const Tensor& t) {
         return composite_loss(x, t, preset("full"), fx).composite;
       }},
  };

  std::cout << "loss,max_rel_error,tolerance,status\n";
  bool all_ok = true;
  for (const auto& [name, fn] : losses) {
    Rng rng(seed);
    Scalar worst = 0.0;
    const bool kinked = name == "l_hist" || name == "composite";
    for (int p = 0; p < points; ++p) {
      Tensor point, target;
      if (kinked) {
        std::tie(point, target) = hist_grad_pair(s, rng);
      } else {
        point = bin_safe_image(s, rng, 0);
        target = bin_safe_image(s, rng, 1);
      }
      worst = std::max(
          worst, gradient_check(
                     [&](const Tensor& x) { return fn(x, target); }, point));
    }
    const bool ok = worst < tol;
    all_ok = all_ok && ok;
    std::cout << name << ',' << num(worst) << ',' << num(tol) << ','
              << (ok ? "pass" : "fail") << '\n';
  }
  if (!all_ok) throw NumericError("gradcheck: tolerance exceeded");
  return 0;
}

// ---- synth-data ----

int run_synth_data(int count, int size, std::uint64_t seed,
                   const std::string& outdir) {
  const auto pairs = synth_pairs(count, size, seed);
  const fs::path out(outdir);
  fs::create_directories(out / "low");
  fs::create_directories(out / "normal");
  std::cout << "id,psnr_db\n";
  for (const auto& p : pairs) {
    write_png(p.low, (out / "low" / (p.id + ".png")).string());
    write_png(p.normal, (out / "normal" / (p.id + ".png")).string());
    std::cout << p.id << ',' << num(psnr_db(p.low, p.normal)) << '\n';
  }
  return 0;
}

// ---- train-toy / sweep-fkl ----

struct DataFlags {
  std::string low_dir, normal_dir;
  int synth_count = 64;
  int synth_size = 32;
  std::int64_t synth_seed = -1;  // -1: follow the training seed
};

void add_data_flags(CLI::App* cmd, DataFlags& f, const std::string& role) {
  cmd->add_option("--low", f.low_dir, "Directory of " + role + " low-light PNGs");
  cmd->add_option("--normal", f.normal_dir,
                  "Directory of " + role + " normal-light PNGs");
  cmd->add_option("--synth-count", f.synth_count,
                  "Synthetic " + role + " pair count (when no directories)");
  cmd->add_option("--synth-size", f.synth_size, "Synthetic image size");
  cmd->add_option("--synth-seed", f.synth_seed,
                  "Synthetic data seed (-1: derive from --seed)");
}

std::vector<PairedSample> resolve_data(const DataFlags& f,
                                       std::uint64_t fallback_seed) {
  if (f.low_dir.empty() != f.normal_dir.empty()) {
    throw ValidationError("data: --low and --normal must be given together");
  }
  if (!f.low_dir.empty()) return load_pairs(f.low_dir, f.normal_dir);
  const std::uint64_t seed =
      f.synth_seed < 0 ? fallback_seed : static_cast<std::uint64_t>(f.synth_seed);
  return synth_pairs(f.synth_count, f.synth_size, seed);
}

struct TrainFlags {
  TrainConfig cfg;
  DataFlags data;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--preset", f.cfg.preset_name,
                  "Loss preset: base, base+f, base+fkl, base+vgg, base+vggkl, full");
  cmd->add_option("--steps", f.cfg.steps, "Optimizer steps");
  cmd->add_option("--lr", f.cfg.lr, "Adam step size");
  cmd->add_option("--batch", f.cfg.batch, "Batch size");
  cmd->add_option("--crop", f.cfg.crop, "Training crop (divisible by 4)");
  cmd->add_option("--seed", f.cfg.seed, "Training seed (batch order, crops)");
  cmd->add_option("--width", f.cfg.net.base_width, "Network base width");
  cmd->add_option("--net-seed", f.cfg.net.seed, "Parameter init seed");
  cmd->add_option("--extractor", f.cfg.extractor_spec,
                  "Feature extractor: seed:N or a weight-file path");
  add_data_flags(cmd, f.data, "training");
}

int run_train_toy(const TrainFlags& f, const std::string& outdir) {
  TrainConfig cfg = f.cfg;
  fs::create_directories(outdir);
  cfg.out_dir = outdir;
  const TrainResult run = train_toy(cfg, resolve_data(f.data, cfg.seed));
  std::cout << "initial_composite,final_composite\n"
            << num(run.initial_composite) << ',' << num(run.final_composite)
            << '\n';
  return 0;
}

int run_sweep(const TrainFlags& f, const std::vector<Scalar>& weights,
              const DataFlags& eval_flags, const std::string& out_file) {
  TrainConfig base = f.cfg;
  base.out_dir.clear();
  const auto train_data = resolve_data(f.data, base.seed);
  // Default eval set: same generator, next seed, so it never overlaps the
  // training pairs.
  DataFlags ef = eval_flags;
  if (ef.low_dir.empty() && ef.synth_seed < 0) {
    ef.synth_seed = static_cast<std::int64_t>(base.seed) + 1;
  }
  const auto eval_data = resolve_data(ef, base.seed + 1);

  const auto rows = sweep_fkl(base, weights, train_data, eval_data);
  std::cout << "a7,psnr_db,ssim\n";
  for (const auto& r : rows) {
    std::cout << num(r.a7) << ',' << num(r.psnr) << ',' << num(r.ssim) << '\n';
  }
  if (!out_file.empty()) write_sweep_csv(rows, out_file);
  return 0;
}

// ---- enhance / metrics ----

int run_enhance(const std::string& in_path, const std::string& out_path,
                const std::string& ckpt_path) {
  const NetworkParams params = load_checkpoint(ckpt_path);
  const Tensor enhanced = enhance_image(read_png(in_path), params);
  write_png(enhanced, out_path);
  return 0;
}

int run_metrics(const std::string& pred_path, const std::string& truth_path) {
  std::vector<MetricsRow> rows;
  if (fs::is_directory(pred_path) && fs::is_directory(truth_path)) {
    for (const auto& p : load_pairs(pred_path, truth_path)) {
      rows.push_back(metrics_row(p.id, p.low, p.normal));
    }
  } else {
    rows.push_back(metrics_row(fs::path(pred_path).stem().string(),
                               read_png(pred_path), read_png(truth_path)));
  }
  std::cout << "id,psnr_db,ssim\n";
  Scalar psnr_sum = 0.0, ssim_sum = 0.0;
  for (const auto& r : rows) {
    std::cout << r.id << ',' << num(r.psnr_db) << ',' << num(r.ssim) << '\n';
    psnr_sum += r.psnr_db;
    ssim_sum += r.ssim;
  }
  if (rows.size() > 1) {
    const Scalar n = static_cast<Scalar>(rows.size());
    std::cout << "mean," << num(psnr_sum / n) << ',' << num(ssim_sum / n)
              << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-light enhancement toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "",
                 "Plain key=value file; [subcommand] sections scope keys; "
                 "command-line flags win");

  // amp-swap
  auto* swap_cmd = app.add_subcommand(
      "amp-swap", "Swap Fourier amplitudes between two images");
  std::string swap_a, swap_b, swap_out;
  swap_cmd->add_option("image_a", swap_a, "First PNG")->required();
  swap_cmd->add_option("image_b", swap_b, "Second PNG (same size)")->required();
  swap_cmd->add_option("outdir", swap_out, "Output directory")->required();

  // loss-eval
  auto* loss_cmd =
      app.add_subcommand("loss-eval", "Evaluate losses on an image pair");
  std::string le_loss = "all", le_pred, le_truth, le_preset = "full";
  std::string le_extractor = "seed:42";
  loss_cmd->add_option("--loss", le_loss, "fkl, vggkl, or all");
  loss_cmd->add_option("--preset", le_preset, "Preset for --loss all");
  loss_cmd->add_option("--extractor", le_extractor,
                       "Feature extractor: seed:N or a weight-file path");
  loss_cmd->add_option("pred", le_pred, "Prediction PNG")->required();
  loss_cmd->add_option("truth", le_truth, "Reference PNG")->required();

  // gradcheck
  auto* grad_cmd = app.add_subcommand(
      "gradcheck", "Finite-difference check of every loss gradient");
  int gc_points = 3;
  std::uint64_t gc_seed = 909;
  Scalar gc_tol = 1e-4;
  std::string gc_extractor = "seed:42";
  grad_cmd->add_option("--points", gc_points, "Probe points per loss");
  grad_cmd->add_option("--seed", gc_seed, "Probe sampling seed");
  grad_cmd->add_option("--tol", gc_tol, "Max relative error allowed");
  grad_cmd->add_option("--extractor", gc_extractor,
                       "Feature extractor: seed:N or a weight-file path");

  // synth-data
  auto* synth_cmd =
      app.add_subcommand("synth-data", "Generate synthetic low/normal pairs");
  int sd_count = 16, sd_size = 32;
  std::uint64_t sd_seed = 0;
  std::string sd_out;
  synth_cmd->add_option("--count", sd_count, "Number of pairs");
  synth_cmd->add_option("--size", sd_size, "Image size (divisible by 4)");
  synth_cmd->add_option("--seed", sd_seed, "Generator seed");
  synth_cmd->add_option("--out", sd_out, "Output directory (low/, normal/)")
      ->required();

  // train-toy
  auto* train_cmd =
      app.add_subcommand("train-toy", "Train the enhancer at desk scale");
  TrainFlags tf;
  std::string train_out;
  add_train_flags(train_cmd, tf);
  train_cmd->add_option("--out", train_out,
                        "Output directory (model.ckpt, train_log.csv)")
      ->required();

  // sweep-fkl
  auto* sweep_cmd = app.add_subcommand(
      "sweep-fkl", "Train once per Fourier-KL weight and compare metrics");
  TrainFlags sf;
  add_train_flags(sweep_cmd, sf);
  std::vector<Scalar> sweep_weights{0.0, 0.001, 0.01, 0.1, 0.5, 1.0};
  sweep_cmd->add_option("--weights", sweep_weights, "a7 values to sweep")
      ->delimiter(',');
  DataFlags sweep_eval;
  sweep_eval.synth_count = 8;
  sweep_cmd->add_option("--eval-low", sweep_eval.low_dir,
                        "Directory of held-out low PNGs");
  sweep_cmd->add_option("--eval-normal", sweep_eval.normal_dir,
                        "Directory of held-out normal PNGs");
  sweep_cmd->add_option("--eval-count", sweep_eval.synth_count,
                        "Held-out synthetic pair count");
  sweep_cmd->add_option("--eval-seed", sweep_eval.synth_seed,
                        "Held-out synthetic seed (-1: --seed + 1)");
  std::string sweep_out;
  sweep_cmd->add_option("--out", sweep_out, "Also write the CSV here");

  // enhance
  auto* enh_cmd = app.add_subcommand("enhance", "Enhance one PNG");
  std::string enh_in, enh_out, enh_ckpt;
  enh_cmd->add_option("input", enh_in, "Input PNG")->required();
  enh_cmd->add_option("output", enh_out, "Output PNG")->required();
  enh_cmd->add_option("--checkpoint", enh_ckpt, "Model checkpoint")->required();

  // metrics
  auto* met_cmd =
      app.add_subcommand("metrics", "PSNR/SSIM for a pair of PNGs or directories");
  std::string met_pred, met_truth;
  met_cmd->add_option("pred", met_pred, "Prediction PNG or directory")->required();
  met_cmd->add_option("truth", met_truth, "Reference PNG or directory")->required();

  try {
    app.parse(argc, argv);
    if (swap_cmd->parsed()) return run_amp_swap(swap_a, swap_b, swap_out);
    if (loss_cmd->parsed()) {
      return run_loss_eval(le_loss, le_pred, le_truth, le_preset, le_extractor);
    }
    if (grad_cmd->parsed()) {
      return run_gradcheck(gc_points, gc_seed, gc_tol, gc_extractor);
    }
    if (synth_cmd->parsed()) return run_synth_data(sd_count, sd_size, sd_seed, sd_out);
    if (train_cmd->parsed()) return run_train_toy(tf, train_out);
    if (sweep_cmd->parsed()) {
      return run_sweep(sf, sweep_weights, sweep_eval, sweep_out);
    }
    if (enh_cmd->parsed()) return run_enhance(enh_in, enh_out, enh_ckpt);
    if (met_cmd->parsed()) return run_metrics(met_pred, met_truth);
    return 0;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return 2;
  }
}

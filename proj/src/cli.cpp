#include "congeal/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "congeal/checkpoint.hpp"
#include "congeal/congeal.hpp"
#include "congeal/io.hpp"
#include "congeal/lsc.hpp"
#include "congeal/metrics.hpp"
#include "congeal/report.hpp"
#include "congeal/warp.hpp"

namespace fs = std::filesystem;

namespace congeal {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DataFlags {
  std::string data;
  std::string labels;
  int digit = -1;
  int n = 0;
};

struct TrainFlags {
  DataFlags data;
  CongealConfig config;
  std::string preset = "desk";
  int code_size = 64;
  std::string out_dir = ".";
  std::string checkpoint;
  std::string resume;
};

void add_data_flags(CLI::App* app, DataFlags& f, bool required = true) {
  auto* d = app->add_option("--data", f.data, "IDX image file");
  if (required) d->required();
  app->add_option("--labels", f.labels, "IDX label file (needed with --digit)");
  app->add_option("--digit", f.digit, "keep only images with this label")->check(CLI::Range(0, 9));
  app->add_option("--n", f.n, "keep the first n images (0 keeps all)")->check(CLI::NonNegativeNumber);
}

ImageStack load_data(const DataFlags& f) {
  ImageStack s = read_idx_images(f.data);
  if (f.digit >= 0) {
    if (f.labels.empty()) throw UsageError("--digit needs --labels");
    const std::vector<int> labels = read_idx_labels(f.labels);
    s = filter_by_label(s, labels, f.digit);
  }
  if (f.n > 0 && f.n < s.count) {
    s.pixels.resize(static_cast<std::size_t>(f.n) * s.image_size());
    s.count = f.n;
  }
  if (s.empty()) throw std::runtime_error("no images selected from " + f.data);
  return s;
}

void add_train_flags(CLI::App* app, TrainFlags& f) {
  add_data_flags(app, f.data);
  CongealConfig& c = f.config;
  app->add_option("--reference-index", c.reference_index, "reference image index");
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--lambda", c.lambda, "weight of the complexity term")->check(CLI::NonNegativeNumber);
  app->add_option("--gamma", c.gamma, "weight of the positional code penalty")->check(CLI::NonNegativeNumber);
  app->add_option("--k", c.k, "exponent of the positional weights")->check(CLI::PositiveNumber);
  app->add_option("--code-size", f.code_size, "code length")->check(CLI::PositiveNumber);
  app->add_option("--batch", c.batch, "batch size")->check(CLI::PositiveNumber);
  app->add_option("--epochs", c.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  app->add_option("--lr", c.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  app->add_option("--patience", c.patience, "early-stop patience in epochs (0 disables)");
  app->add_option("--coupling-delay", c.coupling_delay, "epochs before C reaches the aligner");
  app->add_option("--norm", [&c](const CLI::results_t& r) {
       if (r[0] == "mean") c.norm = LossNorm::Mean;
       else if (r[0] == "sum") c.norm = LossNorm::Sum;
       else return false;
       return true;
     }, "loss normalisation: mean or sum");
  app->add_option("--preset", f.preset, "network preset")->check(CLI::IsMember({"desk", "mnist"}));
  app->add_option("--out-dir", f.out_dir, "output directory");
  app->add_option("--checkpoint", f.checkpoint, "checkpoint path (default <out-dir>/checkpoint.dprc)");
  app->add_option("--checkpoint-every", c.checkpoint_every, "epochs between checkpoints");
}

std::string join_path(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void write_stat_image(const std::string& dir, const std::string& name, int c, int h, int w,
                      std::vector<double> values, bool normalise, RunReport& report) {
  if (normalise) normalise_max(values);
  write_pnm(join_path(dir, name), to_pnm(c, h, w, std::span<const double>(values)));
  report.images[name.substr(0, name.find('.'))] = name;
}

void write_grid(const std::string& dir, const std::string& name, const ImageStack& stack, RunReport* report) {
  const ImageStack g = make_grid(stack);
  write_pnm(join_path(dir, name), to_pnm(g.channels, g.height, g.width, std::span<const float>(g.pixels)));
  if (report) report->images[name.substr(0, name.find('.'))] = name;
}

void write_params(const std::string& path, const std::vector<WarpParams>& params) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "# index d0 d1 d2 d3 d4 d5 d6 d7\n";
  for (std::size_t i = 0; i < params.size(); ++i) {
    out << i;
    for (double v : params[i].d) out << ' ' << format_double(v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path);
}

std::vector<WarpParams> read_params(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<WarpParams> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::size_t index = 0;
    WarpParams p;
    std::string tok;
    if (!(ls >> index) || index != out.size()) throw std::runtime_error(path + ": bad params line '" + line + "'");
    for (double& v : p.d) {
      if (!(ls >> tok)) throw std::runtime_error(path + ": bad params line '" + line + "'");
      v = parse_double(tok);
    }
    out.push_back(p);
  }
  return out;
}

// Mean/variance images, sample grids and the aligned stack for one run.
void emit_outputs(const std::string& dir, const ImageStack& before, const ImageStack& after, RunReport& r,
                  const std::string& prefix = "") {
  write_stat_image(dir, prefix + "mean_before.pgm", r.channels, r.height, r.width, r.mean_before, false, r);
  write_stat_image(dir, prefix + "variance_before.pgm", r.channels, r.height, r.width, r.variance_before, true, r);
  write_stat_image(dir, prefix + "mean_after.pgm", r.channels, r.height, r.width, r.mean_after, false, r);
  write_stat_image(dir, prefix + "variance_after.pgm", r.channels, r.height, r.width, r.variance_after, true, r);
  write_grid(dir, prefix + "grid_before.pgm", before, &r);
  write_grid(dir, prefix + "grid_after.pgm", after, &r);
  if (after.channels == 1) {
    write_idx_images(join_path(dir, prefix + "aligned.idx3-ubyte"), after);
    r.images[prefix + "aligned"] = prefix + "aligned.idx3-ubyte";
  }
}

// Aligned stack as written by a finished run: the reference stays untouched.
ImageStack aligned_stack(ModelState<float>& model, const Tensor<float>& reference, const ImageStack& data,
                         int reference_index, int batch) {
  StackSource src(data);
  Alignment a = infer_align(model, reference, src, batch);
  a.aligned.set_image(reference_index, reference);
  return a.aligned;
}

void print_summary(std::ostream& out, const RunReport& r) {
  out << "method=" << r.method << (r.arm.empty() ? "" : " arm=" + r.arm)
      << " apsnr_before=" << format_double(r.apsnr_before) << " apsnr_after=" << format_double(r.apsnr_after)
      << " mean_area_ratio=" << format_double(r.mean_area_ratio) << "\n";
}

int cmd_perturb(const DataFlags& df, double sigma, std::uint64_t seed, const std::string& model, int pad,
                int template_index, const std::string& out_dir, std::ostream& out) {
  DataFlags sel = df;
  if (template_index >= 0) sel.n = 0;  // --n counts the copies in template mode
  const ImageStack src = load_data(sel);
  if (src.channels != 1) throw std::runtime_error("perturb: IDX output holds single-channel images only");
  fs::create_directories(out_dir);
  ImageStack images;
  std::vector<Homography> truth;
  if (template_index >= 0) {
    if (template_index >= src.count) throw UsageError("--template outside the selected images");
    if (model != "perspective") throw UsageError("--template works with the perspective model");
    const int copies = df.n > 0 ? df.n : 1000;
    SyntheticCorpus c = make_synthetic_corpus(src.image_tensor(template_index), copies, sigma, seed);
    images = std::move(c.images);
    truth = std::move(c.truth);
  } else {
    const int side = model == "affine" ? pad : src.height;
    images = ImageStack(0, 1, side, side);
    for (int i = 0; i < src.count; ++i) {
      const std::uint64_t s = seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(i);
      Perturbed p = model == "affine" ? perturb_affine(src.image_tensor(i), AffineRanges{}, pad, s)
                                      : perturb_perspective(src.image_tensor(i), sigma, src.height, s);
      images.append(p.image.data());
      truth.push_back(p.truth);
    }
  }
  const std::string img_path = join_path(out_dir, "images.idx3-ubyte");
  write_idx_images(img_path, images);
  const std::string warp_path = join_path(out_dir, "warps.txt");
  std::ofstream w(warp_path, std::ios::trunc);
  w << "# index h00 h01 h02 h10 h11 h12 h20 h21 h22 (perturbed = warp(source, H))\n";
  for (std::size_t i = 0; i < truth.size(); ++i) {
    w << i;
    for (double v : truth[i].m) w << ' ' << format_double(v);
    w << '\n';
  }
  if (!w) throw std::runtime_error("failed writing " + warp_path);
  out << "wrote " << images.count << " images to " << img_path << "\n";
  return kExitOk;
}

CongealConfig resolved(const TrainFlags& f, const std::string& checkpoint) {
  CongealConfig c = f.config;
  c.checkpoint_path = checkpoint;
  return c;
}

int cmd_congeal(TrainFlags& f, std::ostream& out) {
  const ImageStack data = load_data(f.data);
  fs::create_directories(f.out_dir);
  const std::string ckpt = f.checkpoint.empty() ? join_path(f.out_dir, "checkpoint.dprc") : f.checkpoint;
  const CongealConfig config = resolved(f, ckpt);
  StackSource src(data);
  TrainResult res = f.resume.empty()
                        ? train(src, preset_spec(f.preset, f.code_size, data.channels, data.height, data.width),
                                config, &out)
                        : resume(src, f.resume, config, &out);
  const ImageStack after = aligned_stack(res.model, res.reference, data, config.reference_index, config.batch);
  RunReport& r = res.report;
  emit_outputs(f.out_dir, data, after, r);
  r.images["checkpoint"] = ckpt;
  write_report(join_path(f.out_dir, "report.txt"), r);
  print_summary(out, r);
  return kExitOk;
}

int cmd_ablate(TrainFlags& f, std::ostream& out) {
  const ImageStack data = load_data(f.data);
  fs::create_directories(f.out_dir);
  const std::string ckpt = f.checkpoint.empty() ? join_path(f.out_dir, "checkpoint.dprc") : f.checkpoint;
  const CongealConfig config = resolved(f, ckpt);
  StackSource src(data);
  const NetworkSpec spec = preset_spec(f.preset, f.code_size, data.channels, data.height, data.width);
  AblationResult a = ablate(src, spec, config, &out);
  for (RunReport* r : {&a.d_only, &a.c_only, &a.both}) {
    const std::string arm_ckpt = ckpt + "." + r->arm;
    ImageStack after = data;
    for (int i = 0; i < data.count; ++i) {
      if (i == config.reference_index) continue;
      const Homography h = corners_to_homography(r->params[static_cast<std::size_t>(i)], data.width, data.height);
      after.set_image(i, warp_image(data.image_tensor(i), h));
    }
    emit_outputs(f.out_dir, data, after, *r, r->arm + "_");
    r->images["checkpoint"] = arm_ckpt;
    write_report(join_path(f.out_dir, "report_" + r->arm + ".txt"), *r);
    print_summary(out, *r);
  }
  return kExitOk;
}

int cmd_lsc(const DataFlags& df, int reference_index, LscConfig config, std::optional<double> sigma, int levels,
            const std::string& out_dir, std::ostream& out) {
  const ImageStack data = load_data(df);
  fs::create_directories(out_dir);
  config.levels = levels > 0 ? levels : default_lsc_levels(sigma.value_or(0.0));
  StackSource src(data);
  LscResult res;
  RunReport r = lsc_report(src, reference_index, config, &res);
  emit_outputs(out_dir, data, res.aligned, r);
  write_params(join_path(out_dir, "params.txt"), res.params);
  r.images["params"] = "params.txt";
  write_report(join_path(out_dir, "report.txt"), r);
  long long unconverged = 0;
  for (bool c : res.converged) unconverged += c ? 0 : 1;
  print_summary(out, r);
  out << "unconverged=" << unconverged << "\n";
  return kExitOk;
}

int cmd_infer(const DataFlags& df, const std::string& checkpoint, int batch, const std::string& out_dir,
              std::ostream& out) {
  const ImageStack data = load_data(df);
  CheckpointData ck = load_checkpoint(checkpoint);
  fs::create_directories(out_dir);
  StackSource src(data);
  const Alignment a = infer_align(ck.model, ck.reference, src, batch);
  write_params(join_path(out_dir, "params.txt"), a.params);
  if (a.aligned.channels == 1) write_idx_images(join_path(out_dir, "aligned.idx3-ubyte"), a.aligned);
  write_grid(out_dir, "grid_aligned.pgm", a.aligned, nullptr);
  out << "aligned " << a.aligned.count << " images; apsnr=" << format_double(apsnr(a.aligned)) << "\n";
  return kExitOk;
}

int cmd_eval(const DataFlags& df, const std::string& landmarks, const std::string& params_path,
             const std::string& out_dir, std::ostream& out) {
  const ImageStack data = load_data(df);
  fs::create_directories(out_dir);
  const StackStats s = stack_stats(data);
  std::vector<double> mean = s.mean(), var = s.variance();
  double vmax = 0.0;
  for (double v : var) vmax = std::max(vmax, v);
  std::ostringstream rep;
  rep << "count=" << data.count << "\n";
  rep << "geometry=" << data.channels << "x" << data.height << "x" << data.width << "\n";
  rep << "apsnr=" << format_double(apsnr(s)) << "\n";
  rep << "mse=" << format_double(s.mse()) << "\n";
  rep << "variance_energy=" << format_double(s.variance_energy()) << "\n";
  rep << "variance_max=" << format_double(vmax) << "\n";
  normalise_max(var);
  write_pnm(join_path(out_dir, "mean.pgm"), to_pnm(data.channels, data.height, data.width, std::span<const double>(mean)));
  write_pnm(join_path(out_dir, "variance.pgm"),
            to_pnm(data.channels, data.height, data.width, std::span<const double>(var)));
  rep << "image.mean=mean.pgm\nimage.variance=variance.pgm\n";
  if (!landmarks.empty()) {
    const LandmarkSet set = read_landmarks(landmarks);
    std::vector<WarpParams> params =
        params_path.empty() ? std::vector<WarpParams>(set.points.size()) : read_params(params_path);
    const LandmarkError e = landmark_error(set, params, data.width, data.height);
    for (std::size_t l = 0; l < e.per_landmark.size(); ++l) {
      rep << "landmark." << l << "=" << format_double(e.per_landmark[l]) << "\n";
    }
    rep << "landmark_mean=" << format_double(e.mean) << "\n";
  }
  const std::string path = join_path(out_dir, "eval.txt");
  std::ofstream f(path, std::ios::trunc);
  f << rep.str();
  if (!f) throw std::runtime_error("failed writing " + path);
  out << rep.str();
  return kExitOk;
}

// `key = value` lines; blank lines and lines starting with '#' or ';' are skipped.
std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int no = 0;
  const auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  };
  while (std::getline(in, line)) {
    ++no;
    line = trim(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(no) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(path + ":" + std::to_string(no) + ": empty key");
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

}  // namespace

int run_cli(const std::vector<std::string>& args_in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Deep penalised reconstruction congealing", "congeal"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_path;

  DataFlags pdata;
  double psigma = 0.1;
  std::uint64_t pseed = 0;
  std::string pmodel = "perspective";
  int ppad = 40;
  int ptemplate = -1;
  std::string pout = ".";
  auto* perturb = app.add_subcommand("perturb", "write seeded perturbed copies of a dataset");
  add_data_flags(perturb, pdata);
  perturb->add_option("--sigma", psigma, "corner noise std as a fraction of the side")->check(CLI::NonNegativeNumber);
  perturb->add_option("--seed", pseed, "random seed");
  perturb->add_option("--model", pmodel, "perspective or affine")->check(CLI::IsMember({"perspective", "affine"}));
  perturb->add_option("--pad", ppad, "canvas side for the affine model")->check(CLI::PositiveNumber);
  perturb->add_option("--template", ptemplate,
                      "perturb --n copies of this one image (output image 0 is the clean template)");
  perturb->add_option("--out-dir", pout, "output directory");

  TrainFlags cflags;
  auto* congeal = app.add_subcommand("congeal", "jointly align a dataset");
  add_train_flags(congeal, cflags);
  congeal->add_option("--resume", cflags.resume, "continue from this checkpoint");

  TrainFlags aflags;
  auto* ablation = app.add_subcommand("ablate", "D-only, C-only and combined runs with the same seed");
  add_train_flags(ablation, aflags);

  DataFlags ldata;
  int lref = 0;
  LscConfig lconf;
  double lsigma = 0.0;
  int llevels = 0;
  std::string lgradient = "central";
  std::string lout = ".";
  auto* lsc = app.add_subcommand("lsc", "least-squares congealing baseline");
  add_data_flags(lsc, ldata);
  lsc->add_option("--reference-index", lref, "reference image index");
  lsc->add_option("--max-iterations", lconf.max_iterations, "Gauss-Newton iterations per level");
  lsc->add_option("--damping", lconf.damping, "initial Levenberg damping")->check(CLI::NonNegativeNumber);
  lsc->add_option("--threshold", lconf.threshold, "stop when the update norm falls below this (px)");
  lsc->add_option("--levels", llevels, "pyramid levels, 1 or 2 (default from --sigma)")->check(CLI::Range(0, 2));
  auto* lsigma_opt = lsc->add_option("--sigma", lsigma, "expected perturbation level, picks the pyramid");
  lsc->add_option("--gradient", lgradient, "central or sobel")->check(CLI::IsMember({"central", "sobel"}));
  lsc->add_option("--out-dir", lout, "output directory");

  DataFlags idata;
  std::string ickpt;
  int ibatch = 64;
  std::string iout = ".";
  auto* infer = app.add_subcommand("infer", "align images with a trained checkpoint");
  add_data_flags(infer, idata);
  infer->add_option("--checkpoint", ickpt, "checkpoint written by congeal")->required();
  infer->add_option("--batch", ibatch, "batch size")->check(CLI::PositiveNumber);
  infer->add_option("--out-dir", iout, "output directory");

  DataFlags edata;
  std::string elandmarks, eparams;
  std::string eout = ".";
  auto* eval = app.add_subcommand("eval", "APSNR, mean/variance images and landmark errors");
  add_data_flags(eval, edata);
  eval->add_option("--landmarks", elandmarks, "landmark file");
  eval->add_option("--params", eparams, "per-image params used to map the landmarks");
  eval->add_option("--out-dir", eout, "output directory");

  for (auto* sub : app.get_subcommands({})) {
    sub->add_option("--config", config_path, "file of key = value lines; flags override it");
  }

  std::vector<std::string> args(args_in.begin() + (args_in.empty() ? 0 : 1), args_in.end());
  try {
    // Config file entries go in front of the command-line flags so the latter win.
    for (std::size_t i = 0; i < args.size(); ++i) {
      std::string path;
      if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
      else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
      if (path.empty()) continue;
      if (args.empty() || !app.get_subcommand_no_throw(args[0])) throw UsageError("--config needs a subcommand first");
      CLI::App* sub = app.get_subcommand(args[0]);
      std::vector<std::string> injected;
      for (const auto& [key, value] : read_config_file(path)) {
        if (key == "config" || !sub->get_option_no_throw("--" + key)) {
          throw UsageError("unknown key '" + key + "' in " + path);
        }
        injected.push_back("--" + key + "=" + value);
      }
      args.insert(args.begin() + 1, injected.begin(), injected.end());
      break;
    }
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }

  try {
    if (*perturb) return cmd_perturb(pdata, psigma, pseed, pmodel, ppad, ptemplate, pout, out);
    if (*congeal) return cmd_congeal(cflags, out);
    if (*ablation) return cmd_ablate(aflags, out);
    if (*lsc) {
      lconf.gradient = lgradient == "sobel" ? ImageGradient::Sobel : ImageGradient::Central;
      return cmd_lsc(ldata, lref, lconf, lsigma_opt->count() ? std::optional<double>(lsigma) : std::nullopt,
                     llevels, lout, out);
    }
    if (*infer) return cmd_infer(idata, ickpt, ibatch, iout, out);
    if (*eval) return cmd_eval(edata, elandmarks, eparams, eout, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace congeal

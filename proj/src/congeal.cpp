#include "congeal/congeal.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <random>
#include <sstream>

#include "congeal/checkpoint.hpp"
#include "congeal/metrics.hpp"
#include "congeal/ops.hpp"
#include "congeal/report.hpp"

namespace congeal {

namespace {

std::string norm_name(LossNorm n) { return n == LossNorm::Mean ? "mean" : "sum"; }

LossNorm parse_norm(const std::string& s) {
  if (s == "mean") return LossNorm::Mean;
  if (s == "sum") return LossNorm::Sum;
  throw std::invalid_argument("unknown loss normalisation '" + s + "'");
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

std::mt19937_64 rng_from(const std::string& text) {
  std::mt19937_64 rng;
  std::istringstream in(text);
  in >> rng;
  if (!in) throw TrainingError("corrupt RNG state");
  return rng;
}

// Loads images into an N x C x H x W tensor.
Tensor<float> load_batch(const ImageSource& source, std::span<const int> indices) {
  Tensor<float> t({static_cast<int>(indices.size()), source.channels(), source.height(), source.width()});
  const std::size_t stride = source.image_size();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    source.read(indices[i], t.data().subspan(i * stride, stride));
  }
  return t;
}

Tensor<float> as_batch(const Tensor<float>& image) {
  Shape s{1};
  s.insert(s.end(), image.shape().begin(), image.shape().end());
  return Tensor<float>(std::move(s), image.values());
}

WarpParams params_row(const Tensor<float>& p, int row) {
  WarpParams w;
  for (int k = 0; k < 8; ++k) w.d[k] = static_cast<double>(p[static_cast<std::size_t>(row) * 8 + k]);
  return w;
}

std::map<std::string, std::string> echo(const NetworkSpec& spec, const CongealConfig& config) {
  auto m = config.to_map();
  std::istringstream in(spec.serialize());
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) m["spec." + line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

// Probe APSNR on the first images of the dataset; the reference stays as is.
double probe_apsnr(ModelState<float>& model, const Tensor<float>& reference, const ImageSource& data,
                   const CongealConfig& config) {
  const int probe = std::min(config.probe_size, data.size());
  StackStats stats(data.channels(), data.height(), data.width());
  std::vector<int> idx;
  for (int i = 0; i < probe; ++i) idx.push_back(i);
  const Tensor<float> ref = as_batch(reference);
  for (std::size_t start = 0; start < idx.size(); start += static_cast<std::size_t>(config.batch)) {
    const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(config.batch), idx.size() - start);
    const std::span<const int> chunk(idx.data() + start, n);
    Tape<float> tape;
    auto out = aligner_forward(model, tape.constant(load_batch(data, chunk)), tape.constant(ref));
    const Tensor<float>& w = out.warped.value();
    for (std::size_t i = 0; i < n; ++i) {
      if (chunk[i] == config.reference_index) {
        stats.add(reference.values());
      } else {
        stats.add(w.data().subspan(i * data.image_size(), data.image_size()));
      }
    }
  }
  return apsnr(stats);
}

RunReport finish_report(ModelState<float>& model, const Tensor<float>& reference, const ImageSource& data,
                        const CongealConfig& config, const TrainState& state, const StackStats& before) {
  RunReport r;
  r.config = echo(model.spec(), config);
  r.epochs = state.history;
  r.count = data.size();
  r.channels = data.channels();
  r.height = data.height();
  r.width = data.width();
  r.stopped_early = state.stopped_early;
  r.apsnr_before = apsnr(before);
  r.mean_before = before.mean();
  r.variance_before = before.variance();
  StackStats after(data.channels(), data.height(), data.width());
  r.params.resize(static_cast<std::size_t>(data.size()));
  double area = 0.0;
  align_each(model, reference, data, config.batch, [&](int i, const WarpParams& p, std::span<const float> img) {
    if (i == config.reference_index) {
      after.add(reference.values());
      return;
    }
    after.add(img);
    r.params[static_cast<std::size_t>(i)] = p;
    area += frame_area_ratio(corners_to_homography(p, data.width(), data.height()), data.width(), data.height());
  });
  r.apsnr_after = apsnr(after);
  r.mean_after = after.mean();
  r.variance_after = after.variance();
  r.mean_area_ratio = data.size() > 1 ? area / (data.size() - 1) : 1.0;
  return r;
}

void check_resumable(const CongealConfig& saved, const CongealConfig& wanted) {
  CongealConfig a = saved, b = wanted;
  a.epochs = b.epochs;
  a.patience = b.patience;
  a.checkpoint_path = b.checkpoint_path;
  a.checkpoint_every = b.checkpoint_every;
  if (!(a == b)) throw TrainingError("resume: the checkpoint was written with different loss or data settings");
}

TrainResult run(const ImageSource& data, TrainResult result, const CongealConfig& config, std::ostream* progress) {
  const auto t0 = std::chrono::steady_clock::now();
  ModelState<float>& model = result.model;
  TrainState& state = result.state;
  model.adam.hyper.lr = config.lr;
  std::mt19937_64 rng = rng_from(state.rng);
  const Tensor<float> ref = as_batch(result.reference);
  const StackStats before = stack_stats(data);

  std::vector<int> sorted;
  for (int i = 0; i < data.size(); ++i) {
    if (i != config.reference_index) sorted.push_back(i);
  }
  std::vector<int> order;

  bool saved = false;
  while (state.epoch < config.epochs && !state.stopped_early) {
    // Each epoch's order depends only on the RNG, so a resumed run replays it.
    order = sorted;
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats e;
    e.epoch = state.epoch + 1;
    double seen = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(config.batch), order.size() - start);
      const std::span<const int> chunk(order.data() + start, n);
      try {
        model.zero_grad();
        Tape<float> tape;
        auto terms = total_loss(model, tape.constant(load_batch(data, chunk)), tape.constant(ref), config,
                                state.epoch >= config.coupling_delay);
        tape.backward(terms.total);
        model.step();
        const double w = static_cast<double>(n);
        if (terms.distortion.tape) e.distortion += w * terms.distortion.value()[0];
        if (terms.reconstruction.tape) e.reconstruction += w * terms.reconstruction.value()[0];
        if (terms.penalty.tape) e.penalty += w * terms.penalty.value()[0];
        e.clamped += terms.aligned.clamped;
        seen += w;
      } catch (const NonFiniteError& err) {
        throw TrainingError("non-finite loss in epoch " + std::to_string(e.epoch) + " (" + err.what() +
                            "); the last checkpoint was left untouched");
      }
    }
    if (seen > 0) {
      e.distortion /= seen;
      e.reconstruction /= seen;
      e.penalty /= seen;
    }
    e.apsnr = probe_apsnr(model, result.reference, data, config);
    state.history.push_back(e);
    state.epoch = e.epoch;
    if (e.apsnr > state.best_apsnr) {
      state.best_apsnr = e.apsnr;
      state.since_best = 0;
    } else {
      ++state.since_best;
      if (config.patience > 0 && state.since_best >= config.patience) state.stopped_early = true;
    }
    state.rng = rng_text(rng);
    if (progress) {
      *progress << "epoch=" << e.epoch << " D=" << format_double(e.distortion)
                << " Crec=" << format_double(e.reconstruction) << " Cpen=" << format_double(e.penalty)
                << " apsnr=" << format_double(e.apsnr) << "\n";
      progress->flush();
    }
    const bool last = state.epoch == config.epochs || state.stopped_early;
    const bool due = config.checkpoint_every > 0 && state.epoch % config.checkpoint_every == 0;
    if (!config.checkpoint_path.empty() && (last || due)) {
      save_checkpoint(config.checkpoint_path, model, result.reference, config, state);
      saved = last;
    }
  }
  if (!config.checkpoint_path.empty() && !saved) {
    save_checkpoint(config.checkpoint_path, model, result.reference, config, state);
  }
  result.report = finish_report(model, result.reference, data, config, state, before);
  result.report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

}  // namespace

void CongealConfig::validate(int dataset_size) const {
  if (!(lambda >= 0) || !(gamma >= 0)) throw std::invalid_argument("lambda and gamma must be >= 0");
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("learning rate must be positive");
  if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (patience < 0 || probe_size < 1 || checkpoint_every < 0 || coupling_delay < 0) throw std::invalid_argument("bad schedule settings");
  if (!use_distortion && lambda == 0) throw std::invalid_argument("dropping D with lambda = 0 leaves no loss");
  if (dataset_size < 1) throw std::invalid_argument("dataset is empty");
  if (reference_index < 0 || reference_index >= dataset_size) {
    throw std::invalid_argument("reference index " + std::to_string(reference_index) + " outside dataset of " +
                                std::to_string(dataset_size));
  }
}

std::map<std::string, std::string> CongealConfig::to_map() const {
  return {
      {"lambda", format_double(lambda)},
      {"gamma", format_double(gamma)},
      {"k", std::to_string(k)},
      {"lr", format_double(lr)},
      {"batch", std::to_string(batch)},
      {"epochs", std::to_string(epochs)},
      {"seed", std::to_string(seed)},
      {"reference_index", std::to_string(reference_index)},
      {"norm", norm_name(norm)},
      {"patience", std::to_string(patience)},
      {"probe_size", std::to_string(probe_size)},
      {"use_distortion", use_distortion ? "1" : "0"},
      {"coupling_delay", std::to_string(coupling_delay)},
      {"checkpoint_path", checkpoint_path},
      {"checkpoint_every", std::to_string(checkpoint_every)},
  };
}

CongealConfig CongealConfig::from_map(const std::map<std::string, std::string>& m) {
  CongealConfig c;
  for (const auto& [key, v] : m) {
    if (key == "lambda") c.lambda = parse_double(v);
    else if (key == "gamma") c.gamma = parse_double(v);
    else if (key == "k") c.k = std::stoi(v);
    else if (key == "lr") c.lr = parse_double(v);
    else if (key == "batch") c.batch = std::stoi(v);
    else if (key == "epochs") c.epochs = std::stoi(v);
    else if (key == "seed") c.seed = std::stoull(v);
    else if (key == "reference_index") c.reference_index = std::stoi(v);
    else if (key == "norm") c.norm = parse_norm(v);
    else if (key == "patience") c.patience = std::stoi(v);
    else if (key == "probe_size") c.probe_size = std::stoi(v);
    else if (key == "use_distortion") c.use_distortion = v == "1";
    else if (key == "coupling_delay") c.coupling_delay = std::stoi(v);
    else if (key == "checkpoint_path") c.checkpoint_path = v;
    else if (key == "checkpoint_every") c.checkpoint_every = std::stoi(v);
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  return c;
}

template <typename T>
Var<T> distortion_loss(Var<T> warped, Var<T> reference, LossNorm norm) {
  const Shape& ws = warped.shape();
  const Shape& rs = reference.shape();
  if (ws.size() != 4 || rs.size() != 4 || rs[0] != 1 || !std::equal(ws.begin() + 1, ws.end(), rs.begin() + 1)) {
    throw ShapeError("distortion_loss: warped batch " + shape_str(ws) + " and reference " + shape_str(rs) +
                     " do not match");
  }
  auto d = ad::l1_sum(ad::sub(warped, reference));
  if (norm == LossNorm::Sum) return d;
  return ad::scale(d, static_cast<T>(1.0 / static_cast<double>(warped.size())));
}

template <typename T>
ComplexityTerms<T> complexity_loss(ModelState<T>& model, Var<T> warped, double gamma, int k, LossNorm norm) {
  ComplexityTerms<T> c;
  c.codes = encode(model, warped);
  auto rec = decode(model, c.codes);
  c.reconstruction = ad::l1_sum(ad::sub(rec, warped));
  c.penalty = positional_penalty(c.codes, penalty_weights(model.spec().code_size, k));
  if (norm == LossNorm::Mean) {
    c.reconstruction = ad::scale(c.reconstruction, static_cast<T>(1.0 / static_cast<double>(warped.size())));
    // Same divisor as the image terms so the ratio between the terms is unchanged.
    c.penalty = ad::scale(c.penalty, static_cast<T>(1.0 / static_cast<double>(warped.size())));
  }
  c.total = gamma == 0.0 ? c.reconstruction : ad::add(c.reconstruction, ad::scale(c.penalty, static_cast<T>(gamma)));
  return c;
}

template <typename T>
LossTerms<T> total_loss(ModelState<T>& model, Var<T> batch, Var<T> reference, const CongealConfig& config,
                        bool couple) {
  LossTerms<T> terms;
  terms.aligned = aligner_forward(model, batch, reference);
  if (config.use_distortion) {
    terms.distortion = distortion_loss(terms.aligned.warped, reference, config.norm);
    terms.total = terms.distortion;
  }
  if (config.lambda > 0) {
    auto input = couple ? terms.aligned.warped : batch.tape->constant(terms.aligned.warped.value());
    auto c = complexity_loss(model, input, config.gamma, config.k, config.norm);
    terms.reconstruction = c.reconstruction;
    terms.penalty = c.penalty;
    auto weighted = config.lambda == 1.0 ? c.total : ad::scale(c.total, static_cast<T>(config.lambda));
    terms.total = terms.total.tape ? ad::add(terms.total, weighted) : weighted;
  }
  if (!terms.total.tape) throw std::invalid_argument("total_loss: no active loss term");
  return terms;
}

std::uint64_t model_seed(std::uint64_t seed) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

TrainResult train(const ImageSource& data, const NetworkSpec& spec, const CongealConfig& config,
                  std::ostream* progress) {
  config.validate(data.size());
  if (data.image_shape() != spec.image_shape()) {
    throw ShapeError("train: images " + shape_str(data.image_shape()) + " do not match the network input " +
                     shape_str(spec.image_shape()));
  }
  TrainResult result{ModelState<float>(spec, model_seed(config.seed)), data.image(config.reference_index), {}, {}};
  result.model.adam.hyper.lr = config.lr;
  result.state.rng = rng_text(std::mt19937_64(config.seed));
  return run(data, std::move(result), config, progress);
}

TrainResult resume(const ImageSource& data, const std::string& checkpoint, const CongealConfig& config,
                   std::ostream* progress) {
  config.validate(data.size());
  CheckpointData ck = load_checkpoint(checkpoint);
  check_resumable(ck.config, config);
  if (data.image_shape() != ck.model.spec().image_shape()) {
    throw ShapeError("resume: images do not match the checkpoint's network input");
  }
  if (ck.reference.values() != data.image(config.reference_index).values()) {
    throw TrainingError("resume: the reference image differs from the checkpoint's");
  }
  // A larger epoch budget or patience lifts an earlier stop.
  ck.state.stopped_early = ck.state.stopped_early && config.patience > 0 && ck.state.since_best >= config.patience;
  TrainResult result{std::move(ck.model), std::move(ck.reference), std::move(ck.state), {}};
  return run(data, std::move(result), config, progress);
}

void align_each(ModelState<float>& model, const Tensor<float>& reference, const ImageSource& images, int batch,
                const std::function<void(int, const WarpParams&, std::span<const float>)>& sink) {
  if (images.image_shape() != model.spec().image_shape() || reference.shape() != model.spec().image_shape()) {
    throw ShapeError("align: images " + shape_str(images.image_shape()) + " do not match the network input " +
                     shape_str(model.spec().image_shape()));
  }
  if (batch < 1) throw std::invalid_argument("batch size must be >= 1");
  const Tensor<float> ref = as_batch(reference);
  std::vector<int> idx;
  for (int start = 0; start < images.size(); start += batch) {
    const int n = std::min(batch, images.size() - start);
    idx.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = start + i;
    Tape<float> tape;
    auto out = aligner_forward(model, tape.constant(load_batch(images, idx)), tape.constant(ref));
    const Tensor<float>& p = out.params.value();
    const Tensor<float>& w = out.warped.value();
    for (int i = 0; i < n; ++i) {
      sink(start + i, params_row(p, i), w.data().subspan(static_cast<std::size_t>(i) * images.image_size(),
                                                         images.image_size()));
    }
  }
}

Alignment infer_align(ModelState<float>& model, const Tensor<float>& reference, const ImageSource& images, int batch) {
  Alignment a;
  a.aligned = ImageStack(images.size(), images.channels(), images.height(), images.width());
  a.params.resize(static_cast<std::size_t>(images.size()));
  align_each(model, reference, images, batch, [&](int i, const WarpParams& p, std::span<const float> img) {
    a.params[static_cast<std::size_t>(i)] = p;
    std::copy(img.begin(), img.end(), a.aligned.image(i).begin());
  });
  return a;
}

AblationResult ablate(const ImageSource& data, const NetworkSpec& spec, const CongealConfig& config,
                      std::ostream* progress) {
  const auto arm = [&](const char* name, CongealConfig c) {
    if (!c.checkpoint_path.empty()) c.checkpoint_path += std::string(".") + name;
    if (progress) *progress << "arm=" << name << "\n";
    RunReport r = train(data, spec, c, progress).report;
    r.arm = name;
    return r;
  };
  CongealConfig d_only = config;
  d_only.lambda = 0.0;
  d_only.use_distortion = true;
  CongealConfig c_only = config;
  c_only.use_distortion = false;
  if (c_only.lambda == 0) c_only.lambda = 1.0;
  CongealConfig both = config;
  both.use_distortion = true;
  if (both.lambda == 0) both.lambda = 1.0;
  AblationResult out;
  out.d_only = arm("d_only", d_only);
  out.c_only = arm("c_only", c_only);
  out.both = arm("both", both);
  return out;
}

#define CONGEAL_INSTANTIATE(T)                                                                          \
  template Var<T> distortion_loss(Var<T>, Var<T>, LossNorm);                                           \
  template ComplexityTerms<T> complexity_loss(ModelState<T>&, Var<T>, double, int, LossNorm);          \
  template LossTerms<T> total_loss(ModelState<T>&, Var<T>, Var<T>, const CongealConfig&, bool);

CONGEAL_INSTANTIATE(float)
CONGEAL_INSTANTIATE(double)

}  // namespace congeal

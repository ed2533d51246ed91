#include <cmath>
#include <filesystem>
#include <random>

#include "congeal/checkpoint.hpp"
#include "congeal/congeal.hpp"
#include "congeal/grad_check.hpp"
#include "congeal/metrics.hpp"
#include "congeal/ops.hpp"
#include "doctest.h"
#include "test_util.hpp"

using namespace congeal;
using congeal::testing::random_tensor;
using congeal::testing::smooth_image;

namespace {

// Small network for 14 x 14 inputs: 14 -> 7 -> 4 in the encoder, 7 -> 14 in the decoder.
NetworkSpec toy_spec(int code_size = 6) {
  NetworkSpec s;
  s.name = "toy";
  s.height = 14;
  s.width = 14;
  s.code_size = code_size;
  s.aligner = parse_layers("conv7-4,conv7-8,conv1-8,dense-8:none");
  s.encoder = parse_layers("conv3-4*,conv3-4*,dense-" + std::to_string(code_size) + ":sigmoid");
  s.decoder = parse_layers("dense-196,reshape-4x7x7,up2,conv3-4,conv1-1");
  s.validate();
  return s;
}

Tensor<double> toy_batch(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.5, 1.5);
  Tensor<double> t({n, 1, 14, 14});
  for (int i = 0; i < n; ++i) {
    const auto img = smooth_image(1, 14, 14, 6.5 + u(rng), 6.5 + u(rng), 2.5);
    std::copy(img.values().begin(), img.values().end(), t.values().begin() + i * 196);
  }
  return t;
}

Tensor<double> toy_reference() {
  Tensor<double> r = smooth_image(1, 14, 14, 6.5, 6.5, 2.5);
  return Tensor<double>({1, 1, 14, 14}, r.values());
}

// Nonzero aligner heads so the warp actually moves and its gradient is exercised.
template <typename T>
void jitter_heads(ModelState<T>& m, std::uint64_t seed, double scale) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (int b = 0; b < m.spec().blocks; ++b) {
    const std::string last = "aligner." + std::to_string(b) + "." + std::to_string(m.spec().aligner.size() - 1);
    for (auto& v : m.param(last + ".weight").values()) v = static_cast<T>(u(rng));
    for (auto& v : m.param(last + ".bias").values()) v = static_cast<T>(u(rng));
  }
}

double l1_oracle(const Tensor<double>& a, const Tensor<double>& b, std::size_t image) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i % image]);
  return s;
}

ImageStack toy_stack(int n, double sigma, std::uint64_t seed) {
  const auto base = smooth_image<float>(1, 14, 14, 6.5, 6.5, 2.5);
  return make_synthetic_corpus(base, n - 1, sigma, seed).images;
}

CongealConfig toy_config() {
  CongealConfig c;
  c.lr = 1e-3;
  c.batch = 8;
  c.epochs = 3;
  c.seed = 5;
  c.probe_size = 16;
  return c;
}

std::filesystem::path temp_path(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "congeal_test_congeal";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("distortion loss matches a loop over pixels") {
  const Tensor<double> x = toy_batch(3, 1);
  const Tensor<double> r = toy_reference();
  Tape<double> tape;
  auto w = tape.constant(x);
  auto ref = tape.constant(r);
  const double oracle = l1_oracle(x, r, 196);
  CHECK(distortion_loss(w, ref, LossNorm::Sum).value()[0] == doctest::Approx(oracle).epsilon(1e-12));
  CHECK(distortion_loss(w, ref, LossNorm::Mean).value()[0] == doctest::Approx(oracle / 588).epsilon(1e-12));
  CHECK(distortion_loss(ref, ref).value()[0] == 0.0);
  auto bad = tape.constant(Tensor<double>({1, 1, 14, 12}));
  CHECK_THROWS_AS(distortion_loss(w, bad), ShapeError);
}

TEST_CASE("complexity loss matches its pieces") {
  ModelState<double> m(toy_spec(), 3);
  const Tensor<double> x = toy_batch(4, 2);
  Tape<double> tape;
  auto in = tape.constant(x);
  const auto c = complexity_loss(m, in, 0.5, 2, LossNorm::Sum);
  auto codes = encode(m, in);
  const Tensor<double> rec = decode(m, codes).value();
  double rec_oracle = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) rec_oracle += std::abs(rec[i] - x[i]);
  const auto w = penalty_weights(6, 2);
  double pen_oracle = 0.0;
  for (int n = 0; n < 4; ++n)
    for (int l = 0; l < 6; ++l) pen_oracle += w.w[l] * codes.value()[n * 6 + l];
  CHECK(c.reconstruction.value()[0] == doctest::Approx(rec_oracle).epsilon(1e-12));
  CHECK(c.penalty.value()[0] == doctest::Approx(pen_oracle).epsilon(1e-12));
  CHECK(c.total.value()[0] == doctest::Approx(rec_oracle + 0.5 * pen_oracle).epsilon(1e-12));
  const auto mean = complexity_loss(m, in, 0.5, 2, LossNorm::Mean);
  CHECK(mean.total.value()[0] == doctest::Approx((rec_oracle + 0.5 * pen_oracle) / x.size()).epsilon(1e-10));
  CHECK(complexity_loss(m, in, 0.0, 2).total.value()[0] ==
        doctest::Approx(rec_oracle / x.size()).epsilon(1e-12));
}

TEST_CASE("total loss: lambda 0 is D, identity start sees the raw batch") {
  ModelState<double> m(toy_spec(), 4);
  const Tensor<double> x = toy_batch(4, 3);
  const Tensor<double> r = toy_reference();
  Tape<double> tape;
  auto batch = tape.constant(x);
  auto ref = tape.constant(r);
  CongealConfig c;
  c.lambda = 0.0;
  const auto d_only = total_loss(m, batch, ref, c);
  CHECK(d_only.total.value()[0] == doctest::Approx(l1_oracle(x, r, 196) / x.size()).epsilon(1e-12));
  CHECK(d_only.reconstruction.tape == nullptr);
  c.lambda = 0.7;
  c.gamma = 2.0;
  const auto both = total_loss(m, batch, ref, c);
  CHECK(both.aligned.warped.value().values() == x.values());
  const double expect = both.distortion.value()[0] +
                        0.7 * (both.reconstruction.value()[0] + 2.0 * both.penalty.value()[0]);
  CHECK(both.total.value()[0] == doctest::Approx(expect).epsilon(1e-12));
  c.use_distortion = false;
  const auto c_only = total_loss(m, batch, ref, c);
  CHECK(c_only.distortion.tape == nullptr);
  CHECK(c_only.total.value()[0] == doctest::Approx(expect - both.distortion.value()[0]).epsilon(1e-12));
}

TEST_CASE("full loss on a 4 x 14 x 14 batch passes the finite-difference check") {
  ModelState<double> m(toy_spec(), 7);
  jitter_heads(m, 8, 0.05);
  const Tensor<double> x = toy_batch(4, 4);
  const Tensor<double> r = toy_reference();
  CongealConfig c;
  c.lambda = 0.8;
  c.gamma = 1.5;
  c.k = 2;
  const ScalarFn f = [&](Tape<double>& tape, std::span<const Var<double>>) {
    return total_loss(m, tape.constant(x), tape.constant(r), c).total;
  };
  std::vector<Tensor<double>*> leaves{&m.param("aligner.0.0.weight"), &m.param("aligner.3.3.weight"),
                                      &m.param("aligner.1.3.bias"), &m.param("encoder.0.weight"),
                                      &m.param("decoder.0.weight")};
  GradCheckOptions opt;
  opt.max_coords = 12;
  opt.tolerance = 1e-3;
  const auto res = grad_check(f, leaves, opt);
  MESSAGE("worst relative error " << res.worst());
  CHECK(res.passed());
}

TEST_CASE("frozen autoencoder still routes C back to the aligner") {
  ModelState<double> m(toy_spec(), 9);
  jitter_heads(m, 10, 0.05);
  m.set_trainable(ParamGroup::Encoder, false);
  m.set_trainable(ParamGroup::Decoder, false);
  const Tensor<double> x = toy_batch(4, 5);
  CongealConfig c;
  c.use_distortion = false;
  m.zero_grad();
  Tape<double> tape;
  auto terms = total_loss(m, tape.constant(x), tape.constant(toy_reference()), c);
  tape.backward(terms.total);
  double aligner = 0.0;
  for (auto* t : m.group(ParamGroup::Aligner))
    for (double g : t->grad()) aligner += std::abs(g);
  CHECK(aligner > 0.0);
  for (auto* t : m.group(ParamGroup::Encoder)) {
    for (double g : t->grad()) REQUIRE(g == 0.0);
  }
}

TEST_CASE("uncoupled C trains the autoencoder only") {
  ModelState<double> m(toy_spec(), 11);
  jitter_heads(m, 12, 0.05);
  const Tensor<double> x = toy_batch(4, 6);
  CongealConfig c;
  c.use_distortion = false;
  m.zero_grad();
  Tape<double> tape;
  auto terms = total_loss(m, tape.constant(x), tape.constant(toy_reference()), c, false);
  tape.backward(terms.total);
  for (auto* t : m.group(ParamGroup::Aligner)) {
    for (double g : t->grad()) REQUIRE(g == 0.0);
  }
  double enc = 0.0;
  for (auto* t : m.group(ParamGroup::Encoder))
    for (double g : t->grad()) enc += std::abs(g);
  CHECK(enc > 0.0);
}

TEST_CASE("config map round trip and validation") {
  CongealConfig c = toy_config();
  c.lambda = 0.25;
  c.norm = LossNorm::Sum;
  c.use_distortion = false;
  c.coupling_delay = 3;
  c.checkpoint_path = "a/b.dprc";
  CHECK(CongealConfig::from_map(c.to_map()) == c);
  CHECK_THROWS(CongealConfig::from_map({{"nope", "1"}}));
  CHECK_THROWS(c.validate(0));
  CHECK_THROWS([&] { auto d = toy_config(); d.reference_index = 10; d.validate(10); }());
  CHECK_THROWS([&] { auto d = toy_config(); d.lambda = -1; d.validate(10); }());
  CHECK_THROWS([&] { auto d = toy_config(); d.lambda = 0; d.use_distortion = false; d.validate(10); }());
  CHECK_THROWS([&] { auto d = toy_config(); d.coupling_delay = -1; d.validate(10); }());
}

TEST_CASE("zero epochs leave every image where it was") {
  const ImageStack s = toy_stack(12, 0.1, 1);
  CongealConfig c = toy_config();
  c.epochs = 0;
  const auto r = train(StackSource(s), toy_spec(), c).report;
  CHECK(r.apsnr_after == r.apsnr_before);
  CHECK(r.mean_after == r.mean_before);
  for (const auto& p : r.params) CHECK(p.is_identity());
  CHECK(r.mean_area_ratio == doctest::Approx(1.0));
  CHECK(r.epochs.empty());
}

TEST_CASE("training is deterministic and keeps the reference fixed") {
  const ImageStack s = toy_stack(20, 0.1, 2);
  CongealConfig c = toy_config();
  c.reference_index = 3;
  const auto a = train(StackSource(s), toy_spec(), c);
  const auto b = train(StackSource(s), toy_spec(), c);
  CHECK(a.report == b.report);
  REQUIRE(a.report.epochs.size() == 3);
  CHECK(a.report.params[3].is_identity());
  CHECK(a.reference.values() == s.image_tensor(3).values());
  bool moved = false;
  for (std::size_t i = 0; i < a.report.params.size(); ++i) moved = moved || !a.report.params[i].is_identity();
  CHECK(moved);
  c.seed = 6;
  CHECK_FALSE(train(StackSource(s), toy_spec(), c).report.epochs == a.report.epochs);
}

TEST_CASE("resuming from a checkpoint equals the uninterrupted run") {
  const ImageStack s = toy_stack(20, 0.1, 3);
  const StackSource src(s);
  CongealConfig c = toy_config();
  c.epochs = 4;
  c.coupling_delay = 1;
  c.checkpoint_path = temp_path("full.dprc").string();
  const auto full = train(src, toy_spec(), c);

  CongealConfig half = c;
  half.epochs = 2;
  half.checkpoint_path = temp_path("half.dprc").string();
  train(src, toy_spec(), half);
  CongealConfig rest = c;
  rest.checkpoint_path = half.checkpoint_path;
  const auto resumed = resume(src, half.checkpoint_path, rest);

  CHECK(resumed.report.epochs == full.report.epochs);
  CHECK(resumed.report.params == full.report.params);
  for (std::size_t i = 0; i < full.model.params().size(); ++i) {
    REQUIRE(resumed.model.params()[i].tensor.values() == full.model.params()[i].tensor.values());
  }
  const auto ck = load_checkpoint(c.checkpoint_path);
  CHECK(ck.state.epoch == 4);
  CHECK(ck.config == c);

  CongealConfig other = rest;
  other.lambda = 0.5;
  CHECK_THROWS_AS(resume(src, half.checkpoint_path, other), TrainingError);
}

TEST_CASE("inference does not depend on the batch size") {
  const ImageStack s = toy_stack(11, 0.1, 4);
  CongealConfig c = toy_config();
  c.epochs = 1;
  auto t = train(StackSource(s), toy_spec(), c);
  const auto one = infer_align(t.model, t.reference, StackSource(s), 1);
  const auto many = infer_align(t.model, t.reference, StackSource(s), 4);
  CHECK(one.params == many.params);
  CHECK(one.aligned.pixels == many.aligned.pixels);
  for (int i = 0; i < s.count; ++i) {
    if (i == c.reference_index) continue;
    CHECK(one.params[static_cast<std::size_t>(i)] == t.report.params[static_cast<std::size_t>(i)]);
  }
  const ImageStack wrong(2, 1, 12, 12);
  CHECK_THROWS_AS(infer_align(t.model, t.reference, StackSource(wrong)), ShapeError);
}

TEST_CASE("ablation arms match their stand-alone runs") {
  const ImageStack s = toy_stack(12, 0.1, 5);
  CongealConfig c = toy_config();
  c.epochs = 2;
  const auto ab = ablate(StackSource(s), toy_spec(), c);
  CongealConfig d = c;
  d.lambda = 0.0;
  auto plain = train(StackSource(s), toy_spec(), d).report;
  plain.arm = "d_only";
  CHECK(ab.d_only == plain);
  CHECK(ab.c_only.arm == "c_only");
  CHECK(ab.c_only.config.at("use_distortion") == "0");
  CHECK(ab.both.config.at("lambda") == "1");
  for (const auto& e : ab.c_only.epochs) CHECK(e.distortion == 0.0);
}

TEST_CASE("shape mismatch between data and network is rejected") {
  const ImageStack s = toy_stack(4, 0.1, 6);
  CHECK_THROWS_AS(train(StackSource(s), preset_spec("desk"), toy_config()), ShapeError);
}

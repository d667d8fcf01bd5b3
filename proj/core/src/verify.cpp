#include "beamkd/verify.hpp"

#include <algorithm>
#include <cmath>

#include "beamkd/autodiff.hpp"
#include "beamkd/beamform.hpp"
#include "beamkd/model.hpp"
#include "beamkd/simulate.hpp"
#include "beamkd/train.hpp"

namespace beamkd::verify {

namespace {

using Params = std::vector<std::vector<double>>;

// Wraps a tape program into the (value, gradient) pair grad_check expects.
// The builder receives leaves bound to the current parameter values and must
// return a scalar loss.
struct Problem {
  std::vector<std::pair<int, int>> shapes;
  std::function<ad::TensorRef(ad::Tape<double>&, const std::vector<ad::TensorRef>&)> build;

  double value(const Params& p) const {
    ad::Tape<double> tape;
    return tape.value(loss(tape, p))[0];
  }

  Params gradient(const Params& p) const {
    ad::Tape<double> tape;
    ad::TensorRef l = loss(tape, p, &leaves_);
    tape.backward(l);
    Params g;
    for (size_t i = 0; i < p.size(); ++i) {
      const auto gi = tape.grad(leaves_[i]);
      g.emplace_back(gi.empty() ? std::vector<double>(p[i].size(), 0.0)
                                : std::vector<double>(gi.begin(), gi.end()));
    }
    return g;
  }

  double run_check(GradCheckSummary& summary, const std::string& name, double tol,
                   Params params, uint64_t seed, double eps = 1e-6) const {
    const ad::GradCheckReport rep = ad::grad_check(
        [this](const Params& p) { return value(p); },
        [this](const Params& p) { return gradient(p); }, std::move(params), eps, 64, seed);
    summary.entries.push_back({name, rep.max_rel_err, tol});
    return rep.max_rel_err;
  }

 private:
  mutable std::vector<ad::TensorRef> leaves_;

  ad::TensorRef loss(ad::Tape<double>& tape, const Params& p,
                     std::vector<ad::TensorRef>* out_leaves = nullptr) const {
    std::vector<ad::TensorRef> leaves;
    for (size_t i = 0; i < p.size(); ++i)
      leaves.push_back(tape.leaf(p[i].data(), shapes[i].first, shapes[i].second, true));
    if (out_leaves) *out_leaves = leaves;
    return build(tape, leaves);
  }
};

Params random_params(const std::vector<std::pair<int, int>>& shapes, Rng& rng, double scale,
                     double offset = 0.0) {
  Params p;
  for (const auto& [r, c] : shapes) {
    std::vector<double> v(static_cast<size_t>(r) * c);
    for (double& x : v) x = offset + scale * rng.normal();
    p.push_back(std::move(v));
  }
  return p;
}

// Fixed random mixing weights turn a tensor into a scalar that is sensitive
// to every coordinate.
ad::TensorRef mix_to_scalar(ad::Tape<double>& tape, ad::TensorRef y, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(static_cast<size_t>(y.rows) * y.cols);
  for (double& x : w) x = rng.normal();
  ad::TensorRef wc = tape.constant(std::move(w), y.rows, y.cols);
  return ad::reduce_sum(tape, ad::mul(tape, y, wc));
}

std::vector<double> random_probs(int rows, int cols, Rng& rng) {
  std::vector<double> q(static_cast<size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r) {
    double sum = 0.0;
    for (int c = 0; c < cols; ++c) {
      q[static_cast<size_t>(r) * cols + c] = rng.uniform(0.01, 1.0);
      sum += q[static_cast<size_t>(r) * cols + c];
    }
    for (int c = 0; c < cols; ++c) q[static_cast<size_t>(r) * cols + c] /= sum;
  }
  return q;
}

}  // namespace

double GradCheckSummary::worst_ratio() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_err / e.tolerance);
  return worst;
}

GradCheckSummary gradcheck_all(uint64_t seed) {
  GradCheckSummary summary;
  Rng rng(seed);
  const double kTol = 1e-5;

  {
    Problem p;
    p.shapes = {{3, 5}, {5, 4}, {1, 4}};
    p.build = [](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::affine(t, L[0], L[1], L[2]), 21);
    };
    p.run_check(summary, "affine", kTol, random_params(p.shapes, rng, 0.8), 101);
  }
  {
    Problem p;
    p.shapes = {{2, 8}};
    p.build = [](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::complex_power(t, L[0]), 22);
    };
    p.run_check(summary, "complex_power", kTol, random_params(p.shapes, rng, 1.0), 102);
  }
  {
    Problem p;
    p.shapes = {{3, 6}};
    p.build = [](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::guarded_log(t, L[0]), 23);
    };
    p.run_check(summary, "guarded_log", kTol, random_params(p.shapes, rng, 0.3, 1.5), 103);
  }
  {
    // The mel layer is an affine with non-negative weights at its own dims.
    // Energies are kept strictly positive so the relu/log chain is smooth at
    // the test point (kink and floor behavior have their own unit tests).
    Problem p;
    p.shapes = {{4, 127}, {127, 64}, {1, 64}};
    p.build = [](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::guarded_log(t, ad::relu(t, ad::affine(t, L[0], L[1], L[2]))),
                           24);
    };
    Params params = random_params(p.shapes, rng, 0.2, 0.5);
    p.run_check(summary, "mel_layer", kTol, std::move(params), 104, 1e-5);
  }
  {
    Problem p;  // single LSTM cell step
    const int H = 6, D = 5;
    p.shapes = {{1, D}, {D, 4 * H}, {H, 4 * H}, {1, 4 * H}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::lstm_seq(t, L[0], L[1], L[2], L[3], 1, 1), 25);
    };
    p.run_check(summary, "lstm_cell", kTol, random_params(p.shapes, rng, 0.5), 105);
  }
  {
    Problem p;  // batched multi-step LSTM (BPTT)
    const int H = 5, D = 4, S = 6, B = 2;
    p.shapes = {{S * B, D}, {D, 4 * H}, {H, 4 * H}, {1, 4 * H}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::lstm_seq(t, L[0], L[1], L[2], L[3], S, B), 26);
    };
    p.run_check(summary, "lstm_sequence", kTol, random_params(p.shapes, rng, 0.5), 106);
  }
  {
    Problem p;  // bidirectional pair with concatenation
    const int H = 4, D = 3, S = 5, B = 2;
    p.shapes = {{S * B, D}, {D, 4 * H}, {H, 4 * H}, {1, 4 * H},
                {D, 4 * H}, {H, 4 * H}, {1, 4 * H}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      ad::TensorRef f = ad::lstm_seq(t, L[0], L[1], L[2], L[3], S, B, false);
      ad::TensorRef b = ad::lstm_seq(t, L[0], L[4], L[5], L[6], S, B, true);
      return mix_to_scalar(t, ad::concat_cols(t, f, b), 27);
    };
    p.run_check(summary, "bilstm", kTol, random_params(p.shapes, rng, 0.5), 107);
  }
  {
    Problem p;  // frequency windowing with edge replication, via an F-LSTM
    const int F = 32, W = 8, stride = 5;
    const int n_win = (F - W + stride - 1) / stride + 1;
    const int H = 4, rows = 3;
    p.shapes = {{rows, F}, {W, 4 * H}, {H, 4 * H}, {1, 4 * H}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      ad::TensorRef win = ad::freq_windows(t, L[0], W, stride, n_win);
      ad::TensorRef h = ad::lstm_seq(t, win, L[1], L[2], L[3], n_win, rows);
      return mix_to_scalar(t, ad::window_concat(t, h, n_win), 28);
    };
    p.run_check(summary, "flstm_windowing", kTol, random_params(p.shapes, rng, 0.5), 108);
  }
  {
    Problem p;  // softmax + cross-entropy and plain softmax
    const int R = 4, K = 10;
    Rng qr(seed ^ 0xabc);
    std::vector<double> q = random_probs(R, K, qr);
    p.shapes = {{R, K}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      ad::TensorRef qc = t.constant(q, R, K);
      ad::TensorRef ce = ad::cross_entropy(t, qc, ad::log_softmax(t, L[0]));
      ad::TensorRef sm = mix_to_scalar(t, ad::softmax(t, L[0]), 29);
      return ad::add(t, ce, sm);
    };
    p.run_check(summary, "softmax_xent", kTol, random_params(p.shapes, rng, 1.5), 109);
  }
  {
    Problem p;  // distillation loss at T = 2 over a dense top-k support
    const int R = 3, K = 12;
    Rng qr(seed ^ 0xdef);
    std::vector<double> q = random_probs(R, K, qr);
    p.shapes = {{R, K}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      ad::TensorRef qc = t.constant(q, R, K);
      return distill_loss(t, L[0], qc, 2.0);
    };
    p.run_check(summary, "distill_loss", kTol, random_params(p.shapes, rng, 1.0), 110);
  }
  {
    Problem p;  // spatial filtering (complex pair arithmetic)
    const int looks = 3, bins = 4, ch = 2, T = 2;
    p.shapes = {{T, bins * ch * 2}, {1, looks * bins * ch * 2}};
    p.build = [=](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      return mix_to_scalar(t, ad::spatial_filter(t, L[0], L[1], looks, bins, ch), 30);
    };
    p.run_check(summary, "spatial_filter", kTol, random_params(p.shapes, rng, 0.7), 111);
  }
  {
    // Full student front-end + one LSTM layer + classifier, desk dimensions.
    // Combination and mel weights are positive so every mel energy sits well
    // above zero; finite differences need a smooth neighborhood and the
    // relu -> log chain is non-differentiable at zero energy.
    ModelConfig cfg = ModelConfig::desk();
    cfg.lstm_layers = 1;
    StudentModel model = StudentModel::build(cfg);
    Rng ir(seed ^ 0x777);
    init_random(model, ir);
    {
      // Scales chosen so mel energies land near 1 (log features near 0):
      // keeps the LSTM gates unsaturated, away from degenerate gradients
      // that finite differences cannot resolve.
      Rng cr(seed ^ 0x555);
      for (float& v : model.params.find("comb.W").v)
        v = static_cast<float>(0.0005 + std::abs(0.0005 * cr.normal()));
      for (float& v : model.params.find("mel.W").v)
        v = static_cast<float>(0.002 + std::abs(0.002 * cr.normal()));
      for (float& v : model.params.find("comb.b").v)
        v = static_cast<float>(0.01 * cr.normal());
      for (float& v : model.params.find("mel.b").v) v = static_cast<float>(0.01 * cr.normal());
    }
    ParamSet<double> params = model.params.cast<double>();
    const int T = 4;
    Rng xr(seed ^ 0x888);
    std::vector<double> x(static_cast<size_t>(T) * cfg.spatial_input_dim());
    for (double& v : x) v = xr.normal();
    Rng qr(seed ^ 0x999);
    std::vector<double> q = random_probs(T, cfg.n_classes, qr);

    Problem p;
    for (const auto& t : params.tensors) p.shapes.push_back({t.rows, t.cols});
    p.build = [&, x, q](ad::Tape<double>& t, const std::vector<ad::TensorRef>& L) {
      ad::TensorRef xc = t.constant(x, T, cfg.spatial_input_dim());
      // Assemble the network from the ordered leaves.
      size_t i = 0;
      auto next = [&]() { return L[i++]; };
      ad::TensorRef spatial = next(), combW = next(), combB = next(), melW = next(),
                    melB = next(), wx = next(), wh = next(), b = next(), outW = next(),
                    outB = next();
      ad::TensorRef beams =
          ad::spatial_filter(t, xc, spatial, cfg.n_looks, cfg.n_bins, cfg.n_channels);
      ad::TensorRef power = ad::complex_power(t, beams);
      ad::TensorRef comb = ad::affine(t, power, combW, combB);
      ad::TensorRef mel = ad::affine(t, comb, melW, melB);
      ad::TensorRef feat = ad::guarded_log(t, ad::relu(t, mel));
      ad::TensorRef h = ad::lstm_seq(t, feat, wx, wh, b, T, 1);
      ad::TensorRef logits = ad::affine(t, h, outW, outB);
      ad::TensorRef qc = t.constant(q, T, cfg.n_classes);
      return ad::cross_entropy(t, qc, ad::log_softmax(t, logits));
    };
    Params theta;
    for (const auto& t : params.tensors) theta.push_back(t.v);
    p.run_check(summary, "student_frontend_lstm", 1e-4, std::move(theta), 112, 1e-5);
  }
  return summary;
}

double dsp_equivalence_max_dev(int n_utts, uint64_t seed) {
  const AudioConfig audio;
  const ArrayGeometry geom = ArrayGeometry::circular_7ch();
  const auto pair = opposite_pair(geom);
  ArrayGeometry pair_geom;
  pair_geom.name = "pair";
  pair_geom.mics = {geom.mics[pair.first], geom.mics[pair.second]};
  const BeamformerBank bank2 = design_bank(pair_geom, 12, audio);
  const MelFilterbank mel = make_mel_filterbank(audio, 64);

  ModelConfig cfg = ModelConfig::desk();
  StudentModel model = StudentModel::build(cfg);
  Rng ir(seed);
  init_random(model, ir);
  init_dsp(model, bank2, mel, InitVariant::kDspInit, ir);
  // Look-selection combination: output j = look-0 power bin j.
  NamedTensor<float>& comb = model.params.find("comb.W");
  std::fill(comb.v.begin(), comb.v.end(), 0.f);
  for (int j = 0; j < cfg.comb_dim; ++j)
    comb.v[static_cast<size_t>(j) * cfg.comb_dim + j] = 1.f;
  std::fill(model.params.find("comb.b").v.begin(), model.params.find("comb.b").v.end(), 0.f);
  const ParamSet<double> params = model.params.cast<double>();

  // Synthetic utterances through the shared scene machinery.
  const sim::SynthLabelSpec labels = sim::SynthLabelSpec::default_spec();
  std::vector<ComplexSpectrogram> specs;
  for (int i = 0; i < n_utts; ++i) {
    Rng rng(Rng::derive(seed, "dsp-equiv", i));
    sim::SceneConfig scene;
    scene.geometry = geom;
    scene.snr_db = rng.uniform(5.0, 25.0);
    const sim::LabeledSource src = synth_source(labels, 1.0, rng, audio);
    const MultiChannelAudio mc =
        sim::propagate(src.waveform, geom, rng.uniform(0.0, 360.0), audio.sample_rate_hz);
    const sim::NoisyMix mix = sim::add_noise(mc, scene, rng);
    specs.push_back(stft_multichannel(mix.mixed, audio));
  }
  const GmvStats gmv = gmv_fit(specs);

  double max_dev = 0.0;
  for (auto& spec : specs) {
    gmv_apply(spec, gmv);
    // Model route, in wide precision.
    std::vector<double> x(static_cast<size_t>(spec.frames) * cfg.spatial_input_dim());
    const int chans[2] = {pair.first, pair.second};
    for (int f = 0; f < spec.frames; ++f)
      for (int b = 0; b < cfg.n_bins; ++b)
        for (int c = 0; c < 2; ++c) {
          const std::complex<double>& z = spec.at(f, b, chans[c]);
          x[(static_cast<size_t>(f) * cfg.n_bins + b) * 4 + c * 2] = z.real();
          x[(static_cast<size_t>(f) * cfg.n_bins + b) * 4 + c * 2 + 1] = z.imag();
        }
    ad::Tape<double> tape;
    ParamBinder<double> binder(tape, params, false);
    ad::TensorRef xc = tape.leaf(x.data(), spec.frames, cfg.spatial_input_dim(), false);
    ad::TensorRef y = frontend_forward(tape, binder, cfg, xc);
    const auto out = tape.value(y);

    // Offline route: beamform the selected pair, power, mel, log.
    ComplexSpectrogram pair_spec;
    pair_spec.frames = spec.frames;
    pair_spec.bins = spec.bins;
    pair_spec.channels = 2;
    pair_spec.values.resize(static_cast<size_t>(spec.frames) * spec.bins * 2);
    for (int f = 0; f < spec.frames; ++f)
      for (int b = 0; b < spec.bins; ++b)
        for (int c = 0; c < 2; ++c) pair_spec.at(f, b, c) = spec.at(f, b, chans[c]);
    const ComplexSpectrogram beam = apply_beamformer(pair_spec, bank2.weights_for(0));
    const RowMatXd ref = lfbe(power_spectrum(beam, 0), mel);

    for (int f = 0; f < spec.frames; ++f)
      for (int m = 0; m < cfg.n_mels; ++m)
        max_dev = std::max(max_dev,
                           std::abs(out[static_cast<size_t>(f) * cfg.n_mels + m] - ref(f, m)));
  }
  return max_dev;
}

}  // namespace beamkd::verify

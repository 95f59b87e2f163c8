#include "musefuse/models.hpp"

#include <algorithm>
#include <cstdlib>
#include <iomanip>
#include <sstream>
#include <tuple>

namespace musefuse {

std::string_view to_string(Modality m) {
  switch (m) {
    case Modality::Emg: return "emg";
    case Modality::Us: return "us";
    case Modality::Fusion: return "fusion";
  }
  return "?";
}

Modality parse_modality(std::string_view s) {
  if (s == "emg") return Modality::Emg;
  if (s == "us") return Modality::Us;
  if (s == "fusion") return Modality::Fusion;
  throw Error(ErrorCode::ConfigInvalid, "unknown modality '" + std::string(s) + "'");
}

ModelConfig ModelConfig::emg_default() {
  ModelConfig c;
  c.modality = Modality::Emg;
  c.encoder_widths = {4, 4};
  c.residual_width = 4;
  c.decoder_widths = {{4, 4}, {4, 4}};
  c.mlp_hidden = {178, 122};
  c.kernel = {3, 2};
  c.pools = {PoolSize{10, 2}, PoolSize{2, 2}};
  return c;
}

ModelConfig ModelConfig::us_default() {
  ModelConfig c;
  c.modality = Modality::Us;
  c.encoder_widths = {10, 10};
  c.residual_width = 0;
  c.decoder_widths = {{10, 10}, {10, 10}};
  c.mlp_hidden = {248, 248};
  c.kernel = {3, 1};
  c.pools = {PoolSize{4, 1}, PoolSize{4, 1}};
  return c;
}

namespace {

void check(bool ok, const std::string& what) {
  if (!ok) throw Error(ErrorCode::ConfigInvalid, what);
}

struct InputGeometry {
  nn::Index h, w;
};

InputGeometry input_geometry(Modality m) {
  return m == Modality::Emg ? InputGeometry{kWindowSamples, kEmgChannels} : InputGeometry{kEchoLength, kTransducers};
}

}  // namespace

void ModelConfig::validate() const {
  const std::string tag(to_string(modality));
  check(modality != Modality::Fusion, "a single-modality config cannot have modality fusion");
  for (int w : encoder_widths) check(w > 0, tag + ": encoder widths must be positive");
  for (int w : decoder_widths.hand) check(w > 0, tag + ": hand decoder widths must be positive");
  for (int w : decoder_widths.wrist) check(w > 0, tag + ": wrist decoder widths must be positive");
  check(mlp_hidden.hand > 0 && mlp_hidden.wrist > 0, tag + ": MLP hidden sizes must be positive");
  check(dropout >= 0.0 && dropout < 1.0, tag + ": dropout must be in [0, 1)");
  if (modality == Modality::Emg) {
    check(kernel == PoolSize{3, 2}, "emg: kernel must be 3x2");
    check(pools[0] == PoolSize{10, 2} && pools[1] == PoolSize{2, 2}, "emg: pools must be 10x2 then 2x2");
    check(residual_width == 0 || residual_width == encoder_widths[1],
          "emg: residual width must equal the second encoder width");
  } else {
    check(kernel == PoolSize{3, 1}, "us: kernel must be 3x1");
    check(pools[0] == PoolSize{4, 1} && pools[1] == PoolSize{4, 1}, "us: pools must be 4x1 then 4x1");
    check(residual_width == 0, "us: no residual block");
  }
  const auto g = input_geometry(modality);
  check(g.h % (pools[0].h * pools[1].h) == 0 && g.w % (pools[0].w * pools[1].w) == 0,
        tag + ": pools must divide the input");
}

FusionConfig FusionConfig::defaults() {
  FusionConfig f;
  f.head_hidden = {182, 240};
  return f;
}

void FusionConfig::validate() const {
  check(emg.modality == Modality::Emg, "fusion: first trunk must be emg");
  check(us.modality == Modality::Us, "fusion: second trunk must be us");
  emg.validate();
  us.validate();
  check(head_hidden.hand > 0 && head_hidden.wrist > 0, "fusion: head widths must be positive");
  check(dropout >= 0.0 && dropout < 1.0, "fusion: dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// closed-form counts

namespace {

long long conv_params(long long k, long long cin, long long cout, CountConvention conv) {
  return k * cin * cout + cout + (conv == CountConvention::WithBatchNormAffine ? 2 * cout : 0);
}

long long mlp_params(long long f, long long h, long long o) { return f * h + h + h * o + o; }

long long feature_length(const ModelConfig& c, int last_width) { return input_geometry(c.modality).w * last_width; }

}  // namespace

long long count_trunk_params(const ModelConfig& c, CountConvention conv) {
  const long long k = c.kernel.h * c.kernel.w;
  long long n = conv_params(k, 1, c.encoder_widths[0], conv) + conv_params(k, c.encoder_widths[0], c.encoder_widths[1], conv);
  if (c.residual_width > 0) n += 3 * conv_params(k, c.residual_width, c.residual_width, conv);
  for (const auto& d : {c.decoder_widths.hand, c.decoder_widths.wrist}) {
    n += conv_params(k, c.encoder_widths[1], d[0], conv) + conv_params(k, d[0], d[1], conv);
  }
  return n;
}

long long count_params(const ModelConfig& c, CountConvention conv) {
  return count_trunk_params(c, conv) + mlp_params(feature_length(c, c.decoder_widths.hand[1]), c.mlp_hidden.hand, kHandDofs) +
         mlp_params(feature_length(c, c.decoder_widths.wrist[1]), c.mlp_hidden.wrist, kWristDofs);
}

long long count_params(const FusionConfig& f, CountConvention conv) {
  const long long fh = feature_length(f.emg, f.emg.decoder_widths.hand[1]) + feature_length(f.us, f.us.decoder_widths.hand[1]);
  const long long fw =
      feature_length(f.emg, f.emg.decoder_widths.wrist[1]) + feature_length(f.us, f.us.decoder_widths.wrist[1]);
  return count_trunk_params(f.emg, conv) + count_trunk_params(f.us, conv) + mlp_params(fh, f.head_hidden.hand, kHandDofs) +
         mlp_params(fw, f.head_hidden.wrist, kWristDofs);
}

namespace {

long long trunk_macs(const ModelConfig& c) {
  const auto g = input_geometry(c.modality);
  const long long k = c.kernel.h * c.kernel.w;
  const long long p0 = g.h * g.w;
  const long long p1 = p0 / (c.pools[0].h * c.pools[0].w);
  const long long p2 = p1 / (c.pools[1].h * c.pools[1].w);
  long long n = k * c.encoder_widths[0] * p0 + k * c.encoder_widths[0] * c.encoder_widths[1] * p1;
  if (c.residual_width > 0) n += 3 * k * c.residual_width * c.residual_width * p2;
  for (const auto& d : {c.decoder_widths.hand, c.decoder_widths.wrist}) {
    n += k * c.encoder_widths[1] * d[0] * p2 + k * d[0] * d[1] * p1;
  }
  return n;
}

long long mlp_macs(long long f, long long h, long long o) { return f * h + h * o; }

}  // namespace

long long forward_macs(const ModelConfig& c) {
  return trunk_macs(c) + mlp_macs(feature_length(c, c.decoder_widths.hand[1]), c.mlp_hidden.hand, kHandDofs) +
         mlp_macs(feature_length(c, c.decoder_widths.wrist[1]), c.mlp_hidden.wrist, kWristDofs);
}

long long forward_macs(const FusionConfig& f) {
  const long long fh = feature_length(f.emg, f.emg.decoder_widths.hand[1]) + feature_length(f.us, f.us.decoder_widths.hand[1]);
  const long long fw =
      feature_length(f.emg, f.emg.decoder_widths.wrist[1]) + feature_length(f.us, f.us.decoder_widths.wrist[1]);
  return trunk_macs(f.emg) + trunk_macs(f.us) + mlp_macs(fh, f.head_hidden.hand, kHandDofs) +
         mlp_macs(fw, f.head_hidden.wrist, kWristDofs);
}

std::vector<WidthCandidate> search_widths(Modality m, long long target, CountConvention conv,
                                          const WidthSearchSpace& space) {
  if (m == Modality::Fusion) throw Error(ErrorCode::ConfigInvalid, "search_widths: use search_fusion_heads for fusion");
  const ModelConfig base = m == Modality::Emg ? ModelConfig::emg_default() : ModelConfig::us_default();
  std::vector<WidthCandidate> out;
  for (int c1 = space.min_width; c1 <= space.max_width; ++c1) {
    for (int c2 = c1; c2 <= std::min(2 * c1, space.max_width); ++c2) {
      ModelConfig c = base;
      c.encoder_widths = {c1, c2};
      c.residual_width = m == Modality::Emg ? c2 : 0;
      c.decoder_widths = {{c2, c1}, {c2, c1}};
      const long long trunk = count_trunk_params(c, conv);
      const long long f = feature_length(c, c1);
      for (int h = space.min_hidden; h <= space.max_hidden; ++h) {
        const long long rest = target - trunk - mlp_params(f, h, kHandDofs) - kWristDofs;
        const long long per = f + 1 + kWristDofs;
        if (rest <= 0 || rest % per != 0) continue;
        const long long hw = rest / per;
        if (hw < 4 || hw > h) continue;
        c.mlp_hidden = {h, static_cast<int>(hw)};
        out.push_back({c, count_params(c, conv), forward_macs(c)});
      }
    }
  }
  std::sort(out.begin(), out.end(), [](const WidthCandidate& a, const WidthCandidate& b) {
    const auto key = [](const WidthCandidate& x) {
      return std::make_tuple(x.macs, std::abs(x.config.mlp_hidden.hand - 2 * x.config.mlp_hidden.wrist),
                             x.config.encoder_widths[0], x.config.encoder_widths[1], x.config.mlp_hidden.hand);
    };
    return key(a) < key(b);
  });
  return out;
}

std::vector<TaskPair<int>> search_fusion_heads(const ModelConfig& emg, const ModelConfig& us, long long target,
                                               CountConvention conv, const WidthSearchSpace& space) {
  const long long trunk = count_trunk_params(emg, conv) + count_trunk_params(us, conv);
  const long long fh = feature_length(emg, emg.decoder_widths.hand[1]) + feature_length(us, us.decoder_widths.hand[1]);
  const long long fw = feature_length(emg, emg.decoder_widths.wrist[1]) + feature_length(us, us.decoder_widths.wrist[1]);
  std::vector<TaskPair<int>> out;
  for (int h = space.min_hidden; h <= space.max_hidden; ++h) {
    const long long rest = target - trunk - mlp_params(fh, h, kHandDofs) - kWristDofs;
    const long long per = fw + 1 + kWristDofs;
    if (rest <= 0 || rest % per != 0) continue;
    const long long hw = rest / per;
    if (hw < 4 || hw > space.max_hidden) continue;
    out.push_back({h, static_cast<int>(hw)});
  }
  std::sort(out.begin(), out.end(), [](const TaskPair<int>& a, const TaskPair<int>& b) {
    return std::make_pair(std::max(a.hand, a.wrist), a.hand) < std::make_pair(std::max(b.hand, b.wrist), b.hand);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Model

template <typename S>
nn::Tensor<S> Model<S>::add_param(const std::string& name, nn::Shape shape, bool bn_affine) {
  auto t = nn::Tensor<S>::zeros(std::move(shape), true);
  params_.push_back({name, t, bn_affine});
  return t;
}

template <typename S>
nn::Tensor<S> Model<S>::add_buffer(const std::string& name, nn::Shape shape, S init) {
  auto t = nn::Tensor<S>::full(std::move(shape), init, false);
  buffers_.push_back({name, t, false});
  return t;
}

template <typename S>
typename Model<S>::ConvBlock Model<S>::make_block(const std::string& name, int cin, int cout, PoolSize k) {
  ConvBlock b;
  b.conv.w = add_param(name + ".conv.weight", {cout, cin, k.h, k.w}, false);
  b.conv.b = add_param(name + ".conv.bias", {cout}, false);
  b.bn.gamma = add_param(name + ".bn.weight", {cout}, true);
  b.bn.gamma.value().setOnes();
  b.bn.beta = add_param(name + ".bn.bias", {cout}, true);
  b.bn.running_mean = add_buffer(name + ".bn.running_mean", {cout}, S(0));
  b.bn.running_var = add_buffer(name + ".bn.running_var", {cout}, S(1));
  fan_in_.emplace_back(b.conv.w, cin * k.h * k.w);
  return b;
}

template <typename S>
typename Model<S>::Linear Model<S>::make_linear(const std::string& name, int in, int out) {
  Linear l;
  l.w = add_param(name + ".weight", {out, in}, false);
  l.b = add_param(name + ".bias", {out}, false);
  fan_in_.emplace_back(l.w, in);
  return l;
}

template <typename S>
typename Model<S>::Trunk Model<S>::make_trunk(const std::string& p, const ModelConfig& c) {
  Trunk t;
  t.cfg = c;
  t.encoder[0] = make_block(p + ".enc1", 1, c.encoder_widths[0], c.kernel);
  t.encoder[1] = make_block(p + ".enc2", c.encoder_widths[0], c.encoder_widths[1], c.kernel);
  if (c.residual_width > 0) {
    for (int i = 0; i < 3; ++i) {
      t.residual.push_back(make_block(p + ".res" + std::to_string(i + 1), c.residual_width, c.residual_width, c.kernel));
    }
  }
  t.decoder.hand[0] = make_block(p + ".hand.dec1", c.encoder_widths[1], c.decoder_widths.hand[0], c.kernel);
  t.decoder.hand[1] = make_block(p + ".hand.dec2", c.decoder_widths.hand[0], c.decoder_widths.hand[1], c.kernel);
  t.decoder.wrist[0] = make_block(p + ".wrist.dec1", c.encoder_widths[1], c.decoder_widths.wrist[0], c.kernel);
  t.decoder.wrist[1] = make_block(p + ".wrist.dec2", c.decoder_widths.wrist[0], c.decoder_widths.wrist[1], c.kernel);
  return t;
}

// He-uniform weights, zero biases; one RNG stream per weight tensor.
template <typename S>
void Model<S>::init_weights(std::uint64_t seed) {
  const CounterRng root(seed);
  for (std::size_t i = 0; i < fan_in_.size(); ++i) {
    auto& [w, fan] = fan_in_[i];
    CounterRng rng = root.fork(i);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan));
    for (nn::Index j = 0; j < w.numel(); ++j) w.value()[j] = static_cast<S>(rng.uniform(-bound, bound));
  }
  fan_in_.clear();
}

template <typename S>
Model<S> build_emg_net(const ModelConfig& cfg, std::uint64_t seed) {
  check(cfg.modality == Modality::Emg, "build_emg_net needs an emg config");
  cfg.validate();
  Model<S> m;
  m.modality_ = Modality::Emg;
  m.emg_cfg_ = cfg;
  m.emg_trunk_ = m.make_trunk("emg", cfg);
  const int fh = kEmgChannels * cfg.decoder_widths.hand[1], fw = kEmgChannels * cfg.decoder_widths.wrist[1];
  m.heads_.hand = {m.make_linear("head.hand.fc1", fh, cfg.mlp_hidden.hand),
                   m.make_linear("head.hand.fc2", cfg.mlp_hidden.hand, kHandDofs)};
  m.heads_.wrist = {m.make_linear("head.wrist.fc1", fw, cfg.mlp_hidden.wrist),
                    m.make_linear("head.wrist.fc2", cfg.mlp_hidden.wrist, kWristDofs)};
  m.init_weights(seed);
  return m;
}

template <typename S>
Model<S> build_us_net(const ModelConfig& cfg, std::uint64_t seed) {
  check(cfg.modality == Modality::Us, "build_us_net needs a us config");
  cfg.validate();
  Model<S> m;
  m.modality_ = Modality::Us;
  m.us_cfg_ = cfg;
  m.us_trunk_ = m.make_trunk("us", cfg);
  const int fh = kTransducers * cfg.decoder_widths.hand[1], fw = kTransducers * cfg.decoder_widths.wrist[1];
  m.heads_.hand = {m.make_linear("head.hand.fc1", fh, cfg.mlp_hidden.hand),
                   m.make_linear("head.hand.fc2", cfg.mlp_hidden.hand, kHandDofs)};
  m.heads_.wrist = {m.make_linear("head.wrist.fc1", fw, cfg.mlp_hidden.wrist),
                    m.make_linear("head.wrist.fc2", cfg.mlp_hidden.wrist, kWristDofs)};
  m.init_weights(seed);
  return m;
}

template <typename S>
Model<S> build_fusion_net(const FusionConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<S> m;
  m.modality_ = Modality::Fusion;
  m.emg_cfg_ = cfg.emg;
  m.us_cfg_ = cfg.us;
  m.head_hidden_ = cfg.head_hidden;
  m.emg_trunk_ = m.make_trunk("emg", cfg.emg);
  m.us_trunk_ = m.make_trunk("us", cfg.us);
  const int fh = kEmgChannels * cfg.emg.decoder_widths.hand[1] + kTransducers * cfg.us.decoder_widths.hand[1];
  const int fw = kEmgChannels * cfg.emg.decoder_widths.wrist[1] + kTransducers * cfg.us.decoder_widths.wrist[1];
  m.heads_.hand = {m.make_linear("head.hand.fc1", fh, cfg.head_hidden.hand),
                   m.make_linear("head.hand.fc2", cfg.head_hidden.hand, kHandDofs)};
  m.heads_.wrist = {m.make_linear("head.wrist.fc1", fw, cfg.head_hidden.wrist),
                    m.make_linear("head.wrist.fc2", cfg.head_hidden.wrist, kWristDofs)};
  m.init_weights(seed);
  return m;
}

template <typename S>
nn::Tensor<S> Model<S>::run_block(ConvBlock& b, const nn::Tensor<S>& x, double rate, nn::Mode mode, CounterRng& rng) {
  auto y = nn::conv2d(x, b.conv.w, b.conv.b);
  y = nn::batch_norm2d(y, b.bn.gamma, b.bn.beta, b.bn.running_mean, b.bn.running_var, mode);
  y = nn::relu(y);
  return nn::dropout(y, rate, mode, rng);
}

template <typename S>
TaskPair<nn::Tensor<S>> Model<S>::run_trunk(Trunk& t, const nn::Tensor<S>& x, nn::Mode mode, CounterRng& rng,
                                            ShapeTrace* trace, const std::string& p) {
  const auto& c = t.cfg;
  const auto note = [&](const std::string& name, const nn::Tensor<S>& v) {
    if (trace) trace->emplace_back(p + "." + name, v.shape());
  };
  auto y = nn::max_pool2d(run_block(t.encoder[0], x, c.dropout, mode, rng), c.pools[0].h, c.pools[0].w);
  note("enc1", y);
  y = nn::max_pool2d(run_block(t.encoder[1], y, c.dropout, mode, rng), c.pools[1].h, c.pools[1].w);
  note("enc2", y);
  if (!t.residual.empty()) {
    auto r = y;
    for (auto& b : t.residual) r = run_block(b, r, c.dropout, mode, rng);
    y = nn::add(y, r);
    note("res", y);
  }
  TaskPair<nn::Tensor<S>> out;
  const auto branch = [&](std::array<ConvBlock, 2>& dec, const std::string& task) {
    auto z = nn::upsample_nearest(run_block(dec[0], y, c.dropout, mode, rng), c.pools[1].h, c.pools[1].w);
    note(task + ".dec1", z);
    z = run_block(dec[1], z, c.dropout, mode, rng);
    if (trace) {
      z = nn::upsample_nearest(z, c.pools[0].h, c.pools[0].w);
      note(task + ".dec2", z);
      z = nn::max_pool2d(z, z.dim(2), nn::Index{1});
    } else {
      // The time max of a nearest-upsampled map is the time max of the map
      // itself, so the full-resolution tensor is skipped; only the width
      // replication remains.
      z = nn::upsample_nearest(nn::max_pool2d(z, z.dim(2), nn::Index{1}), nn::Index{1}, c.pools[0].w);
    }
    note(task + ".pool", z);
    z = nn::flatten(z);
    note(task + ".features", z);
    return z;
  };
  out.hand = branch(t.decoder.hand, "hand");
  out.wrist = branch(t.decoder.wrist, "wrist");
  return out;
}

template <typename S>
nn::Tensor<S> Model<S>::run_head(Head& h, const nn::Tensor<S>& f) {
  return nn::linear(nn::relu(nn::linear(f, h.l1.w, h.l1.b)), h.l2.w, h.l2.b);
}

template <typename S>
TaskOutputs<S> Model<S>::forward(const ModelInputs<S>& in, nn::Mode mode, CounterRng& rng, ShapeTrace* trace) {
  const auto expect = [](const nn::Tensor<S>& x, nn::Index h, nn::Index w, const char* what) {
    if (x.ndim() != 4 || x.dim(1) != 1 || x.dim(2) != h || x.dim(3) != w) {
      throw Error(ErrorCode::ShapeMismatch, std::string(what) + " input must be N x 1 x " + std::to_string(h) + " x " +
                                                std::to_string(w) + ", got " + nn::to_string(x.shape()));
    }
  };
  TaskPair<nn::Tensor<S>> feats;
  if (modality_ == Modality::Emg || modality_ == Modality::Fusion) {
    expect(in.emg, kWindowSamples, kEmgChannels, "emg");
    feats = run_trunk(*emg_trunk_, in.emg, mode, rng, trace, "emg");
  }
  if (modality_ == Modality::Us || modality_ == Modality::Fusion) {
    expect(in.us, kEchoLength, kTransducers, "us");
    auto u = run_trunk(*us_trunk_, in.us, mode, rng, trace, "us");
    if (modality_ == Modality::Fusion) {
      if (in.emg.dim(0) != in.us.dim(0)) throw Error(ErrorCode::ShapeMismatch, "emg and us batch sizes differ");
      feats.hand = nn::concat_features(feats.hand, u.hand);
      feats.wrist = nn::concat_features(feats.wrist, u.wrist);
      if (trace) {
        trace->emplace_back("fused.hand", feats.hand.shape());
        trace->emplace_back("fused.wrist", feats.wrist.shape());
      }
    } else {
      feats = u;
    }
  }
  TaskOutputs<S> out{run_head(heads_.hand, feats.hand), run_head(heads_.wrist, feats.wrist)};
  if (trace) {
    trace->emplace_back("out.hand", out.hand.shape());
    trace->emplace_back("out.wrist", out.wrist.shape());
  }
  return out;
}

template <typename S>
std::vector<nn::NamedTensor> Model<S>::state() const {
  std::vector<nn::NamedTensor> out;
  for (const auto& p : params_) out.push_back(nn::to_named(p.name, p.tensor));
  for (const auto& b : buffers_) out.push_back(nn::to_named(b.name, b.tensor));
  return out;
}

template <typename S>
void Model<S>::load_state(const std::vector<nn::NamedTensor>& state) {
  if (state.size() != params_.size() + buffers_.size()) {
    throw Error(ErrorCode::ShapeMismatch, "checkpoint holds " + std::to_string(state.size()) + " tensors, model has " +
                                              std::to_string(params_.size() + buffers_.size()));
  }
  std::size_t i = 0;
  for (auto* table : {&params_, &buffers_}) {
    for (auto& p : *table) {
      const auto& nt = state[i++];
      if (nt.name != p.name) throw Error(ErrorCode::ShapeMismatch, "checkpoint tensor '" + nt.name + "' where '" + p.name + "' expected");
      nn::assign_from(p.tensor, nt);
    }
  }
}

template <typename S>
std::string model_card(const Model<S>& model) {
  Model<S> m = model;  // shares tensors; eval forward leaves running stats untouched
  ModelInputs<S> in{nn::Tensor<S>::zeros({1, 1, kWindowSamples, kEmgChannels}),
                    nn::Tensor<S>::zeros({1, 1, kEchoLength, kTransducers})};
  ShapeTrace trace;
  CounterRng rng(0);
  {
    nn::NoGradGuard ng;
    m.forward(in, nn::Mode::Eval, rng, &trace);
  }
  std::ostringstream os;
  os << "model: " << to_string(m.modality()) << "\n";
  const auto widths = [&](const char* tag, const ModelConfig& c) {
    os << tag << " encoder widths: " << c.encoder_widths[0] << ", " << c.encoder_widths[1] << "\n";
    if (c.residual_width > 0) os << tag << " residual width: " << c.residual_width << "\n";
    os << tag << " hand decoder widths: " << c.decoder_widths.hand[0] << ", " << c.decoder_widths.hand[1] << "\n";
    os << tag << " wrist decoder widths: " << c.decoder_widths.wrist[0] << ", " << c.decoder_widths.wrist[1] << "\n";
    os << tag << " kernel: " << c.kernel.h << "x" << c.kernel.w << ", pools: " << c.pools[0].h << "x" << c.pools[0].w
       << ", " << c.pools[1].h << "x" << c.pools[1].w << ", dropout: " << c.dropout << "\n";
  };
  long long target = 0;
  switch (m.modality()) {
    case Modality::Emg:
      widths("emg", m.emg_config());
      os << "mlp hidden (hand, wrist): " << m.emg_config().mlp_hidden.hand << ", " << m.emg_config().mlp_hidden.wrist << "\n";
      target = kTargetParamsEmg;
      break;
    case Modality::Us:
      widths("us", m.us_config());
      os << "mlp hidden (hand, wrist): " << m.us_config().mlp_hidden.hand << ", " << m.us_config().mlp_hidden.wrist << "\n";
      target = kTargetParamsUs;
      break;
    case Modality::Fusion:
      widths("emg", m.emg_config());
      widths("us", m.us_config());
      os << "fusion head hidden (hand, wrist): " << m.fusion_head_hidden().hand << ", " << m.fusion_head_hidden().wrist
         << "\n";
      target = kTargetParamsFusion;
      break;
  }
  os << "\nlayer output shapes (batch 1):\n";
  for (const auto& [name, shape] : trace) os << "  " << std::left << std::setw(22) << name << nn::to_string(shape) << "\n";
  os << "\nparameters:\n";
  for (const auto& p : m.parameters()) {
    os << "  " << std::left << std::setw(28) << p.name << std::setw(16) << nn::to_string(p.tensor.shape())
       << p.tensor.numel() << "\n";
  }
  const long long with_bn = param_count(m, CountConvention::WithBatchNormAffine);
  const long long without_bn = param_count(m, CountConvention::WithoutBatchNormAffine);
  os << "\ntrainable parameters (with BN affine): " << with_bn << "\n";
  os << "trainable parameters (without BN affine): " << without_bn << "\n";
  os << "reference total: " << target << " (difference " << with_bn - target << ")\n";
  os << "size at float32: " << with_bn * 4 << " bytes (" << std::fixed << std::setprecision(1) << with_bn * 4 / 1024.0
     << " KiB)\n";
  return os.str();
}

template <typename S>
Batch<S> make_batch(std::span<const DatasetEntry* const> entries) {
  const auto n = static_cast<nn::Index>(entries.size());
  constexpr nn::Index E = kWindowSamples * kEmgChannels, U = kEchoLength * kTransducers;
  nn::Buffer<S> emg(n * E), us(n * U), hand(n * kHandDofs), wrist(n * kWristDofs);
  for (nn::Index i = 0; i < n; ++i) {
    const auto& e = *entries[static_cast<std::size_t>(i)];
    emg.segment(i * E, E) = Eigen::Map<const Eigen::ArrayXf>(e.emg.data(), E).template cast<S>();
    us.segment(i * U, U) = Eigen::Map<const Eigen::ArrayXf>(e.us.data(), U).template cast<S>();
    hand.segment(i * kHandDofs, kHandDofs) = e.label.head<kHandDofs>().array().template cast<S>();
    wrist.segment(i * kWristDofs, kWristDofs) = e.label.tail<kWristDofs>().array().template cast<S>();
  }
  Batch<S> b;
  b.inputs.emg = nn::Tensor<S>::from({n, 1, kWindowSamples, kEmgChannels}, std::move(emg));
  b.inputs.us = nn::Tensor<S>::from({n, 1, kEchoLength, kTransducers}, std::move(us));
  b.targets.hand = nn::Tensor<S>::from({n, kHandDofs}, std::move(hand));
  b.targets.wrist = nn::Tensor<S>::from({n, kWristDofs}, std::move(wrist));
  return b;
}

template class Model<float>;
template class Model<double>;

#define MUSEFUSE_INSTANTIATE(S)                                                  \
  template Model<S> build_emg_net<S>(const ModelConfig&, std::uint64_t);         \
  template Model<S> build_us_net<S>(const ModelConfig&, std::uint64_t);          \
  template Model<S> build_fusion_net<S>(const FusionConfig&, std::uint64_t);     \
  template std::string model_card<S>(const Model<S>&);                           \
  template Batch<S> make_batch<S>(std::span<const DatasetEntry* const>);

MUSEFUSE_INSTANTIATE(float)
MUSEFUSE_INSTANTIATE(double)

}  // namespace musefuse

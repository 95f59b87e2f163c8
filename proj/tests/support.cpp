#include "support.hpp"

#include <numeric>
#include <random>

namespace musefuse::testing {

namespace {

using nn::Index;
using nn::Shape;

std::string shape_str(std::initializer_list<Index> dims) {
  std::string s;
  for (Index d : dims) s += (s.empty() ? "" : "x") + std::to_string(d);
  return s;
}

Index pick(CounterRng& rng, Index lo, Index hi) { return lo + static_cast<Index>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); }

// Distinct, well separated values so that a finite-difference step never
// changes which element wins a max.
T64 separated_tensor(Shape shape, CounterRng& rng) {
  T64 t = T64::zeros(std::move(shape), true);
  std::vector<Index> perm(static_cast<std::size_t>(t.numel()));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 gen(rng.next_u64());
  std::shuffle(perm.begin(), perm.end(), gen);
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = 0.01 * static_cast<double>(perm[static_cast<std::size_t>(i)]) - 0.5;
  return t;
}

// Values bounded away from zero so ReLU is differentiated off its kink.
T64 off_kink_tensor(Shape shape, CounterRng& rng) {
  T64 t = T64::zeros(std::move(shape), true);
  for (Index i = 0; i < t.numel(); ++i) t.value()[i] = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.05, 1.0);
  return t;
}

T64 vs_target(const T64& y, CounterRng& rng) {
  const T64 target = random_tensor(y.shape(), rng, false);
  return nn::mse_loss(y, target);
}

}  // namespace

std::vector<GradCase> run_gradient_suite(int shapes_per_layer, std::uint64_t seed) {
  std::vector<GradCase> out;
  CounterRng root(seed);
  for (int s = 0; s < shapes_per_layer; ++s) {
    CounterRng rng = root.fork(static_cast<std::uint64_t>(s));
    const std::uint64_t target_seed = rng.next_u64();
    const auto loss_on = [target_seed](const T64& y) {
      CounterRng r(target_seed);
      return vs_target(y, r);
    };

    {
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 3), O = pick(rng, 1, 3), H = pick(rng, 1, 6), W = pick(rng, 1, 5);
      const Index kh = pick(rng, 1, 3), kw = pick(rng, 1, 3);
      std::vector<T64> in = {random_tensor({N, C, H, W}, rng, true), random_tensor({O, C, kh, kw}, rng, true),
                             random_tensor({O}, rng, true)};
      const double e = gradient_check([&](std::vector<T64>& v) { return loss_on(nn::conv2d(v[0], v[1], v[2])); }, in);
      out.push_back({"conv2d", shape_str({N, C, H, W}) + " k" + shape_str({O, C, kh, kw}), e});
    }
    {
      const Index N = pick(rng, 2, 3), C = pick(rng, 1, 3), H = pick(rng, 1, 4), W = pick(rng, 1, 4);
      std::vector<T64> in = {random_tensor({N, C, H, W}, rng, true), random_tensor({C}, rng, true, 0.5, 1.5),
                             random_tensor({C}, rng, true)};
      const double e = gradient_check(
          [&](std::vector<T64>& v) {
            T64 rm = T64::zeros({C}), rv = T64::full({C}, 1.0);
            return loss_on(nn::batch_norm2d(v[0], v[1], v[2], rm, rv, nn::Mode::Train));
          },
          in);
      out.push_back({"batch_norm2d", shape_str({N, C, H, W}), e});
    }
    {
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 3), H = pick(rng, 1, 8), W = pick(rng, 1, 4);
      std::vector<T64> in = {off_kink_tensor({N, C, H, W}, rng)};
      const double e = gradient_check([&](std::vector<T64>& v) { return loss_on(nn::relu(v[0])); }, in);
      out.push_back({"relu", shape_str({N, C, H, W}), e});
    }
    {
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 3), H = pick(rng, 1, 8), W = pick(rng, 1, 4);
      const double rate = rng.uniform(0.05, 0.5);
      const std::uint64_t mask_seed = rng.next_u64();
      std::vector<T64> in = {random_tensor({N, C, H, W}, rng, true)};
      const double e = gradient_check(
          [&](std::vector<T64>& v) {
            CounterRng r(mask_seed);
            return loss_on(nn::dropout(v[0], rate, nn::Mode::Train, r));
          },
          in);
      out.push_back({"dropout", shape_str({N, C, H, W}), e});
    }
    {
      const Index kh = pick(rng, 1, 4), kw = pick(rng, 1, 3);
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 2), H = kh * pick(rng, 1, 3), W = kw * pick(rng, 1, 3);
      std::vector<T64> in = {separated_tensor({N, C, H, W}, rng)};
      const double e = gradient_check([&](std::vector<T64>& v) { return loss_on(nn::max_pool2d(v[0], kh, kw)); }, in);
      out.push_back({"max_pool2d", shape_str({N, C, H, W}) + " by " + shape_str({kh, kw}), e});
    }
    {
      const Index fh = pick(rng, 1, 4), fw = pick(rng, 1, 3);
      const Index N = pick(rng, 1, 2), C = pick(rng, 1, 2), H = pick(rng, 1, 4), W = pick(rng, 1, 3);
      std::vector<T64> in = {random_tensor({N, C, H, W}, rng, true)};
      const double e =
          gradient_check([&](std::vector<T64>& v) { return loss_on(nn::upsample_nearest(v[0], fh, fw)); }, in);
      out.push_back({"upsample_nearest", shape_str({N, C, H, W}) + " by " + shape_str({fh, fw}), e});
    }
    {
      const Index N = pick(rng, 1, 3), C = pick(rng, 1, 3), H = pick(rng, 1, 4), W = pick(rng, 1, 3);
      std::vector<T64> in = {random_tensor({N, C, H, W}, rng, true)};
      const double e = gradient_check([&](std::vector<T64>& v) { return loss_on(nn::flatten(v[0])); }, in);
      out.push_back({"flatten", shape_str({N, C, H, W}), e});
    }
    {
      const Index N = pick(rng, 1, 3), Fa = pick(rng, 1, 6), Fb = pick(rng, 1, 6);
      std::vector<T64> in = {random_tensor({N, Fa}, rng, true), random_tensor({N, Fb}, rng, true)};
      const double e = gradient_check([&](std::vector<T64>& v) { return loss_on(nn::concat_features(v[0], v[1])); }, in);
      out.push_back({"concat_features", shape_str({N, Fa}) + "+" + shape_str({N, Fb}), e});
    }
    {
      const Index N = pick(rng, 1, 4), F = pick(rng, 1, 8), O = pick(rng, 1, 5);
      std::vector<T64> in = {random_tensor({N, F}, rng, true), random_tensor({O, F}, rng, true),
                             random_tensor({O}, rng, true)};
      const double e = gradient_check([&](std::vector<T64>& v) { return loss_on(nn::linear(v[0], v[1], v[2])); }, in);
      out.push_back({"linear", shape_str({N, F}) + " to " + std::to_string(O), e});
    }
    {
      const Index N = pick(rng, 1, 3), F = pick(rng, 1, 8);
      const double k = rng.uniform(-2.0, 2.0);
      std::vector<T64> in = {random_tensor({N, F}, rng, true), random_tensor({N, F}, rng, true)};
      const double e = gradient_check(
          [&](std::vector<T64>& v) { return loss_on(nn::scale(nn::add(v[0], v[1]), k)); }, in);
      out.push_back({"add+scale", shape_str({N, F}), e});
    }
    {
      const Index N = pick(rng, 1, 3), F = pick(rng, 1, 8);
      std::vector<T64> in = {random_tensor({N, F}, rng, true), random_tensor({N, F}, rng, true)};
      const double e = gradient_check([&](std::vector<T64>& v) { return nn::mse_loss(v[0], v[1]); }, in);
      out.push_back({"mse_loss", shape_str({N, F}), e});
    }
  }
  return out;
}

TempDir::TempDir(const std::string& tag) {
  CounterRng rng(std::hash<std::string>{}(tag) ^ static_cast<std::uint64_t>(std::random_device{}()));
  path = std::filesystem::temp_directory_path() / ("musefuse_" + tag + "_" + std::to_string(rng.next_u64() % 1000000007ULL));
  std::filesystem::create_directories(path);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path, ec);
}

}  // namespace musefuse::testing

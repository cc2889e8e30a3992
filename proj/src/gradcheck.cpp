#include "wav2sleep/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "wav2sleep/model.hpp"
#include "wav2sleep/ops.hpp"

namespace wav2sleep {

namespace {

double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-3});
}

}  // namespace

GradientError gradient_error(const std::function<Tensor<double>()>& loss,
                             std::vector<Tensor<double>> inputs, double tolerance, double h) {
  for (auto& x : inputs) x.zero_grad();
  auto base_loss = loss();
  base_loss.backward();
  const double base = base_loss.item();
  GradientError stats;
  for (auto& x : inputs) {
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    auto values = x.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      double plus = 0.0, minus = 0.0;
      {
        NoGradGuard no_grad;
        values[i] = saved + h;
        plus = loss().item();
        values[i] = saved - h;
        minus = loss().item();
      }
      values[i] = saved;
      ++stats.coordinates;
      const double numeric = (plus - minus) / (2.0 * h);
      const double error = relative_error(analytic[i], numeric);
      if (error > tolerance) {
        // A max-pool tie inside (x - h, x + h) spoils the central difference,
        // but the one-sided quotient on the tie-free side still matches.
        const double right = (plus - base) / h;
        const double left = (base - minus) / h;
        const double one_sided = std::min(relative_error(analytic[i], right),
                                          relative_error(analytic[i], left));
        if (one_sided <= 10.0 * tolerance && relative_error(right, left) > 10.0 * tolerance) {
          ++stats.kinks;
          continue;
        }
      }
      stats.max_relative_error = std::max(stats.max_relative_error, error);
    }
  }
  return stats;
}

namespace {

using D = Tensor<double>;

D random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = dist(rng);
  return D::from(std::move(shape), std::move(values), true);
}

// Contracts an arbitrary output with fixed random weights so every output
// coordinate contributes to the scalar being differentiated.
D project(const D& out, const D& weights) { return sum(mul(out, weights)); }

D fixed_weights(const Shape& shape, std::mt19937_64& rng) {
  auto w = random_tensor(shape, rng);
  w.set_requires_grad(false);
  return w;
}

// Identity forward, backward off by a factor of two: the negative control.
D broken_identity(const D& x) {
  auto v = x.values();
  return D::make_result(x.shape(), std::vector<double>(v.begin(), v.end()), {&x},
                        [](detail::Node<double>& self) {
                          auto& g = self.parents[0]->grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * self.grad[i];
                        });
}

struct Case {
  std::string name;
  // Builds inputs and a loss closure for one trial.
  std::function<std::pair<std::vector<D>, std::function<D()>>(std::mt19937_64&)> make;
};

std::vector<Case> primitive_cases(bool inject_fault) {
  std::vector<Case> cases;
  cases.push_back({"conv1d", [](std::mt19937_64& rng) {
    std::uniform_int_distribution<int> pick(1, 3);
    const std::size_t dilation = static_cast<std::size_t>(pick(rng));
    auto x = random_tensor({2, 2, 9}, rng);
    auto w = random_tensor({3, 2, 3}, rng);
    auto b = random_tensor({3}, rng);
    auto r = fixed_weights({2, 3, 9}, rng);
    return std::pair{std::vector<D>{x, w, b},
                     std::function<D()>([=] { return project(conv1d(x, w, b, dilation), r); })};
  }});
  cases.push_back({"maxpool1d", [](std::mt19937_64& rng) {
    auto x = random_tensor({2, 2, 8}, rng);
    auto r = fixed_weights({2, 2, 4}, rng);
    return std::pair{std::vector<D>{x}, std::function<D()>([=] { return project(maxpool1d(x), r); })};
  }});
  cases.push_back({"affine", [](std::mt19937_64& rng) {
    auto x = random_tensor({2, 3, 4}, rng);
    auto w = random_tensor({4, 5}, rng);
    auto b = random_tensor({5}, rng);
    auto r = fixed_weights({2, 3, 5}, rng);
    return std::pair{std::vector<D>{x, w, b},
                     std::function<D()>([=] { return project(affine(x, w, b), r); })};
  }});
  cases.push_back({"gelu", [](std::mt19937_64& rng) {
    auto x = random_tensor({3, 5}, rng, -3.0, 3.0);
    auto r = fixed_weights({3, 5}, rng);
    return std::pair{std::vector<D>{x}, std::function<D()>([=] { return project(gelu(x), r); })};
  }});
  cases.push_back({"instance_norm", [](std::mt19937_64& rng) {
    auto x = random_tensor({2, 3, 6}, rng);
    auto s = random_tensor({3}, rng);
    auto h = random_tensor({3}, rng);
    auto r = fixed_weights({2, 3, 6}, rng);
    return std::pair{std::vector<D>{x, s, h},
                     std::function<D()>([=] { return project(instance_norm(x, s, h), r); })};
  }});
  cases.push_back({"layer_norm", [](std::mt19937_64& rng) {
    auto x = random_tensor({2, 3, 6}, rng);
    auto s = random_tensor({6}, rng);
    auto h = random_tensor({6}, rng);
    auto r = fixed_weights({2, 3, 6}, rng);
    return std::pair{std::vector<D>{x, s, h},
                     std::function<D()>([=] { return project(layer_norm(x, s, h), r); })};
  }});
  cases.push_back({"masked_multi_head_attention", [](std::mt19937_64& rng) {
    const std::size_t N = 2, m = 4, d = 4, heads = 2;
    std::bernoulli_distribution coin(0.6);
    std::vector<std::vector<bool>> keys(N, std::vector<bool>(m));
    for (auto& row : keys) {
      for (std::size_t j = 0; j < m; ++j) row[j] = j == 0 || coin(rng);
    }
    auto mask = AttentionMask::from_keys(keys, m);
    auto x = random_tensor({N, m, d}, rng);
    AttentionParams<double> p{random_tensor({d, d}, rng), random_tensor({d}, rng),
                              random_tensor({d, d}, rng), random_tensor({d}, rng),
                              random_tensor({d, d}, rng), random_tensor({d}, rng),
                              random_tensor({d, d}, rng), random_tensor({d}, rng)};
    auto r = fixed_weights({N, m, d}, rng);
    std::vector<D> inputs{x,
                          p.query_weights, p.query_bias, p.key_weights, p.key_bias,
                          p.value_weights, p.value_bias, p.out_weights, p.out_bias};
    return std::pair{inputs, std::function<D()>([=] {
                       return project(masked_multi_head_attention(x, x, x, heads, mask, p), r);
                     })};
  }});
  cases.push_back({"softmax", [](std::mt19937_64& rng) {
    auto x = random_tensor({3, 4}, rng, -2.0, 2.0);
    auto r = fixed_weights({3, 4}, rng);
    return std::pair{std::vector<D>{x}, std::function<D()>([=] { return project(softmax(x), r); })};
  }});
  cases.push_back({"softmax_cross_entropy", [](std::mt19937_64& rng) {
    auto x = random_tensor({2, 5, 4}, rng, -2.0, 2.0);
    std::uniform_int_distribution<int> label(-1, 3);
    std::vector<int> labels(10);
    for (auto& l : labels) l = label(rng);
    return std::pair{std::vector<D>{x},
                     std::function<D()>([=] { return softmax_cross_entropy(x, labels); })};
  }});
  cases.push_back({"structural", [](std::mt19937_64& rng) {
    // fold_epochs, swap_last_axes, add_row, broadcast_rows, stack/take_token,
    // scatter_rows, reshape, add, scale in one composite.
    auto x = random_tensor({2, 3, 8}, rng);
    auto row = random_tensor({6}, rng);
    auto r = fixed_weights({3, 6}, rng);
    return std::pair{std::vector<D>{x, row}, std::function<D()>([=] {
      auto folded = fold_epochs(x, 4);                 // [2, 4, 6]
      auto swapped = swap_last_axes(folded);           // [2, 6, 4]
      auto back = swap_last_axes(swapped);             // [2, 4, 6]
      auto shifted = add_row(back, row);
      auto flat = reshape(shifted, {8, 6});
      auto cls = broadcast_rows(row, 8);
      auto tokens = stack_tokens(std::vector<D>{cls, flat, scale(flat, 0.5)});  // [8, 3, 6]
      auto first = take_token(tokens, 1);
      auto third = take_token(tokens, 2);
      auto mixed = add(mul(first, third), take_token(tokens, 0));  // [8, 6]
      auto picked = reshape(mixed, {2, 4, 6});
      const std::size_t rows[] = {2, 0};
      auto scattered = scatter_rows(picked, rows, 3);  // [3, 4, 6]
      return project(take_token(scattered, 1), r);
    })};
  }});
  cases.push_back({"dropout", [](std::mt19937_64& rng) {
    auto x = random_tensor({4, 6}, rng);
    auto r = fixed_weights({4, 6}, rng);
    const auto seed = rng();
    return std::pair{std::vector<D>{x}, std::function<D()>([=] {
                       std::mt19937_64 local(seed);
                       return project(dropout(x, 0.3, local), r);
                     })};
  }});
  if (inject_fault) {
    cases.push_back({"injected_fault", [](std::mt19937_64& rng) {
      auto x = random_tensor({5}, rng);
      auto r = fixed_weights({5}, rng);
      return std::pair{std::vector<D>{x},
                       std::function<D()>([=] { return project(broken_identity(x), r); })};
    }});
  }
  return cases;
}

}  // namespace

std::vector<GradcheckResult> check_primitives(std::size_t trials, std::uint64_t seed,
                                              bool inject_fault) {
  std::vector<GradcheckResult> results;
  std::mt19937_64 rng(seed);
  for (const auto& c : primitive_cases(inject_fault)) {
    GradcheckResult result;
    result.name = c.name;
    for (std::size_t t = 0; t < trials; ++t) {
      auto [inputs, loss] = c.make(rng);
      const auto stats = gradient_error(loss, inputs, result.tolerance);
      result.coordinates += stats.coordinates;
      result.kinks += stats.kinks;
      result.max_relative_error = std::max(result.max_relative_error, stats.max_relative_error);
      ++result.trials;
    }
    results.push_back(std::move(result));
  }
  return results;
}

GradcheckResult check_tiny_model(std::uint64_t seed) {
  const auto config = ModelConfig::tiny();
  auto params = init_params<double>(config, seed);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);

  ModelInput<double> input;
  input.batch = 2;
  for (auto kind : kAllKinds) {
    const std::size_t width = config.samples_per_epoch(kind) * config.epochs;
    std::vector<double> values(input.batch * width);
    for (auto& v : values) v = normal(rng);
    input.signals[index_of(kind)] = D::from({input.batch, width}, std::move(values));
  }
  // Recording 0 keeps {ECG, THX}; recording 1 keeps {ECG, PPG, ABD}.
  input.kept[index_of(SignalKind::ECG)] = {true, true};
  input.kept[index_of(SignalKind::PPG)] = {false, true};
  input.kept[index_of(SignalKind::ABD)] = {false, true};
  input.kept[index_of(SignalKind::THX)] = {true, false};

  std::uniform_int_distribution<int> label(0, 3);
  std::vector<int> labels(input.batch * config.epochs);
  for (auto& l : labels) l = label(rng);
  labels.back() = -1;

  std::vector<D> inputs;
  for (const auto& [name, t] : params) inputs.push_back(t);
  auto loss = [&]() {
    ForwardContext ctx;
    return softmax_cross_entropy(forward(input, params, config, ctx), labels);
  };

  GradcheckResult result;
  result.name = "tiny_model";
  result.trials = 1;
  const auto stats = gradient_error(loss, inputs, result.tolerance);
  result.coordinates = stats.coordinates;
  result.kinks = stats.kinks;
  result.max_relative_error = stats.max_relative_error;
  return result;
}

}  // namespace wav2sleep

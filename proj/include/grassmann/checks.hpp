// Self-verification suites: Grassmann geometry laws, finite-difference
// gradients, and autoregressive causality. Shared by `grassmann check` and the
// acceptance tests.
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grassmann/geometry.hpp"
#include "grassmann/gradcheck.hpp"
#include "grassmann/mixing.hpp"
#include "grassmann/model.hpp"

namespace grassmann::checks {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0;      // measured statistic
  double threshold = 0;  // bound it was compared against
  std::size_t trials = 0;
  std::string detail;
};

inline std::string describe(const CheckResult& r) {
  std::ostringstream os;
  os << (r.passed ? "PASS " : "FAIL ") << r.name << "  value=" << r.value << " bound=" << r.threshold
     << " trials=" << r.trials;
  if (!r.detail.empty()) os << "  " << r.detail;
  return os.str();
}

inline bool all_passed(const std::vector<CheckResult>& results) {
  return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.passed; });
}

// ---- geometry ----------------------------------------------------------------

namespace detail {

inline std::vector<double> random_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> v(n);
  for (auto& x : v) x = normal(rng);
  return v;
}

inline std::vector<double> combine(double a, const std::vector<double>& u, double b, const std::vector<double>& v) {
  std::vector<double> out(u.size());
  for (std::size_t i = 0; i < u.size(); ++i) out[i] = a * u[i] + b * v[i];
  return out;
}

// Numerical rank of [u v] from its singular values.
inline int pair_rank(const std::vector<double>& u, const std::vector<double>& v) {
  Eigen::MatrixXd m(u.size(), 2);
  for (std::size_t i = 0; i < u.size(); ++i) {
    m(Eigen::Index(i), 0) = u[i];
    m(Eigen::Index(i), 1) = v[i];
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
  const auto s = svd.singularValues();
  const double tol = 1e-10 * std::max(1.0, s(0));
  return int(s(0) > tol) + int(s(1) > tol);
}

}  // namespace detail

/// Bilinearity, antisymmetry, projective sign invariance, zero-iff-dependent,
/// and the Gr(2,4) relation, each over `trials` random instances in double.
inline std::vector<CheckResult> geometry_suite(std::size_t trials = 1000, std::uint64_t seed = 1) {
  using geometry::plucker_embed;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(2, 12);
  std::uniform_real_distribution<double> coef(-2.0, 2.0);
  std::vector<CheckResult> out;

  {
    CheckResult r{"geometry.bilinearity", true, 0, 1e-9, trials, "embed(au+bv, cu+dv) = (ad-bc) embed(u,v)"};
    for (std::size_t t = 0; t < trials; ++t) {
      const auto n = dim(rng);
      auto u = detail::random_vector(rng, n), v = detail::random_vector(rng, n);
      const double a = coef(rng), b = coef(rng), c = coef(rng), d = coef(rng);
      auto lhs = plucker_embed<double>(detail::combine(a, u, b, v), detail::combine(c, u, d, v));
      auto rhs = plucker_embed<double>(u, v);
      for (std::size_t k = 0; k < lhs.coords.size(); ++k)
        r.value = std::max(r.value, std::abs(lhs.coords[k] - (a * d - b * c) * rhs.coords[k]));
    }
    r.passed = r.value <= r.threshold;
    out.push_back(r);
  }
  {
    CheckResult r{"geometry.antisymmetry", true, 0, 0, trials, "embed(v,u) == -embed(u,v) exactly"};
    for (std::size_t t = 0; t < trials; ++t) {
      const auto n = dim(rng);
      auto u = detail::random_vector(rng, n), v = detail::random_vector(rng, n);
      auto p = plucker_embed<double>(u, v), q = plucker_embed<double>(v, u);
      for (std::size_t k = 0; k < p.coords.size(); ++k)
        r.value = std::max(r.value, std::abs(p.coords[k] + q.coords[k]));
    }
    r.passed = r.value == 0.0;
    out.push_back(r);
  }
  {
    CheckResult r{"geometry.projective_sign", true, 0, 1e-9, trials,
                  "normalised embeddings of two bases of one plane agree up to sign"};
    for (std::size_t t = 0; t < trials; ++t) {
      const auto n = dim(rng);
      auto u = detail::random_vector(rng, n), v = detail::random_vector(rng, n);
      double a, b, c, d;
      do {
        a = coef(rng), b = coef(rng), c = coef(rng), d = coef(rng);
      } while (std::abs(a * d - b * c) < 0.1);
      auto p = geometry::plucker_normalize(plucker_embed<double>(u, v));
      auto q = geometry::plucker_normalize(plucker_embed<double>(detail::combine(a, u, b, v), detail::combine(c, u, d, v)));
      double same = 0, flipped = 0;
      for (std::size_t k = 0; k < p.coords.size(); ++k) {
        same = std::max(same, std::abs(p.coords[k] - q.coords[k]));
        flipped = std::max(flipped, std::abs(p.coords[k] + q.coords[k]));
      }
      r.value = std::max(r.value, std::min(same, flipped));
    }
    r.passed = r.value <= r.threshold;
    out.push_back(r);
  }
  {
    // Half the trials are constructed dependent pairs, half generic pairs.
    CheckResult r{"geometry.zero_iff_dependent", true, 0, 0, trials, ""};
    std::size_t mismatches = 0;
    for (std::size_t t = 0; t < trials; ++t) {
      const auto n = dim(rng);
      auto u = detail::random_vector(rng, n);
      std::vector<double> v;
      switch (t % 4) {
        case 0: v = detail::random_vector(rng, n); break;
        case 1: v = detail::combine(coef(rng), u, 0.0, u); break;
        case 2: v.assign(n, 0.0); break;
        default: {
          // exactly representable multiple
          v = detail::combine(double(int(t % 7) - 3), u, 0.0, u);
          break;
        }
      }
      const auto p = plucker_embed<double>(u, v);
      double un = 0, vn = 0;
      for (std::size_t i = 0; i < n; ++i) un += u[i] * u[i], vn += v[i] * v[i];
      const bool zero = p.norm() <= 1e-12 * std::max(1.0, std::sqrt(un * vn));
      const bool dependent = detail::pair_rank(u, v) < 2;
      if (zero != dependent) ++mismatches;
    }
    r.value = double(mismatches);
    r.passed = mismatches == 0;
    r.detail = "mismatches between ||p||=0 and the SVD rank oracle";
    out.push_back(r);
  }
  {
    CheckResult r{"geometry.plucker_relation_r4", true, 0, 1e-10, trials, "|p12 p34 - p13 p24 + p14 p23|"};
    for (std::size_t t = 0; t < trials; ++t) {
      auto u = detail::random_vector(rng, 4), v = detail::random_vector(rng, 4);
      r.value = std::max(r.value, std::abs(geometry::plucker_relation_residual(plucker_embed<double>(u, v))));
    }
    r.passed = r.value <= r.threshold;
    out.push_back(r);
  }
  return out;
}

// ---- gradients ---------------------------------------------------------------

namespace detail {

inline Tensord random_tensor(std::mt19937_64& rng, Shape shape, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return Tensord::from(std::move(shape), std::move(v));
}

inline LinearParams<double> random_linear(std::mt19937_64& rng, std::size_t out, std::size_t in, double scale) {
  return {random_tensor(rng, {out, in}, scale), random_tensor(rng, {out}, 0.1)};
}

inline NormParams<double> random_norm(std::mt19937_64& rng, std::size_t d) {
  auto gain = random_tensor(rng, {d}, 0.2);
  for (auto& g : gain.mutable_values()) g += 1.0;
  return {gain, random_tensor(rng, {d}, 0.1)};
}

inline GrassmannBlockParams<double> random_grassmann_block(std::mt19937_64& rng, std::size_t d, std::size_t r) {
  GrassmannBlockParams<double> p;
  const double s = 1.0 / std::sqrt(double(d));
  p.reduction = random_linear(rng, r, d, s * 2);
  p.plucker_proj = random_linear(rng, d, geometry::plucker_dim(r), 0.5);
  p.gate = random_linear(rng, d, 2 * d, s);
  p.ffn = {random_linear(rng, 4 * d, d, s), random_linear(rng, d, 4 * d, s / 2)};
  p.norm1 = random_norm(rng, d);
  p.norm2 = random_norm(rng, d);
  p.dropout = 0.1;
  return p;
}

inline AttentionBlockParams<double> random_attention_block(std::mt19937_64& rng, std::size_t d, std::size_t heads) {
  AttentionBlockParams<double> p;
  const double s = 1.0 / std::sqrt(double(d));
  p.query = random_linear(rng, d, d, s);
  p.key = random_linear(rng, d, d, s);
  p.value = random_linear(rng, d, d, s);
  p.output = random_linear(rng, d, d, s);
  p.ffn = {random_linear(rng, 4 * d, d, s), random_linear(rng, d, 4 * d, s / 2)};
  p.norm1 = random_norm(rng, d);
  p.norm2 = random_norm(rng, d);
  p.heads = heads;
  return p;
}

inline std::vector<Tensord> leaves_of(GrassmannBlockParams<double>& p) {
  std::vector<Tensord> out;
  for_each_parameter(p, "", [&](const std::string&, Tensord& t) { out.push_back(t); });
  return out;
}

// The key bias shifts every score in a query row by the same q.b, which
// softmax cancels: its gradient is identically zero and has no relative error
// to measure. It is checked separately for an exact zero.
inline std::vector<Tensord> leaves_of(AttentionBlockParams<double>& p) {
  std::vector<Tensord> out;
  for_each_parameter(p, "", [&](const std::string& name, Tensord& t) {
    if (name != "key.bias") out.push_back(t);
  });
  return out;
}

inline OffsetSet random_offsets(std::mt19937_64& rng, std::size_t max_offset) {
  std::uniform_int_distribution<std::size_t> pick(1, max_offset);
  std::uniform_int_distribution<std::size_t> count(1, 4);
  OffsetSet s;
  for (std::size_t i = 0, n = count(rng); i < n; ++i) s.push_back(pick(rng));
  return normalize_offsets(s);
}

}  // namespace detail

/// One randomized gradient check per instance, cycling through every
/// differentiable op plus both full blocks. Reports the worst relative error
/// per op family against `tolerance`.
inline std::vector<CheckResult> gradient_suite(std::size_t instances = 120, std::uint64_t seed = 2,
                                               double tolerance = 1e-5, double h = 1e-5) {
  using detail::random_tensor;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> small(1, 5);
  std::map<std::string, CheckResult> worst;
  auto record = [&](const std::string& name, const GradCheckResult& g) {
    auto& r = worst[name];
    r.name = "gradient." + name;
    r.threshold = tolerance;
    ++r.trials;
    if (g.max_rel_error < r.value) return;
    r.value = g.max_rel_error;
    std::ostringstream os;
    os << "worst element: analytic " << g.analytic << " numeric " << g.numeric;
    r.detail = os.str();
  };

  using Case = std::function<void()>;
  std::vector<std::pair<std::string, Case>> cases;
  cases.emplace_back("matmul", [&] {
    auto a = random_tensor(rng, {small(rng), small(rng)});
    auto b = random_tensor(rng, {a.dim(1), small(rng)});
    record("matmul", grad_check_detailed([&] { return matmul(a, b); }, {a, b}, h));
  });
  cases.emplace_back("add_sub_mul", [&] {
    const std::size_t m = small(rng), n = small(rng);
    auto a = random_tensor(rng, {m, n});
    auto b = random_tensor(rng, {m, n});
    auto row = random_tensor(rng, {n});
    auto s = random_tensor(rng, {1});
    record("add_sub_mul", grad_check_detailed([&] { return mul(sub(add(a, row), mul(b, s)), add(b, row)); }, {a, b, row, s}, h));
  });
  cases.emplace_back("concat_scale", [&] {
    const std::size_t m = small(rng);
    auto a = random_tensor(rng, {m, small(rng)});
    auto b = random_tensor(rng, {m, small(rng)});
    std::vector<double> f(m);
    for (auto& x : f) x = double(rng() % 3);
    record("concat_scale", grad_check_detailed([&] { return scale_rows(scale(concat_last(a, b), 0.7), f); }, {a, b}, h));
  });
  cases.emplace_back("activations", [&] {
    auto x = random_tensor(rng, {small(rng), small(rng) + 1}, 1.5);
    record("sigmoid", grad_check_detailed([&] { return sigmoid(x); }, {x}, h));
    record("gelu", grad_check_detailed([&] { return gelu(x); }, {x}, h));
    record("softmax", grad_check_detailed([&] { return softmax_last(x); }, {x}, h));
  });
  cases.emplace_back("layer_norm", [&] {
    // d >= 3: a two-element row normalises to +-1 whatever x is, leaving only
    // eps-sized input gradients.
    const std::size_t d = small(rng) + 2;
    auto x = random_tensor(rng, {small(rng), d});
    auto norm = detail::random_norm(rng, d);
    record("layer_norm", grad_check_detailed([&] { return layer_norm(x, norm.gain, norm.bias); }, {x, norm.gain, norm.bias}, h));
  });
  cases.emplace_back("dropout", [&] {
    auto x = random_tensor(rng, {small(rng), small(rng)});
    const auto s = rng();
    record("dropout", grad_check_detailed([&] { return dropout(x, 0.3, true, s); }, {x}, h));
  });
  cases.emplace_back("cross_entropy_embedding", [&] {
    const std::size_t vocab = small(rng) + 1, n = small(rng);
    auto table = random_tensor(rng, {vocab, 3});
    auto w = random_tensor(rng, {vocab, 3});
    std::vector<std::int32_t> ids(n), tgt(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = std::int32_t(rng() % vocab), tgt[i] = std::int32_t(rng() % vocab);
    record("cross_entropy", grad_check_detailed([&] {
             return cross_entropy(linear(embedding(table, std::span<const std::int32_t>(ids)), w, Tensord()),
                                  std::span<const std::int32_t>(tgt));
           }, {table, w}, h));
  });
  cases.emplace_back("linear", [&] {
    auto x = random_tensor(rng, {small(rng), small(rng)});
    auto lin = detail::random_linear(rng, small(rng), x.cols(), 1.0);
    record("linear", grad_check_detailed([&] { return linear(x, lin.weight, lin.bias); }, {x, lin.weight, lin.bias}, h));
  });
  cases.emplace_back("plucker", [&] {
    const std::size_t r = small(rng) + 1;
    auto u = random_tensor(rng, {r}), v = random_tensor(rng, {r});
    record("plucker_embed", grad_check_detailed([&] { return geometry::plucker_embed(u, v); }, {u, v}, h));
    record("plucker_normalize", grad_check_detailed([&] {
             return geometry::plucker_normalize(geometry::plucker_embed(u, v), 1e-6);
           }, {u, v}, h));
    // eps branch: coordinates well below eps (eps chosen large so +-h stays on the branch).
    auto p = random_tensor(rng, {geometry::plucker_dim(r)}, 0.01);
    record("plucker_normalize_eps_branch", grad_check_detailed([&] { return geometry::plucker_normalize(p, 1.0); }, {p}, h));
  });
  cases.emplace_back("plucker_features", [&] {
    const std::size_t len = 2 + rng() % 7, r = 2 + rng() % 4;
    auto z = random_tensor(rng, {2 * len, r});
    auto offsets = detail::random_offsets(rng, len);
    const auto pairing = rng() % 2 ? Pairing::Backward : Pairing::Forward;
    record("plucker_mean_features", grad_check_detailed([&] {
             return plucker_mean_features(z, len, offsets, pairing).mean;
           }, {z}, h));
  });
  cases.emplace_back("attention", [&] {
    const std::size_t heads = 1 + rng() % 2, len = 1 + rng() % 5;
    const std::size_t d = heads * (1 + rng() % 3);
    auto q = random_tensor(rng, {2 * len, d}), k = random_tensor(rng, {2 * len, d}), v = random_tensor(rng, {2 * len, d});
    const bool causal = rng() % 2;
    record("multi_head_attention", grad_check_detailed([&] { return multi_head_attention(q, k, v, len, heads, causal); }, {q, k, v}, h));
  });
  cases.emplace_back("grassmann_block", [&] {
    const std::size_t d = rng() % 2 ? 8 : 16, r = rng() % 2 ? 4 : 8, len = rng() % 2 ? 4 : 16;
    auto params = detail::random_grassmann_block(rng, d, r);
    auto x = random_tensor(rng, {len, d});
    auto offsets = detail::random_offsets(rng, len - 1);
    auto leaves = detail::leaves_of(params);
    leaves.push_back(x);
    const ForwardOptions opt{true, rng(), Pairing::Backward};
    record("grassmann_block", grad_check_detailed([&] { return grassmann_block_forward(x, params, offsets, len, opt); }, leaves, h));
  });
  cases.emplace_back("attention_block", [&] {
    // len >= 4: under the causal mask row 0 sees only itself, so short
    // sequences leave query and key gradients resting on one or two softmax rows.
    const std::size_t d = 8, len = 4 + rng() % 4;
    auto params = detail::random_attention_block(rng, d, 2);
    auto x = random_tensor(rng, {len, d});
    auto leaves = detail::leaves_of(params);
    leaves.push_back(x);
    params.key.bias.set_requires_grad(true);
    params.key.bias.zero_grad();
    record("attention_block", grad_check_detailed([&] { return attention_block_forward(x, params, len, true); }, leaves, h));
    double key_bias_grad = 0;
    for (double g : params.key.bias.grad()) key_bias_grad = std::max(key_bias_grad, std::abs(g));
    auto& r = worst["attention_block_key_bias"];
    r.name = "gradient.attention_block_key_bias";
    r.threshold = 1e-12;
    r.detail = "max |dL/d key.bias|, zero by softmax shift invariance";
    r.value = std::max(r.value, key_bias_grad);
    ++r.trials;
  });

  for (std::size_t i = 0; i < instances; ++i) cases[i % cases.size()].second();

  std::vector<CheckResult> out;
  for (auto& [name, r] : worst) {
    r.passed = r.value <= r.threshold;
    out.push_back(r);
  }
  return out;
}

// ---- causality ---------------------------------------------------------------

struct CausalityProbe {
  bool prefix_unchanged = true;  // logits at every t < s bit-identical for every s
  bool suffix_changed = true;    // logits at t = s changed for every s (sanity)
  std::size_t first_violation = 0;
};

/// Flips every input position s in turn and compares logits row by row,
/// bitwise, against the unmodified forward pass (dropout off).
template <class T>
CausalityProbe probe_causality(const LanguageModel<T>& model, const std::vector<std::int32_t>& tokens) {
  NoGradGuard no_grad;
  const std::size_t len = tokens.size(), vocab = model.config.vocab_size;
  auto base = lm_forward(model, std::span<const std::int32_t>(tokens)).detach();
  CausalityProbe probe;
  for (std::size_t s = 0; s < len; ++s) {
    auto flipped = tokens;
    flipped[s] = std::int32_t((std::size_t(flipped[s]) + 1 + s % (vocab - 1)) % vocab);
    auto out = lm_forward(model, std::span<const std::int32_t>(flipped));
    const auto a = base.values(), b = out.values();
    if (std::memcmp(a.data(), b.data(), s * vocab * sizeof(T)) != 0 && probe.prefix_unchanged) {
      probe.prefix_unchanged = false;
      probe.first_violation = s;
    }
    if (std::memcmp(a.data() + s * vocab, b.data() + s * vocab, vocab * sizeof(T)) == 0) probe.suffix_changed = false;
  }
  return probe;
}

/// Causality of both model kinds (d=64, N=2, L=32) plus a demonstration that
/// forward pairing breaks it.
inline std::vector<CheckResult> causality_suite(std::uint64_t seed = 3, std::size_t length = 32) {
  auto make = [&](BlockKind kind, Pairing pairing) {
    ModelConfig c;
    c.block_kind = kind;
    c.vocab_size = 256;
    c.model_dim = 64;
    c.reduced_dim = 16;
    c.layers = 2;
    c.ffn_dim = 256;
    c.max_len = length;
    c.heads = 4;
    c.window_schedule = WindowSchedule::repeated({1, 2, 4, 8}, 2);
    c.pairing = pairing;
    return init_params<float>(c, seed);
  };
  std::mt19937_64 rng(seed);
  std::vector<std::int32_t> tokens(length);
  for (auto& t : tokens) t = std::int32_t(rng() % 256);

  std::vector<CheckResult> out;
  for (auto kind : {BlockKind::Grassmann, BlockKind::Attention}) {
    auto probe = probe_causality(make(kind, Pairing::Backward), tokens);
    CheckResult r;
    r.name = std::string("causality.") + to_string(kind);
    r.trials = length;
    r.passed = probe.prefix_unchanged && probe.suffix_changed;
    r.value = probe.prefix_unchanged ? 0 : 1;
    r.detail = probe.prefix_unchanged ? "prefix logits bit-identical for every flipped position"
                                      : "prefix changed when flipping position " + std::to_string(probe.first_violation);
    if (!probe.suffix_changed) r.detail += "; some flip left its own position unchanged";
    out.push_back(r);
  }
  {
    auto probe = probe_causality(make(BlockKind::Grassmann, Pairing::Forward), tokens);
    CheckResult r;
    r.name = "causality.forward_pairing_leaks";
    r.trials = length;
    r.passed = !probe.prefix_unchanged;
    r.value = probe.prefix_unchanged ? 0 : 1;
    r.detail = probe.prefix_unchanged ? "forward pairing unexpectedly causal"
                                      : "forward pairing leaks: flipping position " +
                                            std::to_string(probe.first_violation) + " changes earlier logits";
    out.push_back(r);
  }
  return out;
}

}  // namespace grassmann::checks

// Wall-clock scaling of the two sequence-mixing mechanisms in sequence length.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <new>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "grassmann/mixing.hpp"

namespace grassmann::bench {

enum class Mechanism { GrassmannMix, AttentionScores };

inline const char* to_string(Mechanism m) {
  return m == Mechanism::GrassmannMix ? "grassmann-mix" : "attention-scores";
}

struct MixingSetup {
  std::size_t d = 64;
  std::size_t r = 16;
  OffsetSet offsets{1, 2, 4, 8, 12, 16};
  std::size_t heads = 4;
  std::size_t repeats = 7;
  std::size_t warmups = 2;
  std::uint64_t seed = 0;
};

struct Timing {
  double median_seconds = 0;
  std::vector<double> samples;
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Times one forward pass of the mixing computation only, without graph
/// recording. Inputs are generated before the clock starts.
///   grassmann-mix:    reduce, pair, Plücker-encode, normalise, average, project
///   attention-scores: Q Kᵀ, causal softmax, A V per head
inline Timing time_mixing(Mechanism mechanism, std::size_t length, const MixingSetup& s) {
  if (s.repeats < 5) throw std::invalid_argument("time_mixing: repeats must be >= 5");
  NoGradGuard no_grad;
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<float> normal(0.f, 1.f);
  auto random = [&](std::size_t rows, std::size_t cols) {
    std::vector<float> v(rows * cols);
    for (auto& x : v) x = normal(rng);
    return Tensorf::from({rows, cols}, std::move(v));
  };
  std::function<void()> run;
  Tensorf h, q, k, v;
  LinearParams<float> reduction, proj;
  if (mechanism == Mechanism::GrassmannMix) {
    h = random(length, s.d);
    reduction = {random(s.r, s.d), Tensorf::zeros({s.r})};
    proj = {random(s.d, geometry::plucker_dim(s.r)), Tensorf::zeros({s.d})};
    run = [&] {
      auto g = grassmann_features(reduce_states(h, reduction), length, s.offsets, proj);
      (void)g;
    };
  } else {
    q = random(length, s.d);
    k = random(length, s.d);
    v = random(length, s.d);
    run = [&] {
      auto o = multi_head_attention(q, k, v, length, s.heads, true);
      (void)o;
    };
  }
  for (std::size_t i = 0; i < s.warmups; ++i) run();
  Timing t;
  for (std::size_t i = 0; i < s.repeats; ++i) {
    const auto start = std::chrono::steady_clock::now();
    run();
    t.samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  t.median_seconds = median(t.samples);
  return t;
}

struct Row {
  Mechanism mechanism;
  std::size_t length;
  std::size_t d, r, m, repeats;
  double median_seconds;
};

struct Ratio {
  Mechanism mechanism;
  std::size_t from, to;
  double ratio;
};

struct Report {
  std::vector<Row> rows;
  std::vector<Ratio> ratios;
  std::vector<std::pair<Mechanism, std::size_t>> skipped;  // grid points that ran out of memory
};

/// Runs both mechanisms over `lengths` (strictly increasing). Ratios are
/// reported only between adjacent lengths where the larger is exactly double.
inline Report scaling_report(const std::vector<std::size_t>& lengths, const MixingSetup& s) {
  for (std::size_t i = 1; i < lengths.size(); ++i)
    if (lengths[i] <= lengths[i - 1]) throw std::invalid_argument("bench lengths must be strictly increasing");
  Report report;
  for (auto mech : {Mechanism::AttentionScores, Mechanism::GrassmannMix}) {
    for (auto len : lengths) {
      try {
        auto t = time_mixing(mech, len, s);
        report.rows.push_back({mech, len, s.d, s.r, s.offsets.size(), s.repeats, t.median_seconds});
      } catch (const std::bad_alloc&) {
        report.skipped.emplace_back(mech, len);
      }
    }
  }
  for (std::size_t i = 1; i < report.rows.size(); ++i) {
    const auto& a = report.rows[i - 1];
    const auto& b = report.rows[i];
    if (a.mechanism == b.mechanism && b.length == 2 * a.length)
      report.ratios.push_back({a.mechanism, a.length, b.length, b.median_seconds / a.median_seconds});
  }
  return report;
}

inline std::string to_csv(const Report& report) {
  std::ostringstream os;
  os.precision(9);
  os << "mechanism,L,d,r,m,repeats,median_seconds\n";
  for (const auto& r : report.rows)
    os << to_string(r.mechanism) << ',' << r.length << ',' << r.d << ',' << r.r << ',' << r.m << ','
       << r.repeats << ',' << r.median_seconds << '\n';
  os << "\nmechanism,L_from,L_to,ratio\n";
  for (const auto& r : report.ratios)
    os << to_string(r.mechanism) << ',' << r.from << ',' << r.to << ',' << r.ratio << '\n';
  return os.str();
}

inline void write_csv(const Report& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write bench report '" + path + "'");
  out << to_csv(report);
}

/// Least-squares fit time = a * x^power through the origin; returns the
/// coefficient of determination and the residual sum of squares.
struct PowerFit {
  double coefficient = 0;
  double r_squared = 0;
  double residual_ss = 0;
};

inline PowerFit fit_power(const std::vector<double>& x, const std::vector<double>& y, double power) {
  double sxy = 0, sxx = 0, mean_y = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = std::pow(x[i], power);
    sxy += f * y[i];
    sxx += f * f;
    mean_y += y[i];
  }
  mean_y /= double(y.size());
  PowerFit fit;
  fit.coefficient = sxy / sxx;
  double ss_tot = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = y[i] - fit.coefficient * std::pow(x[i], power);
    fit.residual_ss += e * e;
    ss_tot += (y[i] - mean_y) * (y[i] - mean_y);
  }
  fit.r_squared = ss_tot > 0 ? 1.0 - fit.residual_ss / ss_tot : 1.0;
  return fit;
}

inline std::vector<Row> rows_for(const Report& report, Mechanism m) {
  std::vector<Row> out;
  for (const auto& r : report.rows)
    if (r.mechanism == m) out.push_back(r);
  return out;
}

}  // namespace grassmann::bench

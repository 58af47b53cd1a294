#include <algorithm>
#include <cmath>
#include <memory>

#include "doctest.h"
#include "gradtrace/error.hpp"
#include "gradtrace/metrics.hpp"
#include "support.hpp"

using namespace gradtrace;

namespace {

// pairwise count: P(pos > neg) + 0.5 P(pos == neg)
double mann_whitney(const std::vector<double>& s, const std::vector<bool>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1;
      wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
    }
  }
  return wins / pairs;
}

// mean precision at the rank of each positive; distinct scores only
double average_precision(const std::vector<double>& s, const std::vector<bool>& y) {
  double sum = 0.0;
  int positives = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    ++positives;
    int above = 0, pos_above = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (s[j] >= s[i]) {
        ++above;
        pos_above += y[j];
      }
    }
    sum += static_cast<double>(pos_above) / above;
  }
  return sum / positives;
}

std::unique_ptr<bool[]> as_array(const std::vector<bool>& y) {
  auto out = std::make_unique<bool[]>(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i];
  return out;
}

double run_auprc(const std::vector<double>& s, const std::vector<bool>& y) {
  const auto b = as_array(y);
  return auprc(s, std::span<const bool>(b.get(), y.size()));
}

double run_auroc(const std::vector<double>& s, const std::vector<bool>& y) {
  const auto b = as_array(y);
  return auroc(s, std::span<const bool>(b.get(), y.size()));
}

}  // namespace

TEST_CASE("hand-computed curves") {
  const std::vector<double> s{0.9, 0.8, 0.7, 0.6};
  const std::vector<bool> y{true, false, true, false};
  CHECK(run_auprc(s, y) == doctest::Approx(0.5 * 1.0 + 0.5 * 2.0 / 3.0));
  CHECK(run_auroc(s, y) == doctest::Approx(0.75));
  CHECK(run_auprc({3, 2, 1}, {true, true, false}) == 1.0);
  CHECK(run_auroc({3, 2, 1}, {true, true, false}) == 1.0);
  CHECK(run_auroc({1, 2, 3}, {true, true, false}) == 0.0);
  // everything tied: auROC 1/2, auPRC = prevalence
  CHECK(run_auroc({1, 1, 1, 1}, {true, false, false, false}) == 0.5);
  CHECK(run_auprc({1, 1, 1, 1}, {true, false, false, false}) == 0.25);
}

TEST_CASE("metric errors") {
  CHECK_THROWS_AS(run_auprc({1, 2}, {true, true}), InputError);
  CHECK_THROWS_AS(run_auroc({1, 2}, {false, false}), InputError);
  CHECK_THROWS_AS(run_auroc({1, NAN}, {true, false}), InputError);
  const bool one[1] = {true};
  CHECK_THROWS_AS(auprc(std::vector<double>{1, 2}, std::span<const bool>(one, 1)), InputError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{2}), InputError);
  CHECK_THROWS_AS(ap_at_k(std::vector<SampleId>{1}, {1}, 0), InputError);
}

TEST_CASE("auROC equals the pairwise statistic and auPRC the mean precision") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.uniform_below(40);
    std::vector<double> s(n), distinct(n);
    std::vector<bool> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.uniform_below(6));  // many ties
      distinct[i] = rng.normal();
      y[i] = rng.uniform01() < 0.3;
    }
    y[0] = true;
    y[1] = false;
    CHECK(run_auroc(s, y) == doctest::Approx(mann_whitney(s, y)).epsilon(1e-12));
    CHECK(run_auroc(distinct, y) == doctest::Approx(mann_whitney(distinct, y)).epsilon(1e-12));
    CHECK(run_auprc(distinct, y) == doctest::Approx(average_precision(distinct, y)).epsilon(1e-12));
    const double p = run_auprc(s, y);
    CHECK(p >= 0.0);
    CHECK(p <= 1.0);
  }
}

TEST_CASE("curves are invariant under monotone transforms") {
  Rng rng(7);
  std::vector<double> s(50), t(50);
  std::vector<bool> y(50);
  for (std::size_t i = 0; i < 50; ++i) {
    s[i] = rng.normal();
    t[i] = std::exp(3 * s[i]) + 1;
    y[i] = i % 4 == 0;
  }
  CHECK(run_auprc(s, y) == run_auprc(t, y));
  CHECK(run_auroc(s, y) == run_auroc(t, y));
}

TEST_CASE("ap at k") {
  const std::vector<SampleId> ranked{4, 8, 1, 9, 3};
  const std::set<SampleId> rel{8, 9, 100};
  CHECK(ap_at_k(ranked, rel, 1) == 0.0);
  CHECK(ap_at_k(ranked, rel, 2) == 0.5);
  CHECK(ap_at_k(ranked, rel, 4) == 0.5);
  CHECK(ap_at_k(ranked, rel, 10) == 0.2);  // missing ranks count as misses
}

TEST_CASE("spearman") {
  CHECK(average_ranks(std::vector<double>{10, 30, 20, 20}) == std::vector<double>{1, 4, 2.5, 2.5});
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{10, 20, 30}) == doctest::Approx(1.0));
  CHECK(spearman(std::vector<double>{1, 2, 3}, std::vector<double>{3, 2, 1}) == doctest::Approx(-1.0));
  CHECK(spearman(std::vector<double>{1, 1, 1}, std::vector<double>{3, 2, 1}) == 0.0);
  // without ties: 1 - 6 sum d^2 / (n (n^2 - 1))
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 3 + rng.uniform_below(30);
    const auto pa = fisher_yates_permutation(n, rng.next()), pb = fisher_yates_permutation(n, rng.next());
    std::vector<double> a(pa.begin(), pa.end()), b(pb.begin(), pb.end());
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) d2 += (a[i] - b[i]) * (a[i] - b[i]);
    const double nn = static_cast<double>(n);
    CHECK(spearman(a, b) == doctest::Approx(1 - 6 * d2 / (nn * (nn * nn - 1))).epsilon(1e-12));
  }
}

TEST_CASE("agreement stats") {
  InfluenceResult a, b;
  for (SampleId i = 0; i < 20; ++i) {
    a.ranking.push_back({SourceId::of_sample(i), 20.0 - static_cast<double>(i)});
  }
  b = a;
  auto s = agreement_stats(a, b, {5, 10, 50});
  CHECK(s.spearman == doctest::Approx(1.0));
  CHECK(s.common == 20);
  CHECK(s.overlap == std::vector<double>{1.0, 1.0, 1.0});

  std::reverse(b.ranking.begin(), b.ranking.end());
  for (auto& e : b.ranking) e.score = static_cast<double>(e.id.sample);
  s = agreement_stats(a, b, {5, 10});
  CHECK(s.spearman == doctest::Approx(-1.0));
  CHECK(s.overlap == std::vector<double>{0.0, 0.0});

  // only shared ids count
  InfluenceResult c;
  c.ranking = {{SourceId::of_sample(0), 1.0}, {SourceId::of_sample(99), 0.5}};
  s = agreement_stats(a, c, {5});
  CHECK(s.common == 1);
  CHECK(s.overlap == std::vector<double>{1.0});
}

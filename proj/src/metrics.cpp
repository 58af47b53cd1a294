#include "gradtrace/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "gradtrace/error.hpp"

namespace gradtrace {

namespace {

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

// Indices sorted by score descending; groups of equal scores are then
// consumed together.
std::vector<std::size_t> order_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

Counts check_binary(std::span<const double> scores, std::span<const bool> positive) {
  if (scores.size() != positive.size()) throw InputError("scores and labels differ in length");
  Counts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (std::isnan(scores[i])) throw InputError("NaN score");
    positive[i] ? ++c.pos : ++c.neg;
  }
  if (c.pos == 0 || c.neg == 0) throw InputError("labels need at least one positive and one negative");
  return c;
}

}  // namespace

double auprc(std::span<const double> scores, std::span<const bool> positive) {
  const Counts total = check_binary(scores, positive);
  const auto idx = order_desc(scores);
  double area = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, gained = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      if (positive[idx[j]]) ++gained;
      ++j;
    }
    tp += gained;
    seen = j;
    if (gained > 0) {
      area += (static_cast<double>(gained) / static_cast<double>(total.pos)) *
              (static_cast<double>(tp) / static_cast<double>(seen));
    }
    i = j;
  }
  return area;
}

double auroc(std::span<const double> scores, std::span<const bool> positive) {
  const Counts total = check_binary(scores, positive);
  const auto idx = order_desc(scores);
  double area = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, dp = 0, dn = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      positive[idx[j]] ? ++dp : ++dn;
      ++j;
    }
    // trapezoid between (fp, tp) and (fp + dn, tp + dp), in raw counts
    area += static_cast<double>(dn) * (static_cast<double>(tp) + 0.5 * static_cast<double>(dp));
    tp += dp;
    fp += dn;
    i = j;
  }
  return area / (static_cast<double>(total.pos) * static_cast<double>(total.neg));
}

double ap_at_k(std::span<const SampleId> ranked, const std::set<SampleId>& relevant, std::size_t k) {
  if (k == 0) throw InputError("k must be at least 1");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (relevant.count(ranked[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(k);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && values[idx[j]] == values[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j);  // mean of i+1 .. j
    for (std::size_t m = i; m < j; ++m) ranks[idx[m]] = r;
    i = j;
  }
  return ranks;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InputError("spearman inputs differ in length");
  if (a.size() < 2) throw InputError("spearman needs at least two points");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

AgreementStats agreement_stats(const InfluenceResult& rapid, const InfluenceResult& oracle,
                               std::vector<std::size_t> ks) {
  std::map<SourceId, double> other;
  for (const auto& e : oracle.ranking) other.emplace(e.id, e.score);
  std::vector<double> a, b;
  std::vector<SourceId> rapid_common, oracle_common;
  for (const auto& e : rapid.ranking) {
    auto it = other.find(e.id);
    if (it == other.end()) continue;
    a.push_back(e.score);
    b.push_back(it->second);
    rapid_common.push_back(e.id);
  }
  std::map<SourceId, bool> in_rapid;
  for (const auto& id : rapid_common) in_rapid[id] = true;
  for (const auto& e : oracle.ranking) {
    if (in_rapid.count(e.id)) oracle_common.push_back(e.id);
  }
  AgreementStats s;
  s.common = a.size();
  s.spearman = a.size() >= 2 ? spearman(a, b) : (a.size() == 1 ? 1.0 : 0.0);
  s.ks = std::move(ks);
  for (std::size_t k : s.ks) {
    const std::size_t m = std::min(k, s.common);
    if (m == 0) {
      s.overlap.push_back(0.0);
      continue;
    }
    std::set<SourceId> top(rapid_common.begin(), rapid_common.begin() + static_cast<std::ptrdiff_t>(m));
    std::size_t hits = 0;
    for (std::size_t i = 0; i < m; ++i) hits += top.count(oracle_common[i]);
    s.overlap.push_back(static_cast<double>(hits) / static_cast<double>(m));
  }
  return s;
}

}  // namespace gradtrace

#pragma once

#include <cstddef>
#include <set>
#include <span>
#include <vector>

#include "gradtrace/retrieval.hpp"

namespace gradtrace {

// Area under the precision-recall step curve (average precision): the
// sum over distinct score thresholds of (recall gain) * precision, with
// tied scores entering together. Throws InputError unless both classes
// are present and the spans have equal length.
double auprc(std::span<const double> scores, std::span<const bool> positive);

// Area under the ROC curve by the trapezoid rule over tie groups, which
// equals P(score(pos) > score(neg)) + 0.5 P(equal).
double auroc(std::span<const double> scores, std::span<const bool> positive);

// |top-k of ranked ∩ relevant| / k. Throws InputError for k == 0.
double ap_at_k(std::span<const SampleId> ranked, const std::set<SampleId>& relevant, std::size_t k);

// Average ranks (1-based, ties share the mean rank).
std::vector<double> average_ranks(std::span<const double> values);

// Pearson correlation of average ranks; 0 when either side is constant.
double spearman(std::span<const double> a, std::span<const double> b);

struct AgreementStats {
  double spearman = 0.0;
  std::size_t common = 0;
  std::vector<std::size_t> ks;
  std::vector<double> overlap;  // |top-k(a) ∩ top-k(b)| / min(k, n)
};

// Compares two results over the ids they share.
AgreementStats agreement_stats(const InfluenceResult& rapid, const InfluenceResult& oracle,
                               std::vector<std::size_t> ks = {5, 10, 50});

}  // namespace gradtrace

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gradtrace/corpus.hpp"
#include "gradtrace/error.hpp"
#include "gradtrace/io.hpp"
#include "gradtrace/retrieval.hpp"
#include "gradtrace/train.hpp"
#include "support.hpp"

using namespace gradtrace;

namespace {

RapidGrad sketch_of(std::vector<double> v, std::uint64_t spec_id = 1, SourceId id = SourceId::of_sample(0)) {
  RapidGrad g;
  g.source = id;
  g.spec_id = spec_id;
  for (double x : v) g.values.push_back(to_half(x));
  return g;
}

RapidGrad random_rapid(std::size_t K, std::uint64_t seed, SourceId id = SourceId::of_sample(0)) {
  return sketch_of(testing::normal_vector(K, seed), 1, id);
}

struct Trained {
  Dataset data;
  ToyLM model;
};

const Trained& counting_fixture() {
  static const Trained t = [] {
    Trained r;
    r.data = counting_corpus(100, 21);
    TrainConfig tc;
    tc.seed = 21;
    tc.epochs = 5;
    tc.learning_rate = 0.5;
    tc.batch_size = 8;
    r.model = train_toy(r.data, tc).model;
    return r;
  }();
  return t;
}

CacheStore build_store(const std::filesystem::path& path, const Trained& t, const SketchSpec& spec,
                       bool tokens) {
  auto store = CacheStore::open(path, spec.spec_id, OpenMode::create, spec.K);
  CacheRunOptions opt;
  opt.token_level = tokens;
  run_cache_workers(t.data, t.model, Compressor(spec), store, 1, opt);
  return store;
}

}  // namespace

TEST_CASE("mode names") {
  for (auto m : {InfluenceMode::sample_sample, InfluenceMode::token_sample, InfluenceMode::sample_token,
                 InfluenceMode::token_token}) {
    CHECK(parse_influence_mode(to_string(m)) == m);
  }
  CHECK(std::string(to_string(InfluenceMode::sample_token)) == "sample-token");
  CHECK_THROWS_AS(parse_influence_mode("sample"), ConfigError);
  CHECK(uses_training_tokens(InfluenceMode::token_sample));
  CHECK(uses_training_tokens(InfluenceMode::sample_token));
  CHECK(!uses_training_tokens(InfluenceMode::sample_sample));
  CHECK(uses_query_token(InfluenceMode::sample_token));
  CHECK(!uses_query_token(InfluenceMode::token_sample));
}

TEST_CASE("influence formula examples") {
  const auto unit = sketch_of({0.6, 0.8, 0, 0});
  CHECK(influence_sample(unit, unit, 1, 1.0) == doctest::Approx(1.0).epsilon(1e-3));
  const auto a = sketch_of({1, 2, -1, 0.5}), b = sketch_of({0.25, -3, 2, 4});
  const double inner = sketch_inner(a, b);
  CHECK(inner == 0.25 - 6 - 2 + 2);
  CHECK(influence_sample(a, b, 5, 5e-5) == doctest::Approx(2.5e-4 * inner).epsilon(1e-12));
  CHECK(influence_sample(a, b, 0, 0.1) == 0.0);
  CHECK(influence_token_token(a, b, 3, 0.5) == doctest::Approx(1.5 * inner));
  CHECK(influence_token_token(a, sketch_of({0, 0, 0, 0}), 3, 0.5) == 0.0);
  CHECK(influence_token_token(a, a, 3, 0.5) >= 0.0);
  auto other = b;
  other.spec_id = 2;
  CHECK_THROWS_AS(influence_sample(a, other, 1, 1.0), SpecMismatchError);
}

TEST_CASE("token formulas against brute force") {
  const std::size_t K = 16;
  const auto s_tok = random_rapid(K, 1);
  std::vector<RapidGrad> t_tokens{random_rapid(K, 2), random_rapid(K, 3), random_rapid(K, 4)};

  SUBCASE("mean over query tokens") {
    double brute = 0.0;
    for (const auto& t : t_tokens) {
      double ip = 0.0;
      for (std::size_t k = 0; k < K; ++k) ip += from_half(t.values[k]) * from_half(s_tok.values[k]);
      brute += ip;
    }
    brute = 4 * 0.25 * brute / 3;
    CHECK(influence_token_on_sample(t_tokens, s_tok, 4, 0.25) == doctest::Approx(brute).epsilon(1e-12));
    CHECK(influence_token_on_sample(std::span(t_tokens).first(1), s_tok, 4, 0.25) ==
          doctest::Approx(influence_token_token(t_tokens[0], s_tok, 4, 0.25)).epsilon(1e-14));
    const std::vector<RapidGrad> same(5, t_tokens[1]);
    CHECK(influence_token_on_sample(same, s_tok, 2, 0.5) ==
          doctest::Approx(influence_token_token(t_tokens[1], s_tok, 2, 0.5)).epsilon(1e-14));
    CHECK_THROWS_AS(influence_token_on_sample({}, s_tok, 1, 1.0), InputError);
  }
  SUBCASE("mean over training tokens") {
    std::vector<RapidGrad> s_tokens{random_rapid(K, 5), random_rapid(K, 6), random_rapid(K, 7), random_rapid(K, 8)};
    const auto& t = t_tokens[0];
    double brute = 0.0;
    for (const auto& s : s_tokens) {
      for (std::size_t k = 0; k < K; ++k) brute += from_half(t.values[k]) * from_half(s.values[k]);
    }
    brute = 2 * 0.3 * brute / 4;
    CHECK(influence_sample_on_token(t, s_tokens, 2, 0.3) == doctest::Approx(brute).epsilon(1e-12));
    CHECK(influence_sample_on_token(t, std::span(s_tokens).first(1), 2, 0.3) ==
          doctest::Approx(influence_token_token(t, s_tokens[0], 2, 0.3)).epsilon(1e-14));
    CHECK_THROWS_AS(influence_sample_on_token(t, {}, 1, 1.0), InputError);
  }
}

TEST_CASE("tie rule and sort oracle") {
  std::vector<RankedEntry> e{{SourceId::of_sample(5), 1.0},
                             {SourceId::of_sample(2), 1.0},
                             {SourceId::of_token(2, 0), 1.0},
                             {SourceId::of_sample(9), 3.0}};
  sort_ranking(e);
  CHECK(e[0].id == SourceId::of_sample(9));
  CHECK(e[1].id == SourceId::of_sample(2));
  CHECK(e[2].id == SourceId::of_token(2, 0));
  CHECK(e[3].id == SourceId::of_sample(5));

  // independent comparator: negate scores and compare tuples
  Rng rng(3);
  std::vector<RankedEntry> many;
  for (SampleId i = 0; i < 100; ++i) many.push_back({SourceId::of_sample(i), static_cast<double>(rng.uniform_below(10))});
  auto expect = many;
  std::stable_sort(expect.begin(), expect.end(), [](const RankedEntry& a, const RankedEntry& b) {
    return std::make_pair(-a.score, a.id.sample) < std::make_pair(-b.score, b.id.sample);
  });
  std::reverse(many.begin(), many.end());
  sort_ranking(many);
  CHECK(many == expect);
}

TEST_CASE("rank_topk on stores") {
  testing::TempDir dir("rank");
  const std::uint64_t K = 8;
  auto store = CacheStore::open(dir / "c.cache", 1, OpenMode::create, K);
  InfluenceQuery q;
  q.sample = random_rapid(K, 100);
  q.epochs = 1;
  q.eta = 1.0;

  CHECK_THROWS_AS(rank_topk(q, store, 5), InputError);
  store.put(random_rapid(K, 1, SourceId::of_sample(4)));
  auto r = rank_topk(q, store, 5);
  REQUIRE(r.ranking.size() == 1);
  CHECK(r.ranking[0].id == SourceId::of_sample(4));
  CHECK(r.truncated());
  CHECK(r.top().size() == 1);
  CHECK_THROWS_AS(rank_topk(q, store, 0), InputError);

  // equal scores: ascending id
  store.put(random_rapid(K, 1, SourceId::of_sample(2)));
  r = rank_topk(q, store, 2);
  CHECK(r.ranking[0].id == SourceId::of_sample(2));
  CHECK(r.ranking[1].id == SourceId::of_sample(4));

  // 100-entry store: equals a brute-force full sort, for any thread count
  for (SampleId i = 10; i < 110; ++i) store.put(random_rapid(K, i, SourceId::of_sample(i)));
  std::vector<RankedEntry> brute;
  for (const auto& id : store.ids()) {
    brute.push_back({id, influence_sample(*q.sample, *store.get(id), 1, 1.0)});
  }
  std::sort(brute.begin(), brute.end(), [](const RankedEntry& a, const RankedEntry& b) {
    return a.score != b.score ? a.score > b.score : a.id < b.id;
  });
  r = rank_topk(q, store, 10, 5);
  CHECK(r.ranking == brute);
  CHECK(r.top().size() == 10);
  CHECK(r.bottom().size() == 5);
  CHECK(r.bottom().back().id == brute.back().id);
  CHECK(rank_topk(q, store, 10, 5, 4).ranking == brute);

  auto wrong = q;
  wrong.sample->spec_id = 2;
  CHECK_THROWS_AS(rank_topk(wrong, store, 3), SpecMismatchError);
}

TEST_CASE("query validation") {
  InfluenceQuery q;
  q.epochs = 1;
  q.eta = 1.0;
  CHECK_THROWS_AS(q.validate(), ConfigError);  // no sample sketch
  q.sample = random_rapid(4, 1);
  q.validate();
  q.eta = 0.0;
  CHECK_THROWS_AS(q.validate(), ConfigError);
  q.eta = 1.0;
  q.mode = InfluenceMode::token_sample;
  CHECK_THROWS_AS(q.validate(), ConfigError);
  q.mode = InfluenceMode::sample_token;
  q.tokens = {random_rapid(4, 2)};
  CHECK_THROWS_AS(q.validate(), ConfigError);  // no token index
  q.token_index = 0;
  q.validate();
}

TEST_CASE("decomposition identity on exact gradients") {
  const auto& t = counting_fixture();
  for (std::size_t a = 0; a < 5; ++a) {
    const auto& s = t.data[a];
    const auto& q = t.data[a + 50];
    const auto gs = sample_gradient(t.model, s), gq = sample_gradient(t.model, q);
    const auto ts = token_gradients(t.model, s), tq = token_gradients(t.model, q);
    double sum = 0.0;
    for (const auto& x : ts) {
      for (const auto& y : tq) sum += dot(x.values, y.values);
    }
    sum /= static_cast<double>(ts.size() * tq.size());
    CHECK(testing::close_rel(dot(gs.values, gq.values), sum, 1e-10));
  }
}

TEST_CASE("decomposition identity on sketches with full-precision intermediates") {
  const auto& t = counting_fixture();
  const Compressor c(make_sketch_spec(t.model.parameter_count(), 1024, 20, 3));
  const auto& s = t.data[1];
  const auto& q = t.data[2];
  const auto sample_s = c.compress_full(sample_gradient(t.model, s).values);
  const auto sample_q = c.compress_full(sample_gradient(t.model, q).values);
  std::vector<std::vector<double>> ts, tq;
  for (const auto& g : token_gradients(t.model, s)) ts.push_back(c.compress_full(g.values));
  for (const auto& g : token_gradients(t.model, q)) tq.push_back(c.compress_full(g.values));
  double sum = 0.0;
  for (const auto& x : ts) {
    for (const auto& y : tq) sum += dot(x, y);
  }
  sum /= static_cast<double>(ts.size() * tq.size());
  CHECK(testing::close_rel(dot(sample_s, sample_q), sum, 1e-6));
}

TEST_CASE("oracle scaling and budget") {
  const auto& t = counting_fixture();
  const auto& q = t.data[0];
  const auto base = exact_influence_oracle(t.model, t.data, q, 1, 1.0, InfluenceMode::sample_sample, {}, 10);
  const auto scaled = exact_influence_oracle(t.model, t.data, q, 5, 0.5, InfluenceMode::sample_sample, {}, 10);
  REQUIRE(base.ranking.size() == 100);
  for (std::size_t i = 0; i < base.ranking.size(); ++i) {
    CHECK(base.ranking[i].id == scaled.ranking[i].id);
    CHECK(scaled.ranking[i].score == doctest::Approx(2.5 * base.ranking[i].score).epsilon(1e-12));
  }
  CHECK(base.ranking[0].id == SourceId::of_sample(0));  // self influence of a unit-norm layer stack
  CHECK(base.spec_id == 0);

  OracleOptions tight;
  tight.budget = t.model.parameter_count() * 99;
  CHECK_THROWS_AS(exact_influence_oracle(t.model, t.data, q, 1, 1.0, InfluenceMode::sample_sample, {}, 10, 0, tight),
                  BudgetError);
  OracleOptions threads;
  threads.threads = 3;
  CHECK(exact_influence_oracle(t.model, t.data, q, 1, 1.0, InfluenceMode::sample_sample, {}, 10, 0, threads).ranking ==
        base.ranking);
}

TEST_CASE("lossless configuration matches the oracle in every mode") {
  const auto& t = counting_fixture();
  const auto n = t.model.parameter_count();
  const auto K = padded_length_for(n, 1);
  testing::TempDir dir("lossless");
  for (SignMode signs : {SignMode::all_positive, SignMode::rademacher}) {
    const auto spec = make_sketch_spec(n, K, 0, 4, signs);
    const auto store = build_store(dir / (std::string(to_string(signs)) + ".cache"), t, spec, true);
    const Compressor c(spec);
    const ToySample& query = t.data[7];
    for (auto mode : {InfluenceMode::sample_sample, InfluenceMode::token_sample, InfluenceMode::sample_token,
                      InfluenceMode::token_token}) {
      const std::optional<std::uint32_t> j = uses_query_token(mode) ? std::optional<std::uint32_t>(1) : std::nullopt;
      const auto rapid = rank_topk(make_query(t.model, query, c, mode, j, 5, 0.5), store, 10);
      const auto exact = exact_influence_oracle(t.model, t.data, query, 5, 0.5, mode, j, 10);
      REQUIRE(rapid.ranking.size() == exact.ranking.size());
      std::size_t order_breaks = 0;
      for (std::size_t i = 0; i < exact.ranking.size(); ++i) {
        const double bound = 1e-3 * std::max(1.0, std::abs(exact.ranking[i].score));
        const auto& id = exact.ranking[i].id;
        const auto it = std::find_if(rapid.ranking.begin(), rapid.ranking.end(),
                                     [&](const RankedEntry& e) { return e.id == id; });
        REQUIRE(it != rapid.ranking.end());
        CHECK(std::abs(it->score - exact.ranking[i].score) <= bound);
        // order must agree wherever the exact scores are separated by more than the bound
        const auto& x = exact.ranking;
        const bool separated = (i == 0 || x[i - 1].score - x[i].score > 1e-3) &&
                               (i + 1 == x.size() || x[i].score - x[i + 1].score > 1e-3);
        if (separated && !(rapid.ranking[i].id == id)) ++order_breaks;
      }
      CHECK(order_breaks == 0);
    }
  }
}

TEST_CASE("ranking is invariant to positive scaling of e * eta") {
  const auto& t = counting_fixture();
  const auto spec = make_sketch_spec(t.model.parameter_count(), 4096, 20, 9);
  testing::TempDir dir("scale");
  const auto store = build_store(dir / "c.cache", t, spec, false);
  const Compressor c(spec);
  const auto a = rank_topk(make_query(t.model, t.data[3], c, InfluenceMode::sample_sample, {}, 1, 0.01), store, 10);
  const auto b = rank_topk(make_query(t.model, t.data[3], c, InfluenceMode::sample_sample, {}, 7, 3.0), store, 10);
  for (std::size_t i = 0; i < a.ranking.size(); ++i) CHECK(a.ranking[i].id == b.ranking[i].id);
}

TEST_CASE("make_query errors") {
  const auto& t = counting_fixture();
  const Compressor c(make_sketch_spec(t.model.parameter_count(), 1024, 2, 1));
  CHECK_THROWS_AS(make_query(t.model, t.data[0], c, InfluenceMode::sample_token, 99, 1, 1.0), InputError);
  const auto q = make_query(t.model, t.data[0], c, InfluenceMode::token_sample, {}, 1, 1.0);
  CHECK(q.tokens.size() == t.data[0].generation.size());
  CHECK(q.sample.has_value());
}

TEST_CASE("result file format") {
  InfluenceResult r;
  r.mode = InfluenceMode::sample_sample;
  r.spec_id = 0xff;
  r.epochs = 5;
  r.eta = 0.5;
  r.k = 2;
  r.bottom_k = 1;
  r.ranking = {{SourceId::of_sample(3), 2.0}, {SourceId::of_token(1, 2), 1.0}, {SourceId::of_sample(0), -0.5}};
  const std::string expect =
      "# gradtrace-result v1\n"
      "# mode=sample-sample spec_id=00000000000000ff e=5 eta=0.5 k=2 bottom_k=1 total=3\n"
      "rank\tid\tscore\n"
      "1\t3\t2.000000000000e+00\n"
      "2\t1:2\t1.000000000000e+00\n"
      "# bottom\n"
      "3\t0\t-5.000000000000e-01\n";
  CHECK(format_result(r) == expect);
  testing::TempDir dir("result");
  write_result(dir / "r.tsv", r);
  CHECK(read_file_text(dir / "r.tsv") == expect);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "sheaflab/tasks.hpp"

using namespace sheaflab;

TEST_CASE("ioi generation") {
  SUBCASE("BABA repeats the first name; answer is the second") {
    TaskDataset ds = generate_ioi(100, 3, IoiVariant::baba);
    for (const auto& ex : ds.examples) {
      REQUIRE(ex.variant == "BABA");
      const int first = ex.tokens[0];
      const int second = ex.tokens[1];
      const int repeat = ex.tokens[ex.tokens.size() - 2];
      CHECK(repeat == first);
      CHECK(ex.correct == second);
      CHECK(ex.incorrect == first);
      CHECK(ex.correct != ex.incorrect);
    }
  }
  SUBCASE("ABBA repeats the second name; answer is the first") {
    TaskDataset ds = generate_ioi(100, 3, IoiVariant::abba);
    for (const auto& ex : ds.examples) {
      REQUIRE(ex.variant == "ABBA");
      CHECK(ex.tokens[ex.tokens.size() - 2] == ex.tokens[1]);
      CHECK(ex.correct == ex.tokens[0]);
      CHECK(ex.incorrect == ex.tokens[1]);
    }
  }
  SUBCASE("same seed twice gives identical datasets") {
    TaskDataset a = generate_ioi(64, 9, IoiVariant::mixed);
    TaskDataset b = generate_ioi(64, 9, IoiVariant::mixed);
    REQUIRE(a.examples.size() == b.examples.size());
    for (size_t i = 0; i < a.examples.size(); ++i) {
      CHECK(a.examples[i].tokens == b.examples[i].tokens);
      CHECK(a.examples[i].correct == b.examples[i].correct);
      CHECK((a.examples[i].split == b.examples[i].split));
    }
  }
  SUBCASE("requesting more than the distinct combinations is rejected") {
    CHECK_THROWS_AS(generate_ioi(100000, 1, IoiVariant::mixed), contract_error);
  }
  SUBCASE("variant tags partition a mixed dataset") {
    TaskDataset ds = generate_ioi(200, 5, IoiVariant::mixed);
    for (const auto& ex : ds.examples)
      CHECK((ex.variant == "ABBA" || ex.variant == "BABA"));
  }
  SUBCASE("examples are distinct sequences; eval disjoint from train") {
    TaskDataset ds = generate_ioi(300, 5, IoiVariant::mixed);
    std::set<std::vector<int>> train_seqs, eval_seqs;
    for (const auto& ex : ds.examples)
      (ex.split == Split::train ? train_seqs : eval_seqs).insert(ex.tokens);
    CHECK(train_seqs.size() + eval_seqs.size() == ds.examples.size());
    for (const auto& s : eval_seqs) CHECK(train_seqs.count(s) == 0);
  }
  SUBCASE("token ids are in vocabulary range") {
    TaskDataset ds = generate_ioi(50, 2, IoiVariant::mixed);
    const int V = static_cast<int>(vocabulary().size());
    for (const auto& ex : ds.examples) {
      for (int t : ex.tokens) CHECK((t >= 0 && t < V));
      CHECK(ex.tokens.size() <= 12);
    }
  }
}

TEST_CASE("agreement generation") {
  TaskDataset ds = generate_agreement(50, 4);
  for (const auto& ex : ds.examples) {
    if (ex.variant == "SG") {
      CHECK(ex.correct == token_id("is"));
      CHECK(ex.incorrect == token_id("are"));
      CHECK(ex.tokens[0] == token_id("this"));
    } else {
      REQUIRE(ex.variant == "PL");
      CHECK(ex.correct == token_id("are"));
      CHECK(ex.incorrect == token_id("is"));
      CHECK(ex.tokens[0] == token_id("these"));
    }
  }
  TaskDataset ds2 = generate_agreement(50, 4);
  CHECK(ds.examples[0].tokens == ds2.examples[0].tokens);
}

TEST_CASE("evaluate_accuracy") {
  TaskDataset ds = generate_ioi(200, 6, IoiVariant::mixed);
  const int V = static_cast<int>(vocabulary().size());
  SUBCASE("constant zero logits score 0 (ties count as incorrect)") {
    auto zeros = [&](const std::vector<int>& toks) {
      return Array({static_cast<int>(toks.size()), V});
    };
    CHECK(evaluate_accuracy(zeros, ds) == 0.0);
  }
  SUBCASE("an oracle that boosts the correct token scores 1") {
    // The correct answer is recoverable from the prompt: it is whichever of
    // the first two tokens is not repeated before the final give-word.
    auto oracle = [&](const std::vector<int>& toks) {
      Array logits({static_cast<int>(toks.size()), V});
      const int repeat = toks[toks.size() - 2];
      const int answer = toks[0] == repeat ? toks[1] : toks[0];
      logits.at(static_cast<int>(toks.size()) - 1, answer) = 1.0;
      return logits;
    };
    CHECK(evaluate_accuracy(oracle, ds) == 1.0);
  }
  SUBCASE("random logits sit near chance") {
    TaskDataset big = generate_ioi(600, 7, IoiVariant::mixed);
    Rng rng(99);
    auto random_fn = [&](const std::vector<int>& toks) {
      Array logits({static_cast<int>(toks.size()), V});
      for (double& v : logits.data) v = rng.normal();
      return logits;
    };
    double acc = evaluate_accuracy(random_fn, big);
    // 3-sigma binomial bound around 0.5 at n=600 is about 0.061.
    CHECK(std::fabs(acc - 0.5) < 0.075);
  }
}

TEST_CASE("filter_solved") {
  ModelConfig cfg = ModelConfig::toy(static_cast<int>(vocabulary().size()));
  TaskDataset ds = generate_ioi(60, 8, IoiVariant::mixed);
  SUBCASE("adversarial model that is always wrong is rejected") {
    // Zero model: every margin is a tie, nothing retained.
    Parameters p = init_model(cfg, 1);
    for_each_param(p, [](const std::string&, Array& a) {
      std::fill(a.data.begin(), a.data.end(), 0.0);
    });
    CHECK_THROWS_AS(filter_solved(p, cfg, ds), contract_error);
  }
  SUBCASE("full model scores exactly 1.0 on the filtered set") {
    Parameters p = init_model(cfg, 2);
    TaskDataset kept = filter_solved(p, cfg, ds);
    CHECK(evaluate_accuracy(full_model_fn(p, cfg), kept) == 1.0);
    CHECK(kept.examples.size() <= ds.examples.size());
  }
}

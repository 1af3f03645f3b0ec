#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "sheaflab/model.hpp"

namespace sheaflab {

// Task-local word-level vocabulary: one token per word, no subword effects.
inline const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> vocab = {
      // names (single tokens)
      "alice", "bob", "carol", "david", "emma", "frank", "grace", "henry",
      // ioi context words
      "went", "to", "the", "store", "park", "argued", "at", "office", "talked", "house",
      "worked", "shop", "played", "near", "lake", "gave", "said", "handed", "passed",
      // number-agreement words
      "this", "these", "cat", "cats", "dog", "dogs", "bird", "birds", "here", "now",
      "today", "is", "are"};
  return vocab;
}

inline int token_id(const std::string& word) {
  const auto& v = vocabulary();
  auto it = std::find(v.begin(), v.end(), word);
  require(it != v.end(), "unknown word: " + word);
  return static_cast<int>(it - v.begin());
}

inline std::vector<int> token_ids(const std::vector<std::string>& words) {
  std::vector<int> out;
  out.reserve(words.size());
  for (const auto& w : words) out.push_back(token_id(w));
  return out;
}

enum class Split { train, eval };

struct TaskExample {
  std::vector<int> tokens;
  int correct = -1;
  int incorrect = -1;
  int template_id = 0;
  std::string variant;  // "ABBA" / "BABA" for ioi, "SG" / "PL" for agreement
  Split split = Split::train;
};

struct TaskDataset {
  std::string task;
  std::uint64_t seed = 0;
  std::vector<TaskExample> examples;

  TaskDataset subset(Split s) const {
    TaskDataset out{task, seed, {}};
    for (const auto& ex : examples)
      if (ex.split == s) out.examples.push_back(ex);
    return out;
  }
};

enum class IoiVariant { abba, baba, mixed };

namespace detail {

struct IoiTemplate {
  std::vector<std::string> context;
  std::string give;
};

inline const std::vector<IoiTemplate>& ioi_templates() {
  static const std::vector<IoiTemplate> templates = {
      {{"went", "to", "the", "store"}, "gave"},
      {{"went", "to", "the", "park"}, "gave"},
      {{"argued", "at", "the", "office"}, "said"},
      {{"talked", "at", "the", "house"}, "said"},
      {{"worked", "at", "the", "shop"}, "handed"},
      {{"played", "near", "the", "lake"}, "passed"}};
  return templates;
}

inline const std::vector<std::string>& name_pool() {
  static const std::vector<std::string> names = {"alice", "bob",   "carol", "david",
                                                 "emma",  "frank", "grace", "henry"};
  return names;
}

}  // namespace detail

/// Prompts of shape [name_x] [name_y] [ctx...] [name_repeat] [give]; the
/// correct answer is the name that is not repeated, the distractor is the
/// repeated one. ABBA repeats the second name, BABA repeats the first.
/// Examples are distinct token sequences; the eval split is therefore
/// disjoint from the train split. Deterministic per seed.
inline TaskDataset generate_ioi(int n, std::uint64_t seed, IoiVariant variant,
                                double train_fraction = 0.75) {
  const auto& names = detail::name_pool();
  const auto& templates = detail::ioi_templates();
  require(names.size() >= 4, "generate_ioi: name pool too small");

  struct Combo {
    int first, second, tmpl;
    bool repeat_first;  // true -> BABA
  };
  std::vector<Combo> combos;
  for (int a = 0; a < static_cast<int>(names.size()); ++a)
    for (int b = 0; b < static_cast<int>(names.size()); ++b) {
      if (a == b) continue;
      for (int t = 0; t < static_cast<int>(templates.size()); ++t) {
        if (variant != IoiVariant::abba) combos.push_back({a, b, t, true});
        if (variant != IoiVariant::baba) combos.push_back({a, b, t, false});
      }
    }
  require(n >= 1, "generate_ioi: n must be >= 1");
  require(n <= static_cast<int>(combos.size()),
          "generate_ioi: requested " + std::to_string(n) + " examples but only " +
              std::to_string(combos.size()) + " distinct combinations exist");

  Rng rng(seed);
  for (size_t i = combos.size(); i > 1; --i)
    std::swap(combos[i - 1], combos[rng.below(i)]);

  TaskDataset ds{"ioi", seed, {}};
  const int n_train = static_cast<int>(train_fraction * n);
  for (int i = 0; i < n; ++i) {
    const Combo& c = combos[static_cast<size_t>(i)];
    const auto& tpl = templates[static_cast<size_t>(c.tmpl)];
    TaskExample ex;
    std::vector<std::string> words = {names[static_cast<size_t>(c.first)],
                                      names[static_cast<size_t>(c.second)]};
    words.insert(words.end(), tpl.context.begin(), tpl.context.end());
    const int repeated = c.repeat_first ? c.first : c.second;
    const int answer = c.repeat_first ? c.second : c.first;
    words.push_back(names[static_cast<size_t>(repeated)]);
    words.push_back(tpl.give);
    ex.tokens = token_ids(words);
    ex.correct = token_id(names[static_cast<size_t>(answer)]);
    ex.incorrect = token_id(names[static_cast<size_t>(repeated)]);
    ex.template_id = c.tmpl;
    ex.variant = c.repeat_first ? "BABA" : "ABBA";
    ex.split = i < n_train ? Split::train : Split::eval;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

/// Number-agreement prompts [det_num] [noun_num] [filler...]; the correct
/// continuation matches the subject's number ("is" vs "are").
inline TaskDataset generate_agreement(int n, std::uint64_t seed, double train_fraction = 0.75) {
  static const std::vector<std::pair<std::string, std::string>> nouns = {
      {"cat", "cats"}, {"dog", "dogs"}, {"bird", "birds"}};
  static const std::vector<std::vector<std::string>> fillers = {
      {"here"}, {"now"}, {"today"}, {"here", "now"}, {"here", "today"}, {"now", "here"},
      {"now", "today"}, {"today", "here"}, {"today", "now"}};

  struct Combo {
    int noun, filler;
    bool plural;
  };
  std::vector<Combo> combos;
  for (int noun = 0; noun < static_cast<int>(nouns.size()); ++noun)
    for (int f = 0; f < static_cast<int>(fillers.size()); ++f)
      for (int pl = 0; pl < 2; ++pl) combos.push_back({noun, f, pl == 1});
  require(n >= 1, "generate_agreement: n must be >= 1");
  require(n <= static_cast<int>(combos.size()),
          "generate_agreement: requested " + std::to_string(n) + " examples but only " +
              std::to_string(combos.size()) + " distinct combinations exist");

  Rng rng(seed);
  for (size_t i = combos.size(); i > 1; --i)
    std::swap(combos[i - 1], combos[rng.below(i)]);

  TaskDataset ds{"agreement", seed, {}};
  const int n_train = static_cast<int>(train_fraction * n);
  for (int i = 0; i < n; ++i) {
    const Combo& c = combos[static_cast<size_t>(i)];
    TaskExample ex;
    std::vector<std::string> words = {c.plural ? "these" : "this",
                                      c.plural ? nouns[static_cast<size_t>(c.noun)].second
                                               : nouns[static_cast<size_t>(c.noun)].first};
    const auto& fill = fillers[static_cast<size_t>(c.filler)];
    words.insert(words.end(), fill.begin(), fill.end());
    ex.tokens = token_ids(words);
    ex.correct = token_id(c.plural ? "are" : "is");
    ex.incorrect = token_id(c.plural ? "is" : "are");
    ex.template_id = c.filler;
    ex.variant = c.plural ? "PL" : "SG";
    ex.split = i < n_train ? Split::train : Split::eval;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

using LogitFn = std::function<Array(const std::vector<int>&)>;

/// Fraction of examples with answer_margin > 0; ties count as incorrect.
inline double evaluate_accuracy(const LogitFn& logit_fn, const TaskDataset& ds) {
  require(!ds.examples.empty(), "evaluate_accuracy: empty dataset");
  size_t correct = 0;
  for (const auto& ex : ds.examples) {
    Array logits = logit_fn(ex.tokens);
    if (answer_margin(logits, ex.correct, ex.incorrect) > 0.0) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.examples.size());
}

inline LogitFn full_model_fn(const Parameters& p, const ModelConfig& cfg) {
  return [&p, cfg](const std::vector<int>& tokens) { return forward_full(p, cfg, tokens).logits; };
}

/// Keeps only the examples the full model answers correctly.
inline TaskDataset filter_solved(const Parameters& p, const ModelConfig& cfg,
                                 const TaskDataset& ds) {
  TaskDataset out{ds.task, ds.seed, {}};
  for (const auto& ex : ds.examples) {
    Array logits = forward_full(p, cfg, ex.tokens).logits;
    if (answer_margin(logits, ex.correct, ex.incorrect) > 0.0) out.examples.push_back(ex);
  }
  require(!out.examples.empty(),
          "filter_solved: base model answers no example correctly; nothing retained");
  return out;
}

}  // namespace sheaflab

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

#include "mtlforge/error.hpp"
#include "mtlforge/numerics/ops.hpp"
#include "mtlforge/training.hpp"
#include "support/synthetic.hpp"

using namespace mtlforge;
using namespace mtlforge::training;
using model::EncoderConfig;
using model::ModelBundle;

namespace {

EncoderConfig tiny(std::size_t vocab) {
  EncoderConfig c;
  c.vocab_size = vocab;
  c.d_model = 16;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ff = 32;
  c.max_len = 12;
  c.dropout = 0.0;
  return c;
}

struct Fixture {
  std::vector<corpus::TaskDataset> tasks;
  tokenizer::Vocab vocab;
  ModelBundle bundle;
};

Fixture keyword_fixture(std::size_t n = 16, std::uint64_t seed = 1) {
  Fixture f;
  f.tasks = testing::two_keyword_tasks(n, seed);
  const auto texts = testing::all_texts(f.tasks);
  f.vocab = tokenizer::Vocab::build(texts);
  f.bundle = ModelBundle::create(tiny(f.vocab.size()), seed);
  for (const auto& t : f.tasks) f.bundle.add_head(t.name, t.label_set, seed);
  return f;
}

bool same_params(const ModelBundle& a, const ModelBundle& b) {
  if (a.params().size() != b.params().size()) return false;
  for (const auto& [name, t] : a.params()) {
    const auto& u = b.param(name);
    if (!std::equal(t.data().begin(), t.data().end(), u.data().begin(), u.data().end())) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("mask_tokens limit cases") {
  std::vector<std::int64_t> ids{2, 10, 11, 12, 3, 0, 0};
  std::vector<std::int64_t> mask{1, 1, 1, 1, 1, 0, 0};
  numerics::Rng rng(1);
  auto none = mask_tokens(ids, mask, 20, 0.0, {}, rng);
  CHECK(none.input_ids == ids);
  CHECK(std::all_of(none.labels.begin(), none.labels.end(), [](auto l) { return l == numerics::kIgnoreIndex; }));

  auto all = mask_tokens(ids, mask, 20, 1.0, {1.0, 0.0, 0.0}, rng);
  CHECK(all.input_ids == std::vector<std::int64_t>{2, 4, 4, 4, 3, 0, 0});
  CHECK(all.labels == std::vector<std::int64_t>{-100, 10, 11, 12, -100, -100, -100});
}

TEST_CASE("mask_tokens never selects special or padded positions and replaces with regular ids") {
  numerics::Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 3 + rng.below(10);
    std::vector<std::int64_t> ids{tokenizer::kCls}, mask{1};
    const std::size_t real = rng.below(len - 1);
    for (std::size_t i = 0; i < real; ++i) {
      ids.push_back(1 + static_cast<std::int64_t>(rng.below(29)));
      if (ids.back() == tokenizer::kCls || ids.back() == tokenizer::kSep || ids.back() == tokenizer::kMask) ids.back() = 7;
      mask.push_back(1);
    }
    ids.push_back(tokenizer::kSep);
    mask.push_back(1);
    while (ids.size() < len + 1) {
      ids.push_back(tokenizer::kPad);
      mask.push_back(0);
    }
    auto out = mask_tokens(ids, mask, 30, 0.5, {}, rng);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == tokenizer::kCls || ids[i] == tokenizer::kSep || mask[i] == 0) {
        CHECK(out.labels[i] == numerics::kIgnoreIndex);
        CHECK(out.input_ids[i] == ids[i]);
      }
      if (out.labels[i] != numerics::kIgnoreIndex) {
        CHECK(out.labels[i] == ids[i]);
        CHECK((out.input_ids[i] == tokenizer::kMask || out.input_ids[i] >= 5 || out.input_ids[i] == ids[i]));
      }
    }
  }
}

TEST_CASE("mask_tokens selection statistics") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    numerics::Rng rng(seed);
    MaskStats st;
    std::vector<std::int64_t> ids(102, 9), mask(102, 1);
    ids.front() = tokenizer::kCls;
    ids.back() = tokenizer::kSep;
    while (st.eligible < 20000) mask_tokens(ids, mask, 50, 0.15, {}, rng, &st);
    const double sel = static_cast<double>(st.selected) / static_cast<double>(st.eligible);
    CHECK(std::abs(sel - 0.15) <= 0.02);
    const double s = static_cast<double>(st.selected);
    CHECK(std::abs(st.masked / s - 0.8) <= 0.03);
    CHECK(std::abs(st.randomized / s - 0.1) <= 0.03);
    CHECK(std::abs(st.kept / s - 0.1) <= 0.03);
  }
}

TEST_CASE("convergence rule") {
  const std::vector<double> decreasing{5, 4, 3, 2, 1, 0.5, 0.25};
  CHECK_FALSE(check_convergence(decreasing));
  const std::vector<double> plateau{3, 2, 2, 2, 2, 2, 2};
  CHECK(check_convergence(plateau));
  const std::vector<double> short_plateau{2, 2, 2, 2, 2};
  CHECK_FALSE(check_convergence(short_plateau));
  const std::vector<double> late_dip{3, 3, 3, 3, 3, 2.9};
  CHECK_FALSE(check_convergence(late_dip));
  CHECK(check_convergence(plateau, 1));

  // Convergence at patience p implies convergence at every smaller patience.
  numerics::Rng rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> losses;
    const std::size_t n = 1 + rng.below(12);
    for (std::size_t i = 0; i < n; ++i) losses.push_back(static_cast<double>(rng.below(4)));
    for (std::size_t p = 2; p <= 8; ++p) {
      if (check_convergence(losses, p)) CHECK(check_convergence(losses, p - 1));
    }
  }
}

TEST_CASE("mtl schedule counting, coverage and replay") {
  numerics::Rng rng(4);
  const std::vector<std::size_t> sizes{8, 4};
  auto sched = build_mtl_schedule(sizes, 4, rng);
  CHECK(sched.size() == 3);

  numerics::Rng fuzz(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::size_t> mix;
    const std::size_t k = 1 + fuzz.below(5);
    for (std::size_t t = 0; t < k; ++t) mix.push_back(1 + fuzz.below(30));
    const std::size_t bs = 1 + fuzz.below(8);
    numerics::Rng r(fuzz.next_u64());
    auto s = build_mtl_schedule(mix, bs, r);
    std::map<std::pair<std::size_t, std::size_t>, int> seen;
    for (const auto& b : s) {
      CHECK(!b.examples.empty());
      CHECK(b.examples.size() <= bs);
      for (auto e : b.examples) ++seen[{b.task, e}];
    }
    std::size_t expected = 0;
    for (std::size_t t = 0; t < k; ++t) {
      for (std::size_t e = 0; e < mix[t]; ++e) CHECK(seen[{t, e}] == 1);
      expected += mix[t];
    }
    CHECK(seen.size() == expected);
  }

  auto order = [&](std::uint64_t seed) {
    numerics::Rng r(seed);
    std::vector<std::size_t> flat;
    for (const auto& b : build_mtl_schedule(std::vector<std::size_t>{20, 12, 7}, 4, r)) {
      flat.push_back(b.task);
      flat.insert(flat.end(), b.examples.begin(), b.examples.end());
    }
    return flat;
  };
  CHECK(order(8) == order(8));
  CHECK(order(8) != order(9));
}

TEST_CASE("mlm pretraining lowers validation loss") {
  auto texts = testing::template_sentences(200, numerics::Rng(6));
  auto vocab = tokenizer::Vocab::build(texts);
  auto bundle = ModelBundle::create(tiny(vocab.size()), 6);
  PretrainConfig cfg = PretrainConfig::tapt();
  cfg.lr = 3e-3;
  cfg.max_epochs = 3;
  cfg.seed = 6;
  auto res = pretrain_mlm(bundle, texts, vocab, cfg);
  REQUIRE(!res.curve.empty());
  CHECK(res.curve.back().val_loss < res.initial_val_loss);
  CHECK(res.best_val_loss <= res.curve.back().val_loss);
  CHECK(res.curve_csv().rfind("epoch,step,train_loss,val_loss\n", 0) == 0);

  cfg.max_epochs = 0;
  auto none = pretrain_mlm(bundle, texts, vocab, cfg);
  CHECK(none.curve.empty());
  CHECK(same_params(none.best, bundle));

  CHECK_THROWS_AS(pretrain_mlm(bundle, {}, vocab, cfg), ConfigError);
}

TEST_CASE("dapt+tapt is two chained pretraining runs") {
  auto domain = testing::template_sentences(60, numerics::Rng(7));
  auto task = testing::template_sentences(40, numerics::Rng(8));
  std::vector<std::string> both = domain;
  both.insert(both.end(), task.begin(), task.end());
  auto vocab = tokenizer::Vocab::build(both);
  auto bundle = ModelBundle::create(tiny(vocab.size()), 7);
  PretrainConfig t = PretrainConfig::tapt(), d = PretrainConfig::dapt();
  t.lr = d.lr = 1e-3;
  t.max_epochs = d.max_epochs = 2;
  auto chained = run_pretraining(bundle, PretrainMode::DaptTapt, task, domain, vocab, t, d);
  REQUIRE(chained.size() == 2);
  auto first = pretrain_mlm(bundle, domain, vocab, d);
  auto second = pretrain_mlm(first.best, task, vocab, t);
  CHECK(same_params(chained[1].best, second.best));
  CHECK(parse_pretrain_mode("dapt+tapt") == PretrainMode::DaptTapt);
  CHECK_THROWS_AS(parse_pretrain_mode("xyz"), ConfigError);
}

TEST_CASE("batch loss equals weight times head cross entropy") {
  auto f = keyword_fixture(8);
  MtlConfig cfg;
  cfg.batch_size = 8;
  cfg.epochs = 1;
  cfg.dev_fraction = 0.0;
  cfg.lr = 1e-3;
  cfg.loss_weights["sent"] = 0.37;
  auto res = train_mtl(f.bundle, {f.tasks[0]}, f.vocab, cfg);
  REQUIRE(res.report.step_losses.size() == 1);

  std::vector<tokenizer::Encoding> enc;
  for (const auto& ex : f.tasks[0].examples) enc.push_back(tokenizer::encode(ex.text, f.vocab, 12));
  std::vector<std::int64_t> y;
  for (auto l : f.tasks[0].label_indices()) y.push_back(static_cast<std::int64_t>(l));
  const auto logits = model::classify(f.bundle, "sent", model::make_batch(enc));
  // Manual cross entropy from the logits.
  double ce = 0.0;
  for (std::size_t r = 0; r < y.size(); ++r) {
    const double a = logits.data()[2 * r], b = logits.data()[2 * r + 1];
    const double m = std::max(a, b);
    ce += m + std::log(std::exp(a - m) + std::exp(b - m)) - logits.data()[2 * r + static_cast<std::size_t>(y[r])];
  }
  ce /= static_cast<double>(y.size());
  CHECK(std::abs(res.report.step_losses[0] - 0.37 * ce) <= 1e-12);
}

TEST_CASE("a zero-weight task leaves its head untouched") {
  auto f = keyword_fixture();
  MtlConfig cfg;
  cfg.epochs = 2;
  cfg.lr = 1e-3;
  cfg.loss_weights = {{"sent", 1.0}, {"topic", 0.0}};
  auto res = train_mtl(f.bundle, f.tasks, f.vocab, cfg);
  for (const char* name : {"head.topic.w", "head.topic.b"}) {
    const auto& before = f.bundle.param(name);
    const auto& after = res.best.param(name);
    CHECK(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
  }
  CHECK_FALSE(same_params(res.best, f.bundle));

  // Direct check on a single zero-weighted batch.
  auto b = f.bundle.clone();
  std::vector<tokenizer::Encoding> enc{tokenizer::encode(f.tasks[1].examples[0].text, f.vocab, 12)};
  std::vector<std::int64_t> y{0};
  numerics::scale(numerics::cross_entropy(model::classify(b, "topic", model::make_batch(enc)), y), 0.0).backward();
  for (double g : b.param("head.topic.w").grad()) CHECK(g == 0.0);

  cfg.loss_weights = {{"sent", 0.0}, {"topic", 0.0}};
  CHECK_THROWS_AS(train_mtl(f.bundle, f.tasks, f.vocab, cfg), ConfigError);
}

TEST_CASE("single-task mtl and fine-tuning follow the same trace") {
  auto f = keyword_fixture();
  MtlConfig cfg;
  cfg.lr = cfg.ft_lr = 2e-3;
  cfg.epochs = cfg.ft_epochs = 3;
  cfg.seed = 11;
  auto a = train_mtl(f.bundle, {f.tasks[0]}, f.vocab, cfg);
  auto b = finetune(f.bundle, f.tasks[0], f.vocab, cfg);
  CHECK(a.report.step_losses == b.report.step_losses);
  CHECK(same_params(a.best, b.best));
  CHECK(b.report.regime == "finetune");
}

TEST_CASE("fine-tuning defaults, zero epochs, errors and progress") {
  auto f = keyword_fixture(32);
  MtlConfig cfg;
  CHECK(cfg.ft_lr == 1e-6);
  auto zero = cfg;
  zero.ft_epochs = 0;
  auto r0 = finetune(f.bundle, f.tasks[0], f.vocab, zero);
  CHECK(same_params(r0.best, f.bundle));
  CHECK(r0.report.history.empty());

  auto run = finetune(f.bundle, f.tasks[0], f.vocab, cfg);
  CHECK(run.report.lr == 1e-6);
  CHECK(nlohmann::json::parse(run.report.to_json())["lr"].get<double>() == 1e-6);

  auto fast = cfg;
  fast.ft_lr = 3e-3;
  fast.ft_epochs = 8;
  auto trained = finetune(f.bundle, f.tasks[0], f.vocab, fast);
  const auto& h = trained.report.history;
  CHECK(h.back().train_loss < h.front().train_loss);

  corpus::TaskDataset unknown = f.tasks[0];
  unknown.name = "xyz";
  CHECK_THROWS_AS(finetune(f.bundle, unknown, f.vocab, cfg), LookupError);
  unknown.label_set = {"a", "b", "c"};
  unknown.examples.clear();
  CHECK_THROWS_AS(train_mtl(f.bundle, {unknown}, f.vocab, cfg), ConfigError);
}

TEST_CASE("mtl training is reproducible and reports per epoch") {
  auto f = keyword_fixture();
  MtlConfig cfg;
  cfg.lr = 2e-3;
  cfg.epochs = 3;
  cfg.seed = 12;
  auto a = train_mtl(f.bundle, f.tasks, f.vocab, cfg);
  auto b = train_mtl(f.bundle, f.tasks, f.vocab, cfg);
  CHECK(a.report.step_losses == b.report.step_losses);
  CHECK(same_params(a.best, b.best));
  CHECK(a.report.to_json() == b.report.to_json());
  CHECK(a.report.history.size() == 3);
  // 16 examples per task carve into 14 train / 2 dev; batches of 4 -> 4 per task.
  CHECK(a.report.step_losses.size() == 3 * 8);
  const auto j = nlohmann::json::parse(a.report.to_json());
  CHECK(j["history"][0]["dev_macro_f1"].contains("topic"));
  CHECK(j["best_epoch"].get<std::size_t>() >= 1);
  const std::string csv = a.report.loss_curve_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
}

TEST_CASE("predict and evaluate agree with metrics") {
  auto f = keyword_fixture();
  auto preds = predict(f.bundle, "sent", f.tasks[0].texts(), f.vocab);
  auto golds = f.tasks[0].label_indices();
  CHECK(evaluate(f.bundle, f.tasks[0], f.vocab).macro_f1 == metrics::macro_f1(preds, golds, f.tasks[0].label_set).macro_f1);
}

// Pseudo-perplexity and the template-based association score.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "distillforge/eval.hpp"

#include "test_support.hpp"

using namespace distillforge;

namespace {

Tokenizer word_tokenizer() {
  std::vector<std::string> corpus;
  for (int i = 0; i < 30; ++i) {
    corpus.push_back("hij is sterk");
    corpus.push_back("zij is slim");
    corpus.push_back("hij was hier");
    corpus.push_back("zij was daar");
  }
  auto [vocab, merges] = train_bpe(corpus, 150);
  return Tokenizer{std::move(vocab), std::move(merges)};
}

EncoderConfig eval_config(std::size_t vocab_size) {
  EncoderConfig config;
  config.d = 1;
  config.a = 2;
  config.h = 16;
  config.i = 24;
  config.vocab_size = vocab_size;
  config.max_positions = 16;
  return config;
}

std::size_t ordinary_count(const std::vector<std::int32_t>& ids) {
  std::size_t n = 0;
  for (const std::int32_t id : ids) n += (id > kMaskId) ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("an all-zero model scores pseudo-perplexity equal to the vocabulary") {
  // Zero weights make every logit identical, so each prediction is uniform
  // and exp(mean nll) collapses to the vocabulary size.
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = zeros_model<float>(eval_config(tokenizer.vocab_size()));

  const PpplResult result =
      pseudo_perplexity(model, {"hij is sterk", "zij was daar"}, tokenizer);
  const double v = static_cast<double>(tokenizer.vocab_size());
  CHECK_THAT(result.pppl, Catch::Matchers::WithinRel(v, 1e-5));
  REQUIRE(result.per_sequence.size() == 2);
  CHECK_THAT(result.per_sequence[0], Catch::Matchers::WithinRel(v, 1e-5));
  CHECK_THAT(result.per_sequence[1], Catch::Matchers::WithinRel(v, 1e-5));
  CHECK(result.sequences == 2);
  CHECK(result.predictions == ordinary_count(tokenizer.encode("hij is sterk")) +
                                  ordinary_count(tokenizer.encode("zij was daar")));
}

TEST_CASE("pseudo-perplexity matches a mask-one-position-at-a-time oracle") {
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = init_random<float>(eval_config(tokenizer.vocab_size()), 31);
  const std::vector<std::string> sequences = {"hij is sterk", "zij is slim"};

  // Oracle: single-row batches, long-double softmax, aggregated by hand.
  long double total_nll = 0.0L;
  std::size_t total_predictions = 0;
  std::vector<double> expected_per_seq;
  for (const std::string& text : sequences) {
    const std::vector<std::int32_t> ids = tokenizer.encode(text);
    long double nll = 0.0L;
    std::size_t predictions = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (ids[p] <= kMaskId) continue;
      IdBatch batch;
      batch.batch = 1;
      batch.len = ids.size();
      batch.ids = ids;
      batch.ids[p] = kMaskId;
      const std::vector<std::uint8_t> mask(ids.size(), 1);
      const ForwardResult out = forward(model, batch, mask);
      const Tensor logits = mlm_logits(model, out.final_hidden());

      std::vector<double> row(tokenizer.vocab_size());
      for (std::size_t c = 0; c < row.size(); ++c) {
        row[c] = static_cast<double>(logits.values()[p * row.size() + c]);
      }
      const std::vector<double> probs = testsupport::softmax_reference(row, 1.0);
      nll -= std::log(static_cast<long double>(probs[static_cast<std::size_t>(ids[p])]));
      ++predictions;
    }
    expected_per_seq.push_back(
        static_cast<double>(std::exp(nll / static_cast<long double>(predictions))));
    total_nll += nll;
    total_predictions += predictions;
  }
  const double expected_pppl =
      static_cast<double>(std::exp(total_nll / static_cast<long double>(total_predictions)));

  const PpplResult result = pseudo_perplexity(model, sequences, tokenizer);
  CHECK_THAT(result.pppl, Catch::Matchers::WithinRel(expected_pppl, 1e-4));
  REQUIRE(result.per_sequence.size() == 2);
  CHECK_THAT(result.per_sequence[0], Catch::Matchers::WithinRel(expected_per_seq[0], 1e-4));
  CHECK_THAT(result.per_sequence[1], Catch::Matchers::WithinRel(expected_per_seq[1], 1e-4));
  CHECK(result.predictions == total_predictions);
}

TEST_CASE("sequences with nothing to score count as perplexity one") {
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = zeros_model<float>(eval_config(tokenizer.vocab_size()));

  const PpplResult result = pseudo_perplexity(model, {"hij is sterk", ""}, tokenizer);
  CHECK(result.per_sequence[1] == 1.0);
  CHECK(result.predictions == ordinary_count(tokenizer.encode("hij is sterk")));
}

TEST_CASE("pseudo-perplexity rejects unusable inputs") {
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = zeros_model<float>(eval_config(tokenizer.vocab_size()));

  try {
    pseudo_perplexity(model, {}, tokenizer);
    FAIL("expected empty input to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
  }

  try {
    pseudo_perplexity(model, {""}, tokenizer);
    FAIL("expected unscorable input to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }

  EncoderConfig cramped = eval_config(tokenizer.vocab_size());
  cramped.max_positions = 3;
  const auto tiny = zeros_model<float>(cramped);
  try {
    pseudo_perplexity(tiny, {"hij is sterk en slim"}, tokenizer);
    FAIL("expected overlong sequence to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::data);
  }
}

TEST_CASE("bias templates parse slots and attribute spans") {
  const BiasTemplate simple = parse_bias_template("de <mask> is [[sterk]]");
  CHECK(simple.words == std::vector<std::string>{"de", "<mask>", "is", "sterk"});
  CHECK(simple.slot_word == 1);
  CHECK(simple.attribute_words == std::vector<std::size_t>{3});
  CHECK(simple.text == "de <mask> is [[sterk]]");

  const BiasTemplate multi = parse_bias_template("de <mask> is [[heel sterk]] vandaag");
  CHECK(multi.slot_word == 1);
  CHECK(multi.attribute_words == std::vector<std::size_t>{3, 4});
  CHECK(multi.words.size() == 6);
}

TEST_CASE("malformed bias templates are parse errors") {
  const std::vector<std::string> bad = {
      "de <mask> is sterk",             // no attribute span
      "de kat is [[sterk]]",            // no slot
      "de <mask> en <mask> [[x]]",      // two slots
      "[[<mask>]] is [[sterk]]",        // slot inside an attribute
      "de <mask> [[heel [[erg]] x]]",   // nested open
      "de <mask> is erg]] sterk",       // close without open
      "de <mask> is [[heel sterk",      // never closed
      "de <mask> is [[]]",              // empty attribute word
  };
  for (const std::string& line : bad) {
    INFO(line);
    try {
      parse_bias_template(line);
      FAIL("expected a parse error");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::parse);
    }
  }
}

TEST_CASE("template files skip blank lines and tolerate crlf") {
  testsupport::TempDir dir("bias");
  testsupport::write_file(dir.path / "templates.txt",
                          "de <mask> is [[sterk]]\r\n"
                          "\n"
                          "de <mask> was [[slim]]\n"
                          "   \n");
  const auto templates = load_bias_templates(dir.file("templates.txt"));
  REQUIRE(templates.size() == 2);
  CHECK(templates[0].text == "de <mask> is [[sterk]]");
  CHECK(templates[1].words.back() == "slim");

  CHECK_THROWS_AS(load_bias_templates(dir.file("absent.txt")), Error);
}

TEST_CASE("swapping the targets negates every bias score") {
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = init_random<float>(eval_config(tokenizer.vocab_size()), 32);
  const std::vector<BiasTemplate> templates = {
      parse_bias_template("<mask> is [[sterk]]"),
      parse_bias_template("<mask> was [[slim]]"),
  };

  const BiasScoreReport forward_report = bias_score(model, tokenizer, templates, "hij", "zij");
  const BiasScoreReport swapped = bias_score(model, tokenizer, templates, "zij", "hij");
  REQUIRE(forward_report.entries.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(forward_report.entries[i].assoc_t1 == swapped.entries[i].assoc_t2);
    CHECK(forward_report.entries[i].assoc_t2 == swapped.entries[i].assoc_t1);
    CHECK_THAT(forward_report.entries[i].score,
               Catch::Matchers::WithinAbs(-swapped.entries[i].score, 1e-12));
  }
  CHECK_THAT(forward_report.aggregate,
             Catch::Matchers::WithinAbs(-swapped.aggregate, 1e-12));
}

TEST_CASE("a model that ignores attributes has no measurable bias") {
  // Uniform predictions make the slot distribution identical with and
  // without the attribute words, so each log ratio cancels.
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = zeros_model<float>(eval_config(tokenizer.vocab_size()));
  const std::vector<BiasTemplate> templates = {parse_bias_template("<mask> is [[sterk]]")};

  const BiasScoreReport report = bias_score(model, tokenizer, templates, "hij", "zij");
  CHECK_THAT(report.entries[0].assoc_t1, Catch::Matchers::WithinAbs(0.0, 1e-9));
  CHECK_THAT(report.entries[0].assoc_t2, Catch::Matchers::WithinAbs(0.0, 1e-9));
  CHECK_THAT(report.aggregate, Catch::Matchers::WithinAbs(0.0, 1e-9));
  CHECK_FALSE(report.entries[0].clamped);
}

TEST_CASE("vanishing probabilities are floored and flagged") {
  const Tokenizer tokenizer = word_tokenizer();
  auto model = zeros_model<float>(eval_config(tokenizer.vocab_size()));
  const std::int32_t target = single_token_id("hij", tokenizer);
  model.mlm_out_bias.values()[static_cast<std::size_t>(target)] = -80.0f;

  const std::vector<BiasTemplate> templates = {parse_bias_template("<mask> is [[sterk]]")};
  const BiasScoreReport report = bias_score(model, tokenizer, templates, "hij", "zij");
  CHECK(report.entries[0].clamped);
}

TEST_CASE("bias targets must be single in-vocabulary tokens") {
  const Tokenizer tokenizer = word_tokenizer();

  try {
    single_token_id("hijhijhij", tokenizer);
    FAIL("expected a multi-piece target to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
    CHECK(std::string(e.what()).find("need exactly 1") != std::string::npos);
  }

  // A merge whose product was never added to the vocabulary produces a
  // single piece with no id.
  Tokenizer handmade;
  handmade.merges.add(word_marker(), "q");
  try {
    single_token_id("q", handmade);
    FAIL("expected an out-of-vocabulary target to throw");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::invalid_argument);
    CHECK(std::string(e.what()).find("outside the vocabulary") != std::string::npos);
  }
}

TEST_CASE("bias reports render as csv with quoted templates") {
  BiasScoreReport report;
  report.entries.resize(2);
  report.entries[0].template_text = "zij zegt \"ja\" <mask> [[x]]";
  report.entries[0].assoc_t1 = 0.25;
  report.entries[0].assoc_t2 = -0.5;
  report.entries[0].score = 0.75;
  report.entries[1].template_text = "gewoon";
  report.entries[1].score = -0.25;
  report.aggregate = 0.25;

  const std::string csv = bias_report_csv(report);
  std::vector<std::string> lines;
  std::size_t start = 0;
  while (start < csv.size()) {
    const std::size_t nl = csv.find('\n', start);
    lines.push_back(csv.substr(start, nl - start));
    start = nl + 1;
  }
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "template,assoc_t1,assoc_t2,score");
  CHECK(lines[1] == "\"zij zegt \"\"ja\"\" <mask> [[x]]\"," + std::to_string(0.25) + ',' +
                        std::to_string(-0.5) + ',' + std::to_string(0.75));
  CHECK(lines[2].rfind("\"gewoon\",", 0) == 0);
  CHECK(lines[3] == "aggregate,,," + std::to_string(0.25));
}

TEST_CASE("bias scoring requires at least one template") {
  const Tokenizer tokenizer = word_tokenizer();
  const auto model = zeros_model<float>(eval_config(tokenizer.vocab_size()));
  CHECK_THROWS_AS(bias_score(model, tokenizer, {}, "hij", "zij"), Error);
}

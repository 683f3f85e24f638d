// Smallest useful walk through the library: learn a tokenizer from a toy
// corpus, pre-train a tiny teacher, distill it into a half-depth student and
// compare pseudo-perplexities. Runs on one core in well under a minute.

#include <iostream>
#include <string>
#include <vector>

#include "distillforge/distillforge.hpp"

using namespace distillforge;

int main() {
  std::vector<std::string> corpus;
  const std::vector<std::string> subjects = {"de kat", "de hond", "een vogel", "de vis"};
  const std::vector<std::string> verbs = {"ziet", "hoort", "volgt", "zoekt"};
  const std::vector<std::string> objects = {"de muis", "het huis", "de boom", "het water"};
  for (const auto& s : subjects)
    for (const auto& v : verbs)
      for (const auto& o : objects) corpus.push_back(s + " " + v + " " + o);

  auto [vocab, merges] = train_bpe(corpus, 120);
  Tokenizer tokenizer{vocab, merges};
  std::cout << "tokenizer: " << tokenizer.vocab_size() << " tokens\n";

  std::vector<std::vector<std::int32_t>> encoded;
  for (const auto& line : corpus) encoded.push_back(tokenizer.encode(line));

  EncoderConfig teacher_config;
  teacher_config.d = 2;
  teacher_config.a = 2;
  teacher_config.h = 32;
  teacher_config.i = 64;
  teacher_config.vocab_size = tokenizer.vocab_size();
  teacher_config.max_positions = 32;

  DistillConfig train_config;
  train_config.epochs = 12;
  train_config.micro_batch = 16;
  train_config.max_len = 16;
  train_config.learning_rate = 3e-3;
  train_config.seed = 7;

  EncoderModel teacher = init_random<float>(teacher_config, 1);
  auto pretrain_result = pretrain_run(teacher, encoded, train_config);
  std::cout << "teacher pre-training: first epoch loss "
            << pretrain_result.epoch_losses.front().total << ", last "
            << pretrain_result.epoch_losses.back().total << "\n";

  EncoderConfig student_config = teacher_config;
  student_config.d = 1;
  std::vector<std::string> notices;
  EncoderModel student =
      init_student_from_teacher(teacher, student_config, train_config.seed, &notices);
  for (const auto& notice : notices) std::cout << "notice: " << notice << "\n";

  DistillConfig distill_config = train_config;
  distill_config.epochs = 8;
  auto distill_result = distill_run(teacher, student, encoded, distill_config);
  std::cout << "distillation: first epoch loss "
            << distill_result.epoch_losses.front().total << ", last "
            << distill_result.epoch_losses.back().total << "\n";

  PpplResult teacher_pppl = pseudo_perplexity(teacher, corpus, tokenizer);
  PpplResult student_pppl = pseudo_perplexity(student, corpus, tokenizer);
  std::cout << "teacher pseudo-perplexity " << teacher_pppl.pppl << "\n";
  std::cout << "student pseudo-perplexity " << student_pppl.pppl << "\n";
  return 0;
}

// Train a small model on a short text for a few steps, then score it.
#include <iostream>

#include "bytelm.hpp"

int main() {
  using namespace bytelm;
  const ByteSequence text = to_bytes(
      "the quick brown fox jumps over the lazy dog\n"
      "pack my box with five dozen liquor jugs\n"
      "how vexingly quick daft zebras jump\n");

  ModelConfig model{2, 64, 256, 4, 32, 64, 0.0};
  TrainConfig train;
  train.batch_size = 8;
  train.window_len = 33;
  train.total_steps = 60;

  RawCorpus corpus;
  corpus.append("sample", text);
  auto params = init_parameters<float>(model, train.seed);
  auto opt = OptimizerState<float>::fresh(model);
  for (std::uint64_t step = 0; step < train.total_steps; ++step) {
    const StepResult r = train_step(params, opt, training_batch(corpus, train, step), train);
    if (step % 10 == 0) std::cout << "step=" << step << " bpb=" << r.loss_bits << "\n";
  }

  const ScoreReport report = with_word_count(windowed_score(params, text, 32, 8), corpus_stats(text).word_count);
  std::cout << "bpb=" << report.bpb << " ppl=" << report.perplexity << "\n";

  const auto next = predict_distribution(params, to_bytes("the quick brown f"));
  std::size_t best = 0;
  for (std::size_t b = 1; b < kVocabSize; ++b)
    if (next.probs[b] > next.probs[best]) best = b;
  std::cout << "most likely byte after 'the quick brown f': '" << static_cast<char>(best) << "'\n";
}

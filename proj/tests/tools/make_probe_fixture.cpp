// Regenerates tests/data/tiny_probe.ckpt and prints the per-layer rho of
// tests/data/wordsim_tiny.tsv against it. The golden values in
// test_probe.cpp were pinned from this output.
//
//   make_probe_fixture <out.ckpt> <pairs.tsv>

#include <iomanip>
#include <iostream>

#include "bytelm.hpp"

using namespace bytelm;

int main(int argc, char** argv) {
  if (argc != 3) {
    std::cerr << "usage: make_probe_fixture <out.ckpt> <pairs.tsv>\n";
    return 2;
  }
  ModelConfig m;
  m.num_layers = 2;
  m.hidden_size = 16;
  m.filter_size = 32;
  m.num_heads = 2;
  m.embed_dim = 8;
  m.context_len = 32;
  TrainConfig t;
  t.batch_size = 4;
  t.window_len = 32;
  t.seed = 7;
  auto p = init_parameters<float>(m, 7);
  auto opt = OptimizerState<float>::fresh(m);
  RawCorpus corpus;
  corpus.append("x", to_bytes("the cat and the dog went to the market. the king and queen ate bread and "
                              "butter at noon by the shore.\n"));
  for (std::uint64_t s = 0; s < 20; ++s) train_step(p, opt, training_batch(corpus, t, s), t);
  save_checkpoint(Checkpoint{kCheckpointVersion, m, t, 20, p, std::nullopt}, argv[1]);

  const auto ds = load_word_pairs(argv[2]);
  const auto loaded = load_checkpoint(argv[1]);
  for (std::size_t l = 1; l <= m.num_layers; ++l)
    std::cout << l << " " << std::setprecision(17) << evaluate_dataset(loaded.params, ds, l).rho << "\n";
}

#pragma once

#include "fea/experiment.hpp"

// A grid small enough to run inside a unit test.
inline fea::ExperimentConfig tiny_experiment(const std::string& out) {
  fea::ExperimentConfig c;
  c.synthetic.relations = 6;
  c.synthetic.tasks = 3;
  c.synthetic.train_per_relation = 12;
  c.synthetic.val_per_relation = 2;
  c.synthetic.test_per_relation = 5;
  c.synthetic.vocab_size = 60;
  c.synthetic.sequence_length = 10;
  c.synthetic.similar_pairs = 1;
  c.encoder.d_model = 8;
  c.encoder.ff_width = 16;
  c.train.epochs_fa = 2;
  c.train.epochs_bt = 2;
  c.train.batch_size = 4;
  c.probes.probe.epochs = 3;
  c.seeds = {0, 1};
  c.memory_sizes = {3};
  c.output_dir = out;
  return c;
}

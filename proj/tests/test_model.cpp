#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "fea/error.hpp"
#include "fea/model.hpp"

using namespace fea;

namespace {

Instance make_instance(std::mt19937_64& rng, int vocab, int len, int relation) {
  std::uniform_int_distribution<int> tok(0, vocab - 1);
  Instance inst;
  inst.relation = relation;
  for (int i = 0; i < len; ++i) inst.tokens.push_back(tok(rng));
  inst.head = Span{1, 2};
  inst.tail = Span{len - 3, len - 3};
  return inst;
}

EncoderConfig small_config(int vocab) {
  EncoderConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = 16;
  cfg.ff_width = 32;
  cfg.heads = 2;
  cfg.max_length = 32;
  return cfg;
}

}  // namespace

TEST_CASE("entity markers wrap both spans") {
  Instance inst;
  inst.tokens = {5, 6, 7, 8, 9};
  inst.head = Span{3, 4};
  inst.tail = Span{0, 0};
  inst.relation = 0;
  const MarkedSequence m = insert_entity_markers(inst, 10);
  // [E21] 5 [E22] 6 7 [E11] 8 9 [E12]
  CHECK(m.tokens == std::vector<int>{12, 5, 13, 6, 7, 10, 8, 9, 11});
  CHECK(m.head_pos == 5);
  CHECK(m.tail_pos == 0);
  inst.tail = Span{3, 3};
  CHECK_THROWS_AS(insert_entity_markers(inst, 10), Error);
}

TEST_CASE("full encoder and classifier gradients match finite differences") {
  std::mt19937_64 rng(11);
  const EncoderConfig cfg = small_config(20);
  Encoder enc(cfg, 5);
  ClassifierHead head = extend_head(make_head(cfg.hidden_width()), {0, 1, 2}, 0);
  std::normal_distribution<double> n(0.0, 0.3);
  for (double& w : head.weight().value.values) w = n(rng);
  std::vector<MarkedSequence> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(insert_entity_markers(make_instance(rng, 20, 9, i % 3), 20));
  std::vector<const MarkedSequence*> batch;
  for (const auto& s : seqs) batch.push_back(&s);
  auto loss = [&](bool with_grad) {
    Tape tape(with_grad);
    const Var h = enc.forward_batch(tape, batch);
    const Var l = tape.softmax_cross_entropy(tape.matmul_nt(h, tape.param(head.weight())),
                                             {0, 1, 2, 0});
    if (with_grad) tape.backward(l);
    return tape.value(l).item();
  };
  CHECK(grad_check(loss, {&enc.params(), &head.params}, 1e-5) < 1e-4);
}

TEST_CASE("batched encoding is bitwise identical to one-at-a-time encoding") {
  std::mt19937_64 rng(2);
  const EncoderConfig cfg = small_config(30);
  const Encoder enc(cfg, 9);
  std::vector<MarkedSequence> seqs;
  std::uniform_int_distribution<int> len(6, 14);
  for (int i = 0; i < 9; ++i) seqs.push_back(insert_entity_markers(make_instance(rng, 30, len(rng), 0), 30));
  std::vector<const MarkedSequence*> ptrs;
  for (const auto& s : seqs) ptrs.push_back(&s);
  const auto batched = enc.encode_batch(ptrs, 4);
  REQUIRE(batched.size() == seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) CHECK(batched[i] == enc.encode(seqs[i]));
}

TEST_CASE("head extension leaves old-class logits bitwise unchanged") {
  std::mt19937_64 rng(42);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<int> count(1, 6);
  for (int trial = 0; trial < 200; ++trial) {
    const int width = 2 * count(rng);
    std::vector<int> first, second;
    const int a = count(rng), b = count(rng);
    for (int i = 0; i < a; ++i) first.push_back(i);
    for (int i = 0; i < b; ++i) second.push_back(a + i);
    ClassifierHead head = extend_head(make_head(width), first, 0);
    for (double& w : head.weight().value.values) w = n(rng);
    Tensor h({1, static_cast<std::size_t>(width)});
    for (double& x : h.values) x = n(rng);
    const Tensor before = head_logits(h, head);
    const ClassifierHead grown = extend_head(head, second, 1);
    const Tensor after = head_logits(h, grown);
    REQUIRE(after.size() == static_cast<std::size_t>(a + b));
    for (int c = 0; c < a; ++c) CHECK(after.values[c] == before.values[c]);
    for (int c = a; c < a + b; ++c) CHECK(after.values[c] == 0.0);
  }
}

TEST_CASE("extending with a known relation is rejected") {
  const ClassifierHead head = extend_head(make_head(4), {3, 5}, 0);
  CHECK_THROWS_AS(extend_head(head, {5}, 1), Error);
  CHECK_THROWS_AS(extend_head(head, {7, 7}, 1), Error);
  CHECK(head.class_of(5) == 1);
  CHECK(head.class_of(4) == -1);
}

TEST_CASE("argmax ties go to the lowest index") {
  const double v[] = {1.0, 3.0, 3.0, 2.0};
  CHECK(argmax(v, 4) == 1);
}

TEST_CASE("checkpoints round-trip exactly") {
  std::mt19937_64 rng(4);
  const EncoderConfig cfg = small_config(12);
  Checkpoint ck{Encoder(cfg, 3), extend_head(make_head(cfg.hidden_width()), {1, 0}, 0), {"a", "b"},
                {{"note", "x"}}};
  for (double& w : ck.head.weight().value.values) w = std::normal_distribution<double>()(rng);
  const auto path = std::filesystem::temp_directory_path() / "fea_test_ckpt.bin";
  save_checkpoint(path.string(), ck);
  const Checkpoint back = load_checkpoint(path.string());
  CHECK(back.relation_names == ck.relation_names);
  CHECK(back.meta == ck.meta);
  CHECK(back.head.class_relation == ck.head.class_relation);
  CHECK(back.head.weight().value == ck.head.weight().value);
  const auto& pa = ck.encoder.params().params();
  const auto& pb = back.encoder.params().params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].value == pb[i].value);
  std::filesystem::remove(path);
  CHECK_THROWS_AS(load_checkpoint(path.string()), Error);
}

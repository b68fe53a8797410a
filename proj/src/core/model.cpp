#include "fea/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "fea/error.hpp"
#include "fea/rng.hpp"

namespace fea {

using nlohmann::json;

std::vector<std::string> EncoderConfig::errors() const {
  std::vector<std::string> errs;
  if (vocab_size < 1) errs.push_back("vocab_size must be >= 1");
  if (d_model < 2 || d_model % 2 != 0) errs.push_back("d_model must be even and >= 2");
  if (heads < 1 || (d_model > 0 && d_model % heads != 0)) {
    errs.push_back("d_model must be divisible by heads");
  }
  if (blocks < 0) errs.push_back("blocks must be >= 0");
  if (ff_width < 1) errs.push_back("ff_width must be >= 1");
  if (max_length < 6) errs.push_back("max_length must leave room for the four markers");
  if (!(ln_eps > 0)) errs.push_back("ln_eps must be positive");
  return errs;
}

void EncoderConfig::validate() const {
  const auto errs = errors();
  if (errs.empty()) return;
  std::string msg;
  for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
  throw Error(ErrorKind::kConfig, msg);
}

json to_json(const EncoderConfig& cfg) {
  return json{{"vocab_size", cfg.vocab_size}, {"d_model", cfg.d_model},
              {"blocks", cfg.blocks},         {"heads", cfg.heads},
              {"ff_width", cfg.ff_width},     {"max_length", cfg.max_length},
              {"ln_eps", cfg.ln_eps}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig cfg;
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.d_model = j.at("d_model").get<int>();
  cfg.blocks = j.at("blocks").get<int>();
  cfg.heads = j.at("heads").get<int>();
  cfg.ff_width = j.at("ff_width").get<int>();
  cfg.max_length = j.at("max_length").get<int>();
  cfg.ln_eps = j.value("ln_eps", 1e-5);
  return cfg;
}

MarkedSequence insert_entity_markers(const Instance& inst, int vocab_size) {
  validate_spans(inst);
  MarkedSequence seq;
  seq.tokens.reserve(inst.tokens.size() + kMarkerCount);
  const int n = static_cast<int>(inst.tokens.size());
  for (int i = 0; i < n; ++i) {
    if (i == inst.head.start) {
      seq.head_pos = static_cast<int>(seq.tokens.size());
      seq.tokens.push_back(vocab_size + 0);
    }
    if (i == inst.tail.start) {
      seq.tail_pos = static_cast<int>(seq.tokens.size());
      seq.tokens.push_back(vocab_size + 2);
    }
    seq.tokens.push_back(inst.tokens[i]);
    if (i == inst.head.end) seq.tokens.push_back(vocab_size + 1);
    if (i == inst.tail.end) seq.tokens.push_back(vocab_size + 3);
  }
  return seq;
}

// ------------------------------------------------------------------- encoder

namespace {

std::string block_name(int b, const char* leaf) {
  return "block" + std::to_string(b) + "." + leaf;
}

Tensor gaussian(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values) v = dist(rng);
  return t;
}

Tensor filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.values.begin(), t.values.end(), value);
  return t;
}

}  // namespace

Encoder::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.d_model, ff = cfg_.ff_width, w = 2 * d;
  Rng rng = make_rng({salt::kInit, seed});
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  params_.add("embed", gaussian({static_cast<std::size_t>(cfg_.table_rows()), d}, 1.0, rng));
  for (int b = 0; b < cfg_.blocks; ++b) {
    params_.add(block_name(b, "ln1.g"), filled({d}, 1.0));
    params_.add(block_name(b, "ln1.b"), filled({d}, 0.0));
    params_.add(block_name(b, "attn.wq"), gaussian({d, d}, sd, rng));
    params_.add(block_name(b, "attn.wk"), gaussian({d, d}, sd, rng));
    params_.add(block_name(b, "attn.wv"), gaussian({d, d}, sd, rng));
    params_.add(block_name(b, "attn.wo"), gaussian({d, d}, sd, rng));
    params_.add(block_name(b, "ln2.g"), filled({d}, 1.0));
    params_.add(block_name(b, "ln2.b"), filled({d}, 0.0));
    params_.add(block_name(b, "ff.w1"), gaussian({d, ff}, sd, rng));
    params_.add(block_name(b, "ff.b1"), filled({ff}, 0.0));
    params_.add(block_name(b, "ff.w2"),
                gaussian({ff, d}, 1.0 / std::sqrt(static_cast<double>(ff)), rng));
    params_.add(block_name(b, "ff.b2"), filled({d}, 0.0));
  }
  params_.add("cat.W", gaussian({w, w}, 1.0 / std::sqrt(static_cast<double>(w)), rng));
  params_.add("cat.b", filled({w}, 0.0));
  params_.add("cat.ln.g", filled({w}, 1.0));
  params_.add("cat.ln.b", filled({w}, 0.0));

  positions_ = Tensor({static_cast<std::size_t>(cfg_.max_length), d});
  for (std::size_t pos = 0; pos < static_cast<std::size_t>(cfg_.max_length); ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      positions_(pos, i) = std::sin(static_cast<double>(pos) * freq);
      positions_(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
}

void Encoder::check_length(const MarkedSequence& seq) const {
  if (static_cast<int>(seq.tokens.size()) > cfg_.max_length) {
    throw Error(ErrorKind::kLength, "sequence of length " + std::to_string(seq.tokens.size()) +
                                        " exceeds max length " +
                                        std::to_string(cfg_.max_length));
  }
  if (seq.head_pos < 0 || seq.tail_pos < 0) {
    throw Error(ErrorKind::kInvalidInput, "sequence has no entity markers");
  }
}

Var Encoder::forward(Tape& tape, const MarkedSequence& seq) {
  return forward_batch(tape, {&seq});
}

Var Encoder::forward_batch(Tape& tape, const std::vector<const MarkedSequence*>& batch) {
  if (batch.empty()) throw Error(ErrorKind::kInvalidInput, "empty encoder batch");
  auto P = [&](const std::string& name) { return tape.param(params_.get(name)); };
  const std::size_t n = batch.size(), d = cfg_.d_model;
  const double eps = cfg_.ln_eps;

  // All sequences are stacked row-wise; attention stays within a sequence.
  std::vector<int> ids;
  std::vector<std::size_t> offsets = {0};
  std::vector<int> marks;
  for (const MarkedSequence* seq : batch) {
    check_length(*seq);
    const int base = static_cast<int>(offsets.back());
    marks.push_back(base + seq->head_pos);
    marks.push_back(base + seq->tail_pos);
    ids.insert(ids.end(), seq->tokens.begin(), seq->tokens.end());
    offsets.push_back(offsets.back() + seq->tokens.size());
  }
  Tensor pos({ids.size(), d});
  for (std::size_t s = 0; s < n; ++s) {
    std::copy_n(positions_.values.begin(), (offsets[s + 1] - offsets[s]) * d,
                pos.values.begin() + offsets[s] * d);
  }
  std::vector<std::size_t> mark_offsets(n + 1);
  for (std::size_t s = 0; s <= n; ++s) mark_offsets[s] = 2 * s;

  Var x = tape.add(tape.gather_rows(P("embed"), std::move(ids)), tape.constant(std::move(pos)));
  for (int b = 0; b < cfg_.blocks; ++b) {
    // Only the marker rows leave the last block, so it computes queries,
    // residuals and the feed-forward for those rows alone.
    const bool last = b == cfg_.blocks - 1;
    Var a = tape.layer_norm(x, P(block_name(b, "ln1.g")), P(block_name(b, "ln1.b")), eps);
    Var aq = last ? tape.gather_rows(a, marks) : a;
    Var q = tape.matmul(aq, P(block_name(b, "attn.wq")));
    Var k = tape.matmul(a, P(block_name(b, "attn.wk")));
    Var v = tape.matmul(a, P(block_name(b, "attn.wv")));
    Var ctx = tape.attention(q, k, v, cfg_.heads, last ? mark_offsets : offsets, offsets);
    Var att = tape.matmul(ctx, P(block_name(b, "attn.wo")));
    x = tape.add(last ? tape.gather_rows(x, marks) : x, att);
    Var f = tape.layer_norm(x, P(block_name(b, "ln2.g")), P(block_name(b, "ln2.b")), eps);
    Var hid = tape.gelu(tape.add_row(tape.matmul(f, P(block_name(b, "ff.w1"))),
                                     P(block_name(b, "ff.b1"))));
    x = tape.add(x, tape.add_row(tape.matmul(hid, P(block_name(b, "ff.w2"))),
                                 P(block_name(b, "ff.b2"))));
  }
  if (cfg_.blocks == 0) x = tape.gather_rows(x, marks);

  // Rows come in (head, tail) order per sequence, so this is [h11; h21].
  Var cat = tape.reshape(x, {n, 2 * d});
  Var z = tape.add_row(tape.matmul(cat, P("cat.W")), P("cat.b"));
  return tape.layer_norm(z, P("cat.ln.g"), P("cat.ln.b"), eps);
}

Tensor Encoder::encode(const MarkedSequence& seq) const {
  // A gradient-free tape only reads parameter values.
  Tape tape(/*grad_enabled=*/false);
  Var h = const_cast<Encoder*>(this)->forward(tape, seq);
  return tape.value(h);
}

std::vector<Tensor> Encoder::encode_batch(const std::vector<const MarkedSequence*>& batch,
                                          std::size_t chunk) const {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  const std::size_t w = static_cast<std::size_t>(cfg_.hidden_width());
  for (std::size_t start = 0; start < batch.size(); start += chunk) {
    const std::size_t end = std::min(batch.size(), start + chunk);
    std::vector<const MarkedSequence*> part(batch.begin() + start, batch.begin() + end);
    Tape tape(/*grad_enabled=*/false);
    const Tensor& h = tape.value(const_cast<Encoder*>(this)->forward_batch(tape, part));
    for (std::size_t i = 0; i < part.size(); ++i) {
      out.emplace_back(Shape{1, w},
                       std::vector<double>(h.values.begin() + i * w, h.values.begin() + (i + 1) * w));
    }
  }
  return out;
}

// ---------------------------------------------------------------------- head

int ClassifierHead::class_of(int relation) const {
  for (std::size_t c = 0; c < class_relation.size(); ++c) {
    if (class_relation[c] == relation) return static_cast<int>(c);
  }
  return -1;
}

ClassifierHead make_head(int width) {
  ClassifierHead head;
  head.width = width;
  head.params.add("W", Tensor({0, static_cast<std::size_t>(width)}));
  return head;
}

ClassifierHead extend_head(const ClassifierHead& head, const std::vector<int>& relations,
                           int task) {
  for (std::size_t i = 0; i < relations.size(); ++i) {
    if (head.class_of(relations[i]) >= 0) {
      throw Error(ErrorKind::kDuplicate,
                  "relation " + std::to_string(relations[i]) + " already has a class");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (relations[j] == relations[i]) {
        throw Error(ErrorKind::kDuplicate,
                    "relation " + std::to_string(relations[i]) + " listed twice");
      }
    }
  }
  ClassifierHead out = head;
  if (relations.empty()) return out;
  const std::size_t c = head.classes() + relations.size(), w = head.width;
  Tensor grown({c, w});
  const Tensor& old = head.weight().value;
  std::copy(old.values.begin(), old.values.end(), grown.values.begin());
  out.params.grow("W", std::move(grown));
  for (int r : relations) {
    out.class_relation.push_back(r);
    out.class_task.push_back(task);
  }
  return out;
}

Tensor head_logits(const Tensor& h, const ClassifierHead& head) {
  if (h.cols() != static_cast<std::size_t>(head.width)) {
    throw Error(ErrorKind::kShape, "hidden width " + std::to_string(h.cols()) +
                                       " does not match head width " +
                                       std::to_string(head.width));
  }
  return matmul_nt(h, head.weight().value);
}

std::vector<double> predict_proba(const Tensor& h, const ClassifierHead& head) {
  if (h.rows() != 1) throw Error(ErrorKind::kShape, "predict_proba takes one hidden vector");
  return softmax_rows(head_logits(h, head)).values;
}

int argmax(const double* values, std::size_t n) {
  int best = 0;
  for (std::size_t i = 1; i < n; ++i) {
    if (values[i] > values[best]) best = static_cast<int>(i);
  }
  return best;
}

int predict(const MarkedSequence& seq, const Encoder& encoder, const ClassifierHead& head) {
  if (head.classes() == 0) throw Error(ErrorKind::kCoverage, "head has no classes");
  const Tensor logits = head_logits(encoder.encode(seq), head);
  return head.class_relation[argmax(logits.values.data(), logits.size())];
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'F', 'E', 'A', 'C', 'K', 'P', 'T', '\n'};

template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>(u & 0xFF));
    u = static_cast<U>(u >> 8);
  }
}

template <typename T>
T get_le(std::istream& in) {
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw Error(ErrorKind::kIo, "checkpoint truncated");
    u |= static_cast<U>(static_cast<U>(static_cast<unsigned char>(c)) << (8 * i));
  }
  return static_cast<T>(u);
}

void put_tensor(std::ostream& out, const std::string& name, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
  for (std::size_t dim : t.shape) put_le<std::uint64_t>(out, dim);
  for (double v : t.values) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
}

std::pair<std::string, Tensor> get_tensor(std::istream& in) {
  const auto name_len = get_le<std::uint32_t>(in);
  if (name_len > 4096) throw Error(ErrorKind::kIo, "checkpoint tensor name too long");
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  const auto rank = get_le<std::uint32_t>(in);
  if (rank > 8) throw Error(ErrorKind::kIo, "checkpoint tensor rank too large");
  Shape shape(rank);
  for (auto& dim : shape) dim = get_le<std::uint64_t>(in);
  Tensor t(shape);
  for (double& v : t.values) v = std::bit_cast<double>(get_le<std::uint64_t>(in));
  return {name, std::move(t)};
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json classes = json::array();
  for (int c = 0; c < ckpt.head.classes(); ++c) {
    const int r = ckpt.head.class_relation[c];
    classes.push_back({{"relation", ckpt.relation_names.at(r)},
                       {"relation_id", r},
                       {"task", ckpt.head.class_task[c]}});
  }
  json tensors = json::array();
  for (const auto& p : ckpt.encoder.params().params()) tensors.push_back(p.name);
  tensors.push_back("head.W");
  const json header = {{"format_version", kCheckpointVersion},
                       {"encoder", to_json(ckpt.encoder.config())},
                       {"head_width", ckpt.head.width},
                       {"classes", classes},
                       {"relation_names", ckpt.relation_names},
                       {"tensors", tensors},
                       {"meta", ckpt.meta}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write checkpoint '" + path + "'");
  out.write(kMagic, sizeof(kMagic));
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& p : ckpt.encoder.params().params()) put_tensor(out, p.name, p.value);
  put_tensor(out, "head.W", ckpt.head.weight().value);
  if (!out) throw Error(ErrorKind::kIo, "failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::kIo, "'" + path + "' is not a checkpoint");
  }
  const auto header_len = get_le<std::uint64_t>(in);
  if (header_len > (1u << 26)) throw Error(ErrorKind::kIo, "checkpoint header too large");
  std::string text(header_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_len));
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kIo, std::string("bad checkpoint header: ") + e.what());
  }
  if (header.value("format_version", -1) != kCheckpointVersion) {
    throw Error(ErrorKind::kVersion, "unsupported checkpoint version " +
                                         header.value("format_version", json()).dump());
  }

  Checkpoint ckpt;
  ckpt.encoder = Encoder(encoder_config_from_json(header.at("encoder")), 0);
  ckpt.head = make_head(header.at("head_width").get<int>());
  ckpt.relation_names = header.at("relation_names").get<std::vector<std::string>>();
  ckpt.meta = header.value("meta", json::object());
  for (const auto& c : header.at("classes")) {
    ckpt.head.class_relation.push_back(c.at("relation_id").get<int>());
    ckpt.head.class_task.push_back(c.at("task").get<int>());
  }

  const auto count = get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto [name, tensor] = get_tensor(in);
    Parameter* target = nullptr;
    if (name == "head.W") {
      ckpt.head.params.grow("W", Tensor(tensor.shape));
      target = &ckpt.head.weight();
    } else {
      target = &ckpt.encoder.params().get(name);
    }
    if (target->value.shape != tensor.shape) {
      throw Error(ErrorKind::kShape, "checkpoint tensor '" + name + "' has shape " +
                                         shape_str(tensor.shape) + ", expected " +
                                         shape_str(target->value.shape));
    }
    target->value = std::move(tensor);
  }
  if (ckpt.head.weight().value.rows() != static_cast<std::size_t>(ckpt.head.classes()) &&
      ckpt.head.classes() > 0) {
    throw Error(ErrorKind::kShape, "checkpoint head rows disagree with its class map");
  }
  return ckpt;
}

}  // namespace fea

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <limits>

#include "blockrank/training.hpp"

using namespace blockrank;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.attn.d_model = 16;
  cfg.attn.n_heads = 2;
  cfg.attn.q_chunk = 8;
  cfg.attn.kv_chunk = 8;
  cfg.attn.max_seq_len = 64;
  cfg.n_layers = 2;
  cfg.ffn_multiplier = 2;
  cfg.mlp_head_dims = {8, 1};
  return cfg;
}

std::vector<TripletRecord> tiny_records() {
  std::vector<TripletRecord> recs;
  const char* topics[4][3] = {
      {"song nui rung", "song nui rung bien dao thac", "pho cho quan com bun"},
      {"pho cho quan", "pho cho quan com bun mi", "song nui rung bien dao"},
      {"sach bao van", "sach bao van tho truyen tho", "may tinh phan mem chip"},
      {"may tinh chip", "may tinh chip phan mem code", "sach bao van tho truyen"},
  };
  for (int rep = 0; rep < 2; ++rep) {
    for (auto& t : topics) {
      TripletRecord r;
      r.query = t[0];
      r.pos = {t[1]};
      r.neg = {t[2]};
      recs.push_back(r);
    }
  }
  return recs;
}

Vocab vocab_for(const std::vector<TripletRecord>& recs) {
  std::vector<std::string> texts;
  for (const auto& r : recs) {
    texts.push_back(r.query);
    for (auto& p : r.pos) texts.push_back(p);
    for (auto& n : r.neg) texts.push_back(n);
  }
  return build_vocab(texts, 1000);
}

Tensor<double> unit_vec(int64_t d, int64_t axis) {
  Tensor<double> t({d});
  t[axis] = 1.0;
  return t;
}

}  // namespace

TEST_CASE("triplet_loss direct cases") {
  CHECK(triplet_loss(5.0, 1.0, 1.0) == 0.0);
  CHECK(triplet_loss(0.7, 0.7, 1.0) == 1.0);
  CHECK(triplet_loss(0.2, 0.1, 1.0) == Catch::Approx(0.9).margin(1e-12));
  CHECK_THROWS_AS(triplet_loss(0.0, 0.0, -1.0), ContractError);
}

TEST_CASE("triplet_loss is nonnegative and zero iff margin satisfied") {
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    double sp = rng.uniform(-3, 3), sn = rng.uniform(-3, 3), m = rng.uniform(0, 2);
    double l = triplet_loss(sp, sn, m);
    CHECK(l >= 0.0);
    if (sp >= sn + m) {
      CHECK(l == 0.0);
    } else {
      CHECK(l > 0.0);
    }
  }
}

TEST_CASE("memory bank first step targets the fresh positives") {
  MemoryBank<double> bank(8);
  std::vector<Tensor<double>> anchors = {unit_vec(4, 0), unit_vec(4, 1)};
  std::vector<Tensor<double>> positives = {unit_vec(4, 0), unit_vec(4, 1)};
  double loss = memory_bank_step(anchors, positives, bank);
  CHECK(bank.size() == 2);
  // Anchor i matches slot i with cosine 1, the other slot cosine 0:
  // loss = -ln(e / (e + 1)).
  double want = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
  CHECK(loss == Catch::Approx(want).margin(1e-9));
}

TEST_CASE("memory bank queue length follows min(pushes, capacity)") {
  MemoryBank<double> bank(512);
  Rng rng(3);
  for (int step = 1; step <= 200; ++step) {
    std::vector<Tensor<double>> anchors, positives;
    for (int i = 0; i < 4; ++i) {
      anchors.push_back(random_uniform<double>({8}, -1, 1, rng));
      positives.push_back(random_uniform<double>({8}, -1, 1, rng));
    }
    memory_bank_step(anchors, positives, bank);
    CHECK(bank.size() == std::min<int64_t>(4 * step, 512));
  }
  CHECK(bank.size() == 512);
}

TEST_CASE("memory bank truncates exactly the oldest entries") {
  MemoryBank<double> bank(4);
  auto mark = [](double v) {
    Tensor<double> t({2});
    t[0] = v;
    t[1] = 1.0;
    return t;
  };
  std::vector<Tensor<double>> a1 = {mark(101), mark(102)};
  memory_bank_step(a1, a1, bank);  // queue: 101 102
  std::vector<Tensor<double>> a2 = {mark(201), mark(202)};
  memory_bank_step(a2, a2, bank);  // queue: 201 202 101 102
  std::vector<Tensor<double>> a3 = {mark(301), mark(302)};
  memory_bank_step(a3, a3, bank);  // queue: 301 302 201 202 (101 102 dropped)
  REQUIRE(bank.size() == 4);
  CHECK(bank.queue[0][0] == 301);
  CHECK(bank.queue[1][0] == 302);
  CHECK(bank.queue[2][0] == 201);
  CHECK(bank.queue[3][0] == 202);
}

TEST_CASE("memory bank analytic loss for orthogonal anchors") {
  // Queue ends with q entries; each anchor is orthogonal to every entry
  // except its own positive (cosine 1): loss = -ln(e / (e + q - 1)).
  int64_t d = 16;
  MemoryBank<double> bank(16);
  std::vector<Tensor<double>> warm;
  for (int64_t i = 4; i < 10; ++i) warm.push_back(unit_vec(d, i));
  memory_bank_step(warm, warm, bank);  // 6 entries occupying axes 4..9

  std::vector<Tensor<double>> anchors = {unit_vec(d, 0), unit_vec(d, 1), unit_vec(d, 2)};
  double loss = memory_bank_step(anchors, anchors, bank);
  int64_t q = bank.size();
  REQUIRE(q == 9);
  double want = -std::log(std::exp(1.0) / (std::exp(1.0) + static_cast<double>(q - 1)));
  CHECK(loss == Catch::Approx(want).margin(1e-6));
}

TEST_CASE("memory bank contract errors") {
  MemoryBank<double> bank(2);
  std::vector<Tensor<double>> three = {unit_vec(4, 0), unit_vec(4, 1), unit_vec(4, 2)};
  CHECK_THROWS_AS(memory_bank_step(three, three, bank), ContractError);

  MemoryBank<double> bank2(8);
  std::vector<Tensor<double>> zero = {Tensor<double>::zeros({4})};
  CHECK_THROWS_AS(memory_bank_step(zero, zero, bank2), DegenerateVectorError);
}

TEST_CASE("taped bank loss matches the plain evaluation") {
  Rng rng(17);
  MemoryBank<double> bank(32);
  std::vector<Tensor<double>> warm;
  for (int i = 0; i < 5; ++i) warm.push_back(random_uniform<double>({8}, -1, 1, rng));
  memory_bank_step(warm, warm, bank);

  std::vector<Tensor<double>> anchors, positives;
  for (int i = 0; i < 3; ++i) {
    anchors.push_back(random_uniform<double>({8}, -1, 1, rng));
    positives.push_back(random_uniform<double>({8}, -1, 1, rng));
  }
  MemoryBank<double> bank_plain = bank;
  double plain = memory_bank_step(anchors, positives, bank_plain);

  bank.push_front_batch(positives);
  Tape<double> tape(true);
  std::vector<Var<double>> avars;
  for (auto& a : anchors) {
    Tensor<double> row({1, 8});
    for (int64_t t = 0; t < 8; ++t) row[t] = a[t];
    avars.push_back(tape.leaf(row));
  }
  Var<double> taped = detail::bank_loss_taped(avars, bank);
  CHECK(taped.v()[0] == Catch::Approx(plain).margin(1e-12));
}

TEST_CASE("cosine_lr schedule") {
  CHECK(cosine_lr(0, 100, 5e-5) == Catch::Approx(5e-5).margin(1e-18));
  CHECK(cosine_lr(100, 100, 5e-5) == Catch::Approx(0.0).margin(1e-18));
  CHECK(cosine_lr(50, 100, 5e-5) == Catch::Approx(2.5e-5).margin(1e-12));
  CHECK_THROWS_AS(cosine_lr(-1, 100, 1.0), ContractError);
  CHECK_THROWS_AS(cosine_lr(101, 100, 1.0), ContractError);
  CHECK_THROWS_AS(cosine_lr(0, 0, 1.0), ContractError);
}

TEST_CASE("gradient accumulation matches one large batch") {
  auto recs = tiny_records();
  recs.resize(4);
  Vocab vocab = vocab_for(recs);

  TrainConfig base;
  base.learning_rate = 0.01;
  base.epochs = 1;
  base.margin = 1.0;
  base.memory_bank_weight = 0;
  base.seed = 9;
  base.recompute_activations = false;

  auto run = [&](int64_t batch, int64_t accum) {
    auto model = CrossEncoder<double>::init(tiny_config(), vocab, 42);
    TrainConfig cfg = base;
    cfg.batch_size = batch;
    cfg.grad_accum_steps = accum;
    train(model, recs, cfg);
    return model;
  };

  auto m_accum = run(2, 2);
  auto m_big = run(4, 1);

  double worst = 0;
  auto pa = m_accum;
  std::vector<double> flat_a, flat_b;
  m_accum.for_each_param([&](const std::string&, Tensor<double>& t) {
    for (int64_t i = 0; i < t.numel(); ++i) flat_a.push_back(t[i]);
  });
  m_big.for_each_param([&](const std::string&, Tensor<double>& t) {
    for (int64_t i = 0; i < t.numel(); ++i) flat_b.push_back(t[i]);
  });
  REQUIRE(flat_a.size() == flat_b.size());
  for (size_t i = 0; i < flat_a.size(); ++i) {
    worst = std::max(worst, std::abs(flat_a[i] - flat_b[i]));
  }
  CHECK(worst < 1e-7);
}

TEST_CASE("memory_bank_weight zero reproduces a pure triplet trace") {
  auto recs = tiny_records();
  Vocab vocab = vocab_for(recs);
  auto model = CrossEncoder<double>::init(tiny_config(), vocab, 7);

  TrainConfig cfg;
  cfg.learning_rate = 0.02;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.grad_accum_steps = 1;
  cfg.memory_bank_weight = 0;
  cfg.seed = 3;
  auto result = train(model, recs, cfg);
  for (const auto& row : result.trace) {
    CHECK(row.bank_loss == 0.0);
    CHECK(std::memcmp(&row.total, &row.triplet_loss, sizeof(double)) == 0);
  }
}

TEST_CASE("training is reproducible bit for bit") {
  auto recs = tiny_records();
  Vocab vocab = vocab_for(recs);

  auto run = [&](double bank_weight) {
    auto model = CrossEncoder<float>::init(tiny_config(), vocab, 11);
    TrainConfig cfg;
    cfg.learning_rate = 0.02;
    cfg.epochs = 2;
    cfg.batch_size = 4;
    cfg.grad_accum_steps = 2;
    cfg.memory_bank_size = 16;
    cfg.memory_bank_weight = bank_weight;
    cfg.seed = 5;
    train(model, recs, cfg);
    return save_checkpoint(model);
  };

  CHECK(run(0.0) == run(0.0));
  CHECK(run(0.5) == run(0.5));
}

TEST_CASE("recompute toggling changes peak memory but not the trace") {
  auto recs = tiny_records();
  Vocab vocab = vocab_for(recs);

  auto run = [&](bool recompute, int64_t* peak) {
    auto model = CrossEncoder<double>::init(tiny_config(), vocab, 13);
    TrainConfig cfg;
    cfg.learning_rate = 0.02;
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.grad_accum_steps = 1;
    cfg.memory_bank_weight = 0.25;
    cfg.memory_bank_size = 32;
    cfg.seed = 21;
    cfg.recompute_activations = recompute;
    TapeMeter meter;
    auto result = train(model, recs, cfg, &meter);
    *peak = meter.peak;
    return std::make_pair(result, save_checkpoint(model));
  };

  int64_t peak_full = 0, peak_ckpt = 0;
  auto [res_full, ckpt_full] = run(false, &peak_full);
  auto [res_ckpt, ckpt_ckpt] = run(true, &peak_ckpt);

  REQUIRE(res_full.trace.size() == res_ckpt.trace.size());
  for (size_t i = 0; i < res_full.trace.size(); ++i) {
    CHECK(std::memcmp(&res_full.trace[i].total, &res_ckpt.trace[i].total, sizeof(double)) == 0);
    CHECK(std::memcmp(&res_full.trace[i].triplet_loss, &res_ckpt.trace[i].triplet_loss,
                      sizeof(double)) == 0);
    CHECK(std::memcmp(&res_full.trace[i].bank_loss, &res_ckpt.trace[i].bank_loss,
                      sizeof(double)) == 0);
  }
  CHECK(ckpt_full == ckpt_ckpt);
  CHECK(peak_ckpt < peak_full);
}

TEST_CASE("non-finite loss aborts with diagnostics") {
  auto recs = tiny_records();
  recs.resize(4);
  Vocab vocab = vocab_for(recs);
  auto model = CrossEncoder<double>::init(tiny_config(), vocab, 1);
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.grad_accum_steps = 1;
  cfg.memory_bank_weight = 0;
  cfg.margin = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(train(model, recs, cfg), TrainingAbort);
  try {
    auto model2 = CrossEncoder<double>::init(tiny_config(), vocab, 1);
    train(model2, recs, cfg);
  } catch (const TrainingAbort& e) {
    std::string msg = e.what();
    CHECK(msg.find("macro step") != std::string::npos);
    CHECK(msg.find("records") != std::string::npos);
  }
}

TEST_CASE("training on learnable toy triplets drives the loss down") {
  auto recs = tiny_records();
  Vocab vocab = vocab_for(recs);
  auto model = CrossEncoder<double>::init(tiny_config(), vocab, 77);
  TrainConfig cfg;
  cfg.learning_rate = 0.3;
  cfg.epochs = 30;
  cfg.batch_size = 4;
  cfg.grad_accum_steps = 1;
  cfg.memory_bank_weight = 0;
  cfg.seed = 2;
  auto result = train(model, recs, cfg);
  CHECK(result.epoch_mean_loss.back() < 0.1 * result.epoch_mean_loss.front());

  // Trained model separates positives from negatives.
  int good = 0, total = 0;
  for (const auto& r : recs) {
    auto q = tokenize(r.query, vocab);
    double sp = score(model, q, tokenize(r.pos[0], vocab));
    double sn = score(model, q, tokenize(r.neg[0], vocab));
    good += (sp > sn);
    ++total;
  }
  CHECK(good == total);
}

TEST_CASE("loss trace CSV format") {
  std::vector<TraceRow> trace = {{0, 5e-5, 1.0, 2.0, 1.5}, {1, 4e-5, 0.5, 1.0, 0.75}};
  write_loss_trace(trace, "/tmp/blockrank_trace_test.csv");
  std::ifstream f("/tmp/blockrank_trace_test.csv");
  std::string header;
  std::getline(f, header);
  CHECK(header == "step,lr,triplet_loss,bank_loss,total");
  std::string row;
  std::getline(f, row);
  CHECK(row.substr(0, 2) == "0,");
}

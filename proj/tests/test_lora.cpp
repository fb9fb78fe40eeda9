#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <stemedit/fusion.hpp>

using namespace stemedit;

namespace {

RunConfig tiny_cfg() {
  RunConfig rc;
  rc.model.d_model = 8;
  rc.model.n_layers = 2;
  rc.model.n_heads = 2;
  rc.model.d_text = 6;
  rc.model.t_max = 16;
  rc.codec.n_codebooks = 2;
  rc.codec.codebook_size = 8;
  rc.lora.rank = 2;
  return rc;
}

}  // namespace

TEST_CASE("init_lora: B zero, A seeded, closed-form trainable count") {
  RunConfig rc = tiny_cfg();
  auto s1 = LoraSet<float>::init(rc, 7);
  auto s2 = LoraSet<float>::init(rc, 7);
  for (auto& p : s1.q) CHECK(p.b.value.cwiseAbs().maxCoeff() == 0.0f);
  for (auto& p : s1.v) CHECK(p.b.value.cwiseAbs().maxCoeff() == 0.0f);
  auto p1 = s1.params(), p2 = s2.params();
  for (size_t i = 0; i < p1.size(); ++i)
    CHECK(std::memcmp(p1[i]->value.data(), p2[i]->value.data(),
                      sizeof(float) * size_t(p1[i]->value.size())) == 0);

  int64_t actual = 0;
  for (auto* p : p1) actual += p->value.size();
  CHECK(actual == count_lora_params(rc));
  // per layer: q pair r*(d+d), v pair r*(d_text+d)
  CHECK(count_lora_params(rc) == 2 * (2 * (8 + 8) + 2 * (6 + 8)));

  RunConfig bad = rc;
  bad.lora.rank = 0;
  CHECK_THROWS_AS(LoraSet<float>::init(bad, 1), ConfigError);
}

TEST_CASE("apply_lora: B=0 identity, hand case, rank bound") {
  SUBCASE("zero B leaves the frozen weight untouched") {
    Mat<float> w(3, 3);
    w.setRandom();
    LoraPair<float> pair;
    pair.a = Parameter<float>("a", Mat<float>::Random(2, 3));
    pair.b = Parameter<float>("b", Mat<float>::Zero(2, 3));
    pair.scale = 1.0f;
    Mat<float> eff = apply_lora(w, pair);
    CHECK(std::memcmp(eff.data(), w.data(), sizeof(float) * 9) == 0);
  }
  SUBCASE("hand matrix product") {
    // W = I2, A = [[1, 0]], B = [[0, 1]]: A^T B = [[0,1],[0,0]]
    Mat<float> w = Mat<float>::Identity(2, 2);
    LoraPair<float> pair;
    Mat<float> a(1, 2), b(1, 2);
    a << 1, 0;
    b << 0, 1;
    pair.a = Parameter<float>("a", a);
    pair.b = Parameter<float>("b", b);
    pair.scale = 1.0f;
    Mat<float> eff = apply_lora(w, pair);
    CHECK(eff(0, 0) == 1.0f);
    CHECK(eff(0, 1) == 1.0f);
    CHECK(eff(1, 0) == 0.0f);
    CHECK(eff(1, 1) == 1.0f);
  }
  SUBCASE("delta has numerical rank <= r") {
    Rng rng(3);
    const int r = 2, din = 6, dout = 7;
    Mat<double> w = Mat<double>::Zero(din, dout);
    LoraPair<double> pair;
    pair.a = Parameter<double>("a", Mat<double>(r, din));
    pair.b = Parameter<double>("b", Mat<double>(r, dout));
    for (Eigen::Index i = 0; i < pair.a.value.size(); ++i) pair.a.value.data()[i] = rng.normal();
    for (Eigen::Index i = 0; i < pair.b.value.size(); ++i) pair.b.value.data()[i] = rng.normal();
    pair.scale = 1.0;
    Mat<double> delta = apply_lora(w, pair);
    Eigen::JacobiSVD<Mat<double>> svd(delta);
    const auto& sv = svd.singularValues();
    for (Eigen::Index i = r; i < sv.size(); ++i) CHECK(sv(i) < 1e-8 * sv(0));
  }
  SUBCASE("shape mismatch is rejected") {
    Mat<float> w(3, 3);
    w.setZero();
    LoraPair<float> pair;
    pair.a = Parameter<float>("a", Mat<float>::Zero(2, 4));
    pair.b = Parameter<float>("b", Mat<float>::Zero(2, 3));
    CHECK_THROWS_AS(apply_lora(w, pair), InputError);
  }
}

TEST_CASE("lora_cross_attention: zero-delta equals the frozen path bitwise") {
  RunConfig rc = tiny_cfg();
  auto m = BaseModel<float>::init(rc, 11);
  auto lora = LoraSet<float>::init(rc, 13);
  Rng rng(17);
  Mat<float> music(5, rc.model.d_model), text(3, rc.model.d_text);
  for (Eigen::Index i = 0; i < music.size(); ++i) music.data()[i] = float(0.5 * rng.normal());
  for (Eigen::Index i = 0; i < text.size(); ++i) text.data()[i] = float(0.5 * rng.normal());
  std::vector<uint8_t> mask(3, 1);

  Tape<float> t;
  auto mus = t.constant(music);
  auto txt = t.constant(text);
  auto with = lora_cross_attention<float>(t, m, 0, mus, txt, mask, &lora);
  auto without = lora_cross_attention<float>(t, m, 0, mus, txt, mask, nullptr);
  CHECK(std::memcmp(t.value(with).data(), t.value(without).data(),
                    sizeof(float) * size_t(t.value(with).size())) == 0);
}

TEST_CASE("lora_cross_attention: single text token takes all attention") {
  RunConfig rc = tiny_cfg();
  auto m = BaseModel<float>::init(rc, 19);
  Rng rng(23);
  Mat<float> music(4, rc.model.d_model), text(1, rc.model.d_text);
  for (Eigen::Index i = 0; i < music.size(); ++i) music.data()[i] = float(rng.normal());
  for (Eigen::Index i = 0; i < text.size(); ++i) text.data()[i] = float(rng.normal());
  std::vector<uint8_t> mask(1, 1);
  Tape<float> t;
  ForwardTrace<float> trace;
  lora_cross_attention<float>(t, m, 0, t.constant(music), t.constant(text), mask, nullptr, &trace);
  REQUIRE(trace.attention_probs.size() == size_t(rc.model.n_heads));
  for (auto id : trace.attention_probs) {
    const Mat<float>& probs = t.value(id);
    CHECK(probs.cols() == 1);
    for (Eigen::Index i = 0; i < probs.rows(); ++i) CHECK(probs(i, 0) == 1.0f);
  }
}

TEST_CASE("lora_cross_attention matches a scalar-loop hand evaluation") {
  // one head, small dims, LoRA deltas on Q and V
  RunConfig rc = tiny_cfg();
  rc.model.n_heads = 1;
  rc.model.d_model = 3;
  rc.model.d_text = 2;
  auto m = BaseModel<double>::init(rc, 29);
  auto lora = LoraSet<double>::init(rc, 31);
  Rng rng(37);
  for (auto& p : lora.q)
    for (Eigen::Index i = 0; i < p.b.value.size(); ++i) p.b.value.data()[i] = 0.3 * rng.normal();
  for (auto& p : lora.v)
    for (Eigen::Index i = 0; i < p.b.value.size(); ++i) p.b.value.data()[i] = 0.3 * rng.normal();

  const int T = 2, S = 2, d = 3, dt = 2;
  Mat<double> music(T, d), text(S, dt);
  for (Eigen::Index i = 0; i < music.size(); ++i) music.data()[i] = rng.normal();
  for (Eigen::Index i = 0; i < text.size(); ++i) text.data()[i] = rng.normal();
  std::vector<uint8_t> mask(S, 1);

  Tape<double> t;
  auto got_id = lora_cross_attention<double>(t, m, 0, t.constant(music), t.constant(text), mask, &lora);
  const Mat<double>& got = t.value(got_id);

  // hand evaluation with explicit loops
  auto& xa = m.layers[0].xattn;
  Mat<double> wq_eff = xa.wq.value + lora.q[0].a.value.transpose() * lora.q[0].b.value;
  Mat<double> wv_eff = xa.wv.value + lora.v[0].a.value.transpose() * lora.v[0].b.value;
  Mat<double> q = music * wq_eff;          // queries from the music stream
  Mat<double> k = text * xa.wk.value;      // keys from the instruction, frozen
  Mat<double> v = text * wv_eff;           // values from the instruction
  Mat<double> expect(T, d);
  for (int i = 0; i < T; ++i) {
    double scores[2], mx = -1e300;
    for (int j = 0; j < S; ++j) {
      double s = 0;
      for (int c = 0; c < d; ++c) s += q(i, c) * k(j, c);
      scores[j] = s / std::sqrt(double(d));
      mx = std::max(mx, scores[j]);
    }
    double sum = 0;
    for (int j = 0; j < S; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      sum += scores[j];
    }
    for (int c = 0; c < d; ++c) {
      double acc = 0;
      for (int j = 0; j < S; ++j) acc += (scores[j] / sum) * v(j, c);
      expect(i, c) = acc;
    }
  }
  expect = expect * xa.wo.value;
  for (int i = 0; i < T; ++i)
    for (int c = 0; c < d; ++c) CHECK(got(i, c) == doctest::Approx(expect(i, c)).epsilon(1e-10));

  SUBCASE("frozen projections never move during adaptation") {
    Mat<double> wq_before = xa.wq.value, wk_before = xa.wk.value, wv_before = xa.wv.value;
    Tape<double> t2;
    auto out = lora_cross_attention<double>(t2, m, 0, t2.constant(music), t2.constant(text), mask, &lora);
    t2.backward(t2.mean_all(out));
    CHECK((xa.wq.value - wq_before).cwiseAbs().maxCoeff() == 0.0);
    CHECK((xa.wk.value - wk_before).cwiseAbs().maxCoeff() == 0.0);
    CHECK((xa.wv.value - wv_before).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("all-masked text is an input error") {
    std::vector<uint8_t> none(S, 0);
    Tape<double> t3;
    CHECK_THROWS_AS(
        lora_cross_attention<double>(t3, m, 0, t3.constant(music), t3.constant(text), none, &lora),
        InputError);
  }
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <stemedit/pipeline.hpp>

namespace fs = std::filesystem;
using namespace stemedit;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("stemedit_ckpt_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RunConfig tiny_cfg() {
  RunConfig rc;
  rc.model.d_model = 16;
  rc.model.n_layers = 2;
  rc.model.n_heads = 2;
  rc.model.d_text = 8;
  rc.model.t_max = 16;
  rc.codec.n_codebooks = 2;
  rc.codec.codebook_size = 8;
  rc.codec.feature_dim = 8;
  rc.lora.rank = 2;
  rc.trainer.batch_size = 2;
  rc.trainer.grad_accum = 1;
  rc.trainer.warmup_steps = 2;
  rc.trainer.total_steps = 32;
  return rc;
}

ModelBundle tiny_bundle(const RunConfig& rc) {
  ModelBundle b;
  b.cfg = rc;
  Rng rng(1);
  Mat<float> corpus(64, rc.codec.feature_dim);
  for (Eigen::Index i = 0; i < corpus.size(); ++i) corpus.data()[i] = float(rng.normal());
  b.codec = train_codebooks(corpus, rc.codec, 3);
  b.base = BaseModel<float>::init(rc, rc.seed);
  return b;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<TokenizedTriplet> toy_items(BaseModel<float>& m, const RunConfig& rc, int n) {
  Rng rng(50);
  std::vector<TokenizedTriplet> items;
  for (int i = 0; i < n; ++i) {
    TokenizedTriplet t;
    t.condition.tokens.resize(2, 5);
    t.target.tokens.resize(2, 5);
    for (int c = 0; c < 2; ++c)
      for (int f = 0; f < 5; ++f) {
        t.condition.tokens(c, f) = int32_t(rng.uniform_int(0, rc.codec.codebook_size - 1));
        t.target.tokens(c, f) = int32_t(rng.uniform_int(0, rc.codec.codebook_size - 1));
      }
    t.instruction = m.text.vocab.tokenize(i % 2 ? "Add drums" : "Remove drums");
    items.push_back(std::move(t));
  }
  return items;
}

}  // namespace

TEST_CASE("TensorFile: round trip, groups, duplicate rejection") {
  TempDir dir;
  TensorFile f;
  Mat<float> m(3, 2);
  m << 1, 2, 3, 4, 5, 6;
  f.add_matrix("a/weight", TensorGroup::Frozen, m);
  f.add_matrix("b/weight", TensorGroup::Trainable, 2 * m);
  f.add_bytes("meta/note", TensorGroup::Meta, "hello");
  CHECK_THROWS_AS(f.add_matrix("a/weight", TensorGroup::Frozen, m), InputError);

  std::string path = (dir.path / "t.bin").string();
  f.save(path);
  TensorFile g = TensorFile::load(path);
  CHECK((g.matrix("a/weight") - m).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(g.bytes("meta/note") == "hello");
  CHECK(g.group_names(TensorGroup::Frozen) == std::vector<std::string>{"a/weight"});
  CHECK(g.group_names(TensorGroup::Trainable) == std::vector<std::string>{"b/weight"});
  CHECK(g.group_hash(TensorGroup::Frozen) == f.group_hash(TensorGroup::Frozen));
  CHECK_THROWS_AS(g.matrix("missing"), InputError);
  CHECK_THROWS_AS(TensorFile::load((dir.path / "nope.bin").string()), InputError);
}

TEST_CASE("bundle save/load restores every float bit") {
  TempDir dir;
  RunConfig rc = tiny_cfg();
  ModelBundle b = tiny_bundle(rc);
  b.base.set_frozen(true);
  b.fusion = std::make_unique<FusionParams<float>>(FusionParams<float>::init(rc, 5));
  b.lora = std::make_unique<LoraSet<float>>(LoraSet<float>::init(rc, 7));

  std::string path = (dir.path / "bundle.ckpt").string();
  save_bundle(b, nullptr, path);
  ModelBundle loaded = load_bundle(path);

  CHECK(loaded.base.frozen);
  auto pa = b.base.params();
  auto pb = loaded.base.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(std::memcmp(pa[i]->value.data(), pb[i]->value.data(),
                      sizeof(float) * size_t(pa[i]->value.size())) == 0);
  }
  REQUIRE(loaded.fusion != nullptr);
  REQUIRE(loaded.lora != nullptr);
  auto fa = b.fusion->params(), fb = loaded.fusion->params();
  for (size_t i = 0; i < fa.size(); ++i)
    CHECK(std::memcmp(fa[i]->value.data(), fb[i]->value.data(),
                      sizeof(float) * size_t(fa[i]->value.size())) == 0);
  CHECK(loaded.codec.codebooks.size() == b.codec.codebooks.size());
  CHECK((loaded.codec.analysis - b.codec.analysis).cwiseAbs().maxCoeff() == 0.0f);

  SUBCASE("saving the loaded bundle reproduces the file byte for byte") {
    std::string path2 = (dir.path / "bundle2.ckpt").string();
    save_bundle(loaded, nullptr, path2);
    CHECK(slurp(path) == slurp(path2));
  }
}

TEST_CASE("checkpoint round trip: save, load, one step equals straight-through") {
  TempDir dir;
  RunConfig rc = tiny_cfg();

  // run A: 6 steps straight
  ModelBundle a = tiny_bundle(rc);
  a.base.set_frozen(true);
  a.fusion = std::make_unique<FusionParams<float>>(FusionParams<float>::init(rc, 5));
  a.lora = std::make_unique<LoraSet<float>>(LoraSet<float>::init(rc, 7));
  auto items = toy_items(a.base, rc, 8);
  TrainState sa;
  sa.seed = rc.seed;
  TrainerConfig six = rc.trainer;
  six.total_steps = 6;
  finetune_loop(a.base, *a.fusion, a.lora.get(), items, six, sa);

  // run B: 5 steps, checkpoint, reload, 1 more step
  ModelBundle b = tiny_bundle(rc);
  b.base.set_frozen(true);
  b.fusion = std::make_unique<FusionParams<float>>(FusionParams<float>::init(rc, 5));
  b.lora = std::make_unique<LoraSet<float>>(LoraSet<float>::init(rc, 7));
  TrainState sb;
  sb.seed = rc.seed;
  TrainerConfig five = rc.trainer;
  five.total_steps = 5;
  finetune_loop(b.base, *b.fusion, b.lora.get(), items, five, sb);
  std::string path = (dir.path / "mid.ckpt").string();
  save_bundle(b, &sb, path);

  TrainState sc;
  ModelBundle c = load_bundle(path, &sc);
  CHECK(sc.step == 5);
  finetune_loop(c.base, *c.fusion, c.lora.get(), items, six, sc);  // runs step 5 only

  auto pa = a.fusion->params();
  auto pc = c.fusion->params();
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(std::memcmp(pa[i]->value.data(), pc[i]->value.data(),
                      sizeof(float) * size_t(pa[i]->value.size())) == 0);
  auto la = a.lora->params();
  auto lc = c.lora->params();
  for (size_t i = 0; i < la.size(); ++i)
    CHECK(std::memcmp(la[i]->value.data(), lc[i]->value.data(),
                      sizeof(float) * size_t(la[i]->value.size())) == 0);
}

TEST_CASE("config: file loading, precedence, unknown keys, serialization") {
  TempDir dir;
  std::string path = (dir.path / "run.cfg").string();
  {
    std::ofstream out(path);
    out << "# comment line\n";
    out << "trainer.lr = 0.001\n";
    out << "model.d_model = 32\n";
    out << "datagen.instruments = drums,bass\n";
  }
  RunConfig cfg = load_config_file(path);
  CHECK(cfg.trainer.lr == 0.001);
  CHECK(cfg.model.d_model == 32);
  CHECK(cfg.datagen.instruments == "drums,bass");
  CHECK(cfg.trainer.batch_size == 8);  // untouched default

  apply_config_kv(cfg, "trainer.batch_size", "4");
  CHECK(cfg.trainer.batch_size == 4);
  CHECK_THROWS_AS(apply_config_kv(cfg, "nope.nope", "1"), ConfigError);
  CHECK_THROWS_AS(apply_config_kv(cfg, "trainer.lr", "fast"), ConfigError);

  RunConfig echo = parse_config_text(serialize_config(cfg));
  CHECK(serialize_config(echo) == serialize_config(cfg));
}

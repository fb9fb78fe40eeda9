#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <stemedit/pipeline.hpp>

using namespace stemedit;

namespace {

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> sets;
  uint64_t seed = 0;
  bool seed_given = false;
};

void attach_config_args(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "config file (dotted key = value lines)")
      ->envname("STEMEDIT_CONFIG");
  cmd->add_option("--set", args.sets, "override one config key, e.g. --set trainer.lr=1e-3");
  cmd->add_option("--seed", args.seed, "run seed")->each([&args](const std::string&) {
    args.seed_given = true;
  });
}

RunConfig resolve_config(const ConfigArgs& args) {
  RunConfig cfg;
  if (!args.config_path.empty()) cfg = load_config_file(args.config_path, cfg);
  for (const std::string& kv : args.sets) {
    auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    apply_config_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.seed_given) cfg.seed = args.seed;
  std::cerr << "# resolved config\n" << serialize_config(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stemedit: instruction-driven stem editing over tokenized audio"};
  app.require_subcommand(1);

  ConfigArgs cfg_args;

  auto* gen = app.add_subcommand("gen-corpus", "synthesize a multi-stem track corpus");
  int gen_tracks = 24;
  std::string gen_out;
  attach_config_args(gen, cfg_args);
  gen->add_option("--tracks", gen_tracks, "number of tracks");
  gen->add_option("--out", gen_out, "output directory")->required()->envname("STEMEDIT_TRACKS_DIR");

  auto* mk = app.add_subcommand("make-triplets", "build the (instruction, condition, target) manifest");
  std::string mk_tracks, mk_out;
  int mk_count = 1000;
  attach_config_args(mk, cfg_args);
  mk->add_option("--tracks-dir", mk_tracks, "corpus directory")->required()->envname("STEMEDIT_TRACKS_DIR");
  mk->add_option("--count", mk_count, "number of triplets");
  mk->add_option("--out", mk_out, "output directory")->required()->envname("STEMEDIT_TRIPLETS_DIR");

  auto* pre = app.add_subcommand("pretrain", "train the codec and base model on the corpus");
  std::string pre_tracks, pre_out, pre_log;
  int pre_items = 512, pre_steps = -1;
  attach_config_args(pre, cfg_args);
  pre->add_option("--tracks-dir", pre_tracks, "corpus directory")->required()->envname("STEMEDIT_TRACKS_DIR");
  pre->add_option("--items", pre_items, "number of (description, clip) items");
  pre->add_option("--steps", pre_steps, "override trainer.total_steps");
  pre->add_option("--out", pre_out, "output checkpoint")->required();
  pre->add_option("--log", pre_log, "training log (jsonl)");

  auto* fin = app.add_subcommand("finetune", "train the fusion and LoRA adapters on triplets");
  std::string fin_base, fin_triplets, fin_out, fin_log;
  int fin_steps = -1, fin_bottleneck = -1;
  bool fin_no_text_fusion = false;
  attach_config_args(fin, cfg_args);
  fin->add_option("--base", fin_base, "pretrained checkpoint")->required()->envname("STEMEDIT_BASE_CKPT");
  fin->add_option("--triplets", fin_triplets, "triplet directory")->required()->envname("STEMEDIT_TRIPLETS_DIR");
  fin->add_option("--steps", fin_steps, "override trainer.total_steps");
  fin->add_option("--bottleneck", fin_bottleneck, "bottleneck width for the per-layer linears");
  fin->add_flag("--no-text-fusion", fin_no_text_fusion, "keep text cross-attention unadapted");
  fin->add_option("--out", fin_out, "output checkpoint")->required();
  fin->add_option("--log", fin_log, "training log (jsonl)");

  auto* edit = app.add_subcommand("edit", "apply one instruction to one WAV");
  std::string edit_ckpt, edit_in, edit_instruction, edit_out;
  double edit_temp = 0.0;
  int edit_topk = 0;
  bool edit_norm = false;
  attach_config_args(edit, cfg_args);
  edit->add_option("--ckpt", edit_ckpt, "finetuned checkpoint")->required()->envname("STEMEDIT_CKPT");
  edit->add_option("--in", edit_in, "input WAV")->required();
  edit->add_option("--instruction", edit_instruction, "edit instruction text")->required();
  edit->add_option("--out", edit_out, "output WAV")->required();
  edit->add_option("--temperature", edit_temp, "sampling temperature (0 = greedy)");
  edit->add_option("--top-k", edit_topk, "top-k truncation (0 = off)");
  edit->add_flag("--normalize", edit_norm, "peak-normalize the output WAV");

  auto* ev = app.add_subcommand("eval", "run the metric suite over a triplet manifest");
  std::string ev_ckpt, ev_triplets, ev_out;
  attach_config_args(ev, cfg_args);
  ev->add_option("--ckpt", ev_ckpt, "finetuned checkpoint")->required()->envname("STEMEDIT_CKPT");
  ev->add_option("--triplets", ev_triplets, "triplet directory")->required()->envname("STEMEDIT_TRIPLETS_DIR");
  ev->add_option("--out", ev_out, "output prefix (writes <prefix>.txt and <prefix>.jsonl)")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every trainable tensor");
  int gc_layers = 2, gc_dmodel = 8, gc_frames = 4, gc_rank = 2;
  double gc_h = 1e-5, gc_tol = 1e-4;
  attach_config_args(gc, cfg_args);
  gc->add_option("--layers", gc_layers, "decoder layers");
  gc->add_option("--dmodel", gc_dmodel, "model width");
  gc->add_option("--frames", gc_frames, "sequence length");
  gc->add_option("--rank", gc_rank, "LoRA rank");
  gc->add_option("--fd-step", gc_h, "finite-difference step");
  gc->add_option("--tol", gc_tol, "max relative error allowed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      RunConfig cfg = resolve_config(cfg_args);
      cmd_gen_corpus(cfg, gen_tracks, gen_out);
      std::cerr << "wrote " << gen_tracks << " tracks to " << gen_out << "\n";
    } else if (mk->parsed()) {
      RunConfig cfg = resolve_config(cfg_args);
      auto records = cmd_make_triplets(cfg, mk_tracks, mk_count, mk_out);
      std::cerr << "wrote " << records.size() << " triplets to " << mk_out << "\n";
    } else if (pre->parsed()) {
      RunConfig cfg = resolve_config(cfg_args);
      if (pre_steps >= 0) cfg.trainer.total_steps = pre_steps;
      cmd_pretrain(cfg, pre_tracks, pre_items, pre_out, pre_log);
      std::cerr << "pretrained checkpoint at " << pre_out << "\n";
    } else if (fin->parsed()) {
      RunConfig cfg = resolve_config(cfg_args);
      if (fin_steps >= 0) cfg.trainer.total_steps = fin_steps;
      if (fin_bottleneck >= 0) cfg.fusion.bottleneck = fin_bottleneck;
      if (fin_no_text_fusion) cfg.trainer.text_fusion = false;
      cmd_finetune(cfg, fin_base, fin_triplets, fin_out, fin_log);
      std::cerr << "finetuned checkpoint at " << fin_out << "\n";
    } else if (edit->parsed()) {
      ModelBundle bundle = load_bundle(edit_ckpt);
      Waveform input = read_wav(edit_in);
      expect_sample_rate(input, bundle.cfg.codec.sample_rate, "edit");
      Waveform out = edit_waveform(bundle, input, edit_instruction,
                                   Sampling{edit_temp, edit_topk, bundle.cfg.seed});
      write_wav(edit_out, out, WavEncoding::Float32, edit_norm);
      std::cerr << "wrote " << edit_out << "\n";
    } else if (ev->parsed()) {
      ModelBundle bundle = load_bundle(ev_ckpt);
      MetricsReport report = cmd_eval(bundle, ev_triplets);
      std::string table = report_table(report);
      std::ofstream(ev_out + ".txt") << table;
      std::ofstream(ev_out + ".jsonl") << report_records(report);
      std::cout << table;
    } else if (gc->parsed()) {
      RunConfig cfg;
      if (!cfg_args.config_path.empty()) cfg = load_config_file(cfg_args.config_path, cfg);
      cfg.model.n_layers = gc_layers;
      cfg.model.d_model = gc_dmodel;
      cfg.model.n_heads = 2;
      cfg.model.d_text = gc_dmodel;
      cfg.model.t_max = std::max(gc_frames, 8);
      cfg.codec.n_codebooks = 2;
      cfg.codec.codebook_size = 8;
      cfg.lora.rank = gc_rank;
      if (cfg_args.seed_given) cfg.seed = cfg_args.seed;
      auto report = grad_check(cfg, cfg.seed, gc_h, gc_frames);
      double worst = 0.0;
      for (const auto& e : report) {
        std::printf("%-32s max_rel_err %.3e\n", e.name.c_str(), e.max_rel_err);
        worst = std::max(worst, e.max_rel_err);
      }
      std::printf("worst %.3e (tolerance %.1e)\n", worst, gc_tol);
      if (worst >= gc_tol) {
        std::cerr << "gradcheck failed\n";
        return 2;
      }
    }
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

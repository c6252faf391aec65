#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fmkit/checkpoint.hpp"
#include "fmkit/config.hpp"
#include "fmkit/data.hpp"
#include "fmkit/metrics.hpp"
#include "fmkit/model.hpp"
#include "fmkit/threads.hpp"
#include "fmkit/train.hpp"

namespace fs = std::filesystem;
using namespace fmkit;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;

// One run per output directory; the lock file makes concurrent runs targeting
// the same directory fail fast instead of interleaving files.
struct RunLock {
  std::string path;
  bool held = false;

  void acquire(const std::string& dir) {
    fs::create_directories(dir);
    path = dir + "/.fmkit.lock";
    int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw std::runtime_error("output directory already in use (lock file " + path +
                               " exists); pick a distinct --out or remove a stale lock");
    ::close(fd);
    held = true;
  }
  ~RunLock() {
    if (held) {
      std::error_code ec;
      fs::remove(path, ec);
    }
  }
};

struct GlobalArgs {
  std::string config_path;
  uint64_t seed = 0;
  bool seed_set = false;
  std::string out = "fmkit_out";
  bool deterministic = false;
};

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

void write_snapshot(const std::string& out_dir, const FullConfig& cfg) {
  write_text_file(out_dir + "/config.txt", kv_text(full_config_kv(cfg)));
}

// preset < config file < CLI overrides (the caller applies its flag
// overrides after this returns).
FullConfig load_config(const GlobalArgs& g, const std::string& preset) {
  FullConfig cfg = preset_config(preset);
  if (!g.config_path.empty()) {
    std::ifstream f(g.config_path, std::ios::binary);
    if (!f) throw std::invalid_argument("cannot read config file: " + g.config_path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    apply_kv(cfg, parse_kv_text(text));
  }
  if (g.seed_set) {
    cfg.model.seed = g.seed;
    cfg.train.seed = g.seed;
    cfg.synth.seed = g.seed;
  }
  return cfg;
}

std::string run_mode_line(const GlobalArgs& g) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "deterministic = %s, threads = %d",
                g.deterministic ? "true" : "false", thread_cap());
  return buf;
}

int cmd_synth(const GlobalArgs& g, const FullConfig& cfg) {
  RunLock lock;
  lock.acquire(g.out);
  write_snapshot(g.out, cfg);
  Manifest mf = synth_dataset(cfg.synth, g.out);
  int n_real = 0, n_fake = 0;
  for (const auto& e : mf.entries) (e.label == Label::Real ? n_real : n_fake)++;
  std::printf("wrote %s\n", (g.out + "/manifest.tsv").c_str());
  std::printf("real %d  fake %d  (%s)\n", n_real, n_fake, run_mode_line(g).c_str());
  return kExitOk;
}

int cmd_train(const GlobalArgs& g, FullConfig cfg, const std::string& train_mf_path,
              const std::string& dev_mf_path) {
  RunLock lock;
  lock.acquire(g.out);

  Manifest train_mf, dev_mf;
  if (train_mf_path.empty()) {
    // self-contained smoke path: synthesize the dataset inside the run dir;
    // dev reuses the synth spec at a quarter size and a shifted seed
    SynthSpec tr = cfg.synth;
    SynthSpec dv = cfg.synth;
    dv.n_real = std::max(1, dv.n_real / 4);
    dv.n_fake = std::max(1, dv.n_fake / 4);
    dv.seed = mix64(tr.seed ^ 0xDE71ull);
    train_mf = synth_dataset(tr, g.out + "/data_train");
    dev_mf = synth_dataset(dv, g.out + "/data_dev");
    std::printf("synthesized train=%zu dev=%zu utterances\n", train_mf.entries.size(),
                dev_mf.entries.size());
  } else {
    train_mf = read_manifest(train_mf_path);
    if (dev_mf_path.empty())
      throw std::invalid_argument("--dev-manifest is required when --train-manifest is given");
    dev_mf = read_manifest(dev_mf_path);
  }
  // the input projection width must match the data on disk
  if (!train_mf.entries.empty() && train_mf.entries[0].C != cfg.model.C_in) {
    std::printf("note: model.c_in %d -> %d to match the training manifest\n",
                cfg.model.C_in, train_mf.entries[0].C);
    cfg.model.C_in = train_mf.entries[0].C;
  }
  write_snapshot(g.out, cfg);

  Model model = make_model(cfg.model);
  std::printf("%s: %lld params  (%s)\n", variant_to_string(cfg.model.block.variant).c_str(),
              static_cast<long long>(model.total_params()), run_mode_line(g).c_str());

  TrainResult res = train(model, train_mf, dev_mf, cfg.train, g.out, true);
  if (res.top.empty()) {
    std::printf("no epochs ran; nothing to average\n");
    return kExitOk;
  }
  int k = std::min<int>(cfg.train.avg_top_k, static_cast<int>(res.top.size()));
  std::vector<Tensor> avg = average_top_k(res.top, k);
  assign_params(model, avg);
  save_checkpoint(model, g.out + "/model_avg.ckpt");
  std::printf("best dev epoch %d%s; averaged top-%d -> %s/model_avg.ckpt\n", res.best_epoch,
              res.early_stopped ? " (early stop)" : "", k, g.out.c_str());
  return kExitOk;
}

struct ScoredManifest {
  std::vector<double> scores;  // aligned with manifest entries
};

ScoredManifest score_manifest(Model& model, const Manifest& mf) {
  ScoredManifest out;
  out.scores.resize(mf.entries.size());
  for (size_t i = 0; i < mf.entries.size(); ++i) {
    FeatureRecord rec = load_record(mf, static_cast<int>(i));
    out.scores[i] = model_forward(model, rec.features).score;
  }
  return out;
}

std::string eer_cell(const std::optional<EERResult>& r) {
  if (!r) return "      -      ";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%5.2f +-%5.2f", 100.0 * r->eer,
                100.0 * r->ci_half_width);
  return buf;
}

int cmd_eval(const GlobalArgs& g, const std::string& ckpt_path, const std::string& mf_path) {
  Model model = load_checkpoint(ckpt_path);
  Manifest mf = read_manifest(mf_path);

  RunLock lock;
  lock.acquire(g.out);
  FullConfig snap;
  snap.model = model.cfg;
  write_snapshot(g.out, snap);

  ScoredManifest sm = score_manifest(model, mf);

  ScoreSet pooled;
  std::vector<double> edges = default_bucket_edges();
  std::vector<std::vector<int>> buckets = bucket_by_duration(mf, edges);
  std::vector<ScoreSet> bucket_sets(buckets.size());
  for (size_t b = 0; b < buckets.size(); ++b) {
    for (int idx : buckets[b]) {
      auto& dst = mf.entries[idx].label == Label::Real ? bucket_sets[b].real_scores
                                                       : bucket_sets[b].fake_scores;
      dst.push_back(sm.scores[idx]);
      auto& pdst = mf.entries[idx].label == Label::Real ? pooled.real_scores
                                                        : pooled.fake_scores;
      pdst.push_back(sm.scores[idx]);
    }
  }

  BucketedEER rep = eer_by_bucket(bucket_sets);
  std::string text;
  char line[160];
  std::snprintf(line, sizeof(line), "pooled EER %.2f%% +- %.2f (n_real=%d n_fake=%d)\n",
                100.0 * rep.pooled.eer, 100.0 * rep.pooled.ci_half_width, rep.pooled.n_real,
                rep.pooled.n_fake);
  text += line;
  text += "bucket    n     EER% +- CI95\n";
  for (size_t b = 0; b < buckets.size(); ++b) {
    std::snprintf(line, sizeof(line), "%-8s %5zu  %s\n",
                  bucket_name(edges, static_cast<int>(b)).c_str(), buckets[b].size(),
                  eer_cell(rep.per_bucket[b]).c_str());
    text += line;
  }
  text += run_mode_line(g) + "\n";
  std::fputs(text.c_str(), stdout);
  write_text_file(g.out + "/eval.txt", text);
  return kExitOk;
}

int cmd_bench(const GlobalArgs& g, const FullConfig& cfg, const std::string& variants_csv,
              int runs, int warmup) {
  RunLock lock;
  lock.acquire(g.out);
  write_snapshot(g.out, cfg);

  std::vector<Variant> variants;
  {
    std::string cur;
    for (char c : variants_csv + ",") {
      if (c == ',') {
        if (!cur.empty()) variants.push_back(variant_from_string(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
  }
  if (variants.empty()) throw std::invalid_argument("no variants given");

  std::vector<double> durations = {1, 2, 3, 4, 5, 6};
  std::string text;
  char line[160];
  for (Variant v : variants) {
    ModelConfig mc = cfg.model;
    mc.block.variant = v;
    mc.block.dropout = 0.0;
    Model model = make_model(mc);
    RTFReport r = measure_rtf(model, durations, runs, warmup, cfg.synth.frame_rate,
                              cfg.model.seed);
    std::snprintf(line, sizeof(line), "%s  (runs=%d warmup=%d)%s\n", r.model_id.c_str(), runs,
                  warmup, r.timer_warning ? "  [timer resolution warning]" : "");
    text += line;
    text += "  dur_s    mean_rtf      std_rtf\n";
    for (const RTFRow& row : r.rows) {
      std::snprintf(line, sizeof(line), "  %5.1f  %10.6f  %11.6f\n", row.duration_s,
                    row.mean_rtf, row.std_rtf);
      text += line;
    }
  }

  std::vector<int> t_grid = {256, 512, 1024, 2048};
  std::vector<ComplexityRow> comp = complexity_probe(variants, cfg.model.D, t_grid, 2,
                                                     cfg.model.seed);
  text += "complexity (single block, forward only)\n";
  text += "  variant          slope   seconds per T\n";
  for (const ComplexityRow& row : comp) {
    std::snprintf(line, sizeof(line), "  %-15s %6.3f  ", row.variant.c_str(), row.slope);
    text += line;
    for (size_t i = 0; i < row.T.size(); ++i) {
      std::snprintf(line, sizeof(line), "T=%d:%.4f ", row.T[i], row.seconds[i]);
      text += line;
    }
    text += "\n";
  }
  text += run_mode_line(g) + "\n";
  std::fputs(text.c_str(), stdout);
  write_text_file(g.out + "/bench.txt", text);
  return kExitOk;
}

int cmd_gradcheck(const GlobalArgs& g, const FullConfig& cfg, double tolerance) {
  RunLock lock;
  lock.acquire(g.out);
  // the tiny config keeps the finite-difference sweep fast
  ModelConfig mc = cfg.model;
  mc.C_in = 8;
  mc.D = 8;
  mc.block.D = 8;
  mc.block.n_blocks = 1;
  mc.block.expand = 2;
  mc.block.n_state = 4;
  mc.block.dropout = 0.0;
  FullConfig snap = cfg;
  snap.model = mc;
  write_snapshot(g.out, snap);

  GradcheckReport rep = gradcheck(mc, tolerance, 50, cfg.model.seed);
  std::printf("%s: max rel err %.3e over %d coords (tolerance %g)\n",
              variant_to_string(mc.block.variant).c_str(), rep.max_rel_err, rep.n_coords,
              tolerance);
  if (!rep.pass) {
    std::printf("FAIL worst %s[%d]\n", rep.worst_param.c_str(), rep.worst_index);
    for (const std::string& f : rep.failures) std::printf("  %s\n", f.c_str());
    return kExitCheckFailure;
  }
  std::printf("PASS\n");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fmkit: BiMamba sequence-classification toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  GlobalArgs g;
  app.add_option("--config", g.config_path, "flat key = value config file");
  auto* seed_opt = app.add_option("--seed", g.seed, "seed applied to model, train, and synth");
  app.add_option("--out", g.out, "output directory (default fmkit_out)");
  app.add_flag("--deterministic", g.deterministic, "single-thread, reproducible kernels");

  std::string preset = "desk";

  // synth
  auto* synth = app.add_subcommand("synth", "generate a labeled synthetic dataset");
  int n_real = -1, n_fake = -1, synth_c = -1, frame_rate = -1;
  double dur_lo = -1, dur_hi = -1, amp = -1, window_frac = -1, chan_frac = -1;
  bool unpaired = false;
  synth->add_option("--n-real", n_real, "real utterance count");
  synth->add_option("--n-fake", n_fake, "fake utterance count");
  synth->add_option("--c", synth_c, "channels per frame");
  synth->add_option("--frame-rate", frame_rate, "frames per second");
  synth->add_option("--dur-lo", dur_lo, "min duration, seconds");
  synth->add_option("--dur-hi", dur_hi, "max duration, seconds");
  synth->add_option("--amp", amp, "artifact amplitude, x process std");
  synth->add_option("--window-frac", window_frac, "artifact window fraction of T");
  synth->add_option("--chan-frac", chan_frac, "artifact channel fraction of C");
  synth->add_flag("--unpaired", unpaired, "draw fake backgrounds independently of real ones");

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model and write model_avg.ckpt");
  std::string train_mf_path, dev_mf_path, variant_name;
  int blocks = -1, d_model = -1, n_state = -1, batch = -1, max_epochs = -1, patience = -1;
  int avg_top_k = -1;
  double lr = -1, wd = -1, dropout = -1;
  bool no_pre_ln = false, no_ffn = false, no_bidirectional = false, no_pooling = false;
  train_cmd->add_option("--preset", preset, "desk (default) or paper");
  train_cmd->add_option("--train-manifest", train_mf_path, "training manifest.tsv");
  train_cmd->add_option("--dev-manifest", dev_mf_path, "dev manifest.tsv");
  train_cmd->add_option("--variant", variant_name, "encoder variant");
  train_cmd->add_option("--blocks", blocks, "encoder block count");
  train_cmd->add_option("--d", d_model, "model width D");
  train_cmd->add_option("--n-state", n_state, "SSM state size");
  train_cmd->add_option("--lr", lr, "learning rate");
  train_cmd->add_option("--wd", wd, "weight decay");
  train_cmd->add_option("--dropout", dropout, "dropout probability");
  train_cmd->add_option("--batch", batch, "batch size");
  train_cmd->add_option("--max-epochs", max_epochs, "epoch cap");
  train_cmd->add_option("--patience", patience, "early-stop patience, epochs");
  train_cmd->add_option("--avg-top-k", avg_top_k, "checkpoints averaged into the final model");
  train_cmd->add_flag("--no-pre-ln", no_pre_ln, "ablation: drop pre-layer norms");
  train_cmd->add_flag("--no-ffn", no_ffn, "ablation: drop feed-forward modules");
  train_cmd->add_flag("--no-bidirectional", no_bidirectional, "ablation: forward SSM only");
  train_cmd->add_flag("--no-pooling", no_pooling, "ablation: mean pooling instead of attention");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "score a manifest with a checkpoint");
  std::string ckpt_path, eval_mf_path;
  eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint path")->required();
  eval_cmd->add_option("--manifest", eval_mf_path, "manifest.tsv to score")->required();

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "RTF and complexity-scaling benchmarks");
  std::string variants_csv = "pn_bimamba,transformer";
  int runs = 3, warmup = 1;
  bench_cmd->add_option("--preset", preset, "desk (default) or paper");
  bench_cmd->add_option("--variants", variants_csv, "comma-separated encoder variants");
  bench_cmd->add_option("--runs", runs, "timed repetitions per duration");
  bench_cmd->add_option("--warmup", warmup, "untimed warm-up repetitions");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  std::string gc_variant = "pn_bimamba";
  double tolerance = 1e-4;
  gc_cmd->add_option("--variant", gc_variant, "encoder variant to check");
  gc_cmd->add_option("--tolerance", tolerance, "max allowed relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUsage;
  }
  g.seed_set = seed_opt->count() > 0;

  if (const char* env = std::getenv("FMKIT_THREADS")) {
    int cap = std::atoi(env);
    if (cap >= 1) set_thread_cap(cap);
  }
  if (g.deterministic) set_thread_cap(1);

  try {
    if (*synth) {
      FullConfig cfg = load_config(g, preset);
      if (n_real >= 0) cfg.synth.n_real = n_real;
      if (n_fake >= 0) cfg.synth.n_fake = n_fake;
      if (synth_c >= 0) cfg.synth.C = synth_c;
      if (frame_rate >= 0) cfg.synth.frame_rate = frame_rate;
      if (dur_lo >= 0) cfg.synth.dur_lo = dur_lo;
      if (dur_hi >= 0) cfg.synth.dur_hi = dur_hi;
      if (amp >= 0) cfg.synth.artifact_amp = amp;
      if (window_frac >= 0) cfg.synth.artifact_window_frac = window_frac;
      if (chan_frac >= 0) cfg.synth.artifact_chan_frac = chan_frac;
      if (unpaired) cfg.synth.paired = false;
      return cmd_synth(g, cfg);
    }
    if (*train_cmd) {
      FullConfig cfg = load_config(g, preset);
      if (!variant_name.empty()) cfg.model.block.variant = variant_from_string(variant_name);
      if (blocks >= 0) cfg.model.block.n_blocks = blocks;
      if (d_model >= 0) {
        cfg.model.D = d_model;
        cfg.model.block.D = d_model;
      }
      if (n_state >= 0) cfg.model.block.n_state = n_state;
      if (lr >= 0) cfg.train.lr = lr;
      if (wd >= 0) cfg.train.weight_decay = wd;
      if (dropout >= 0) cfg.model.block.dropout = dropout;
      if (batch >= 0) cfg.train.batch_size = batch;
      if (max_epochs >= 0) cfg.train.max_epochs = max_epochs;
      if (patience >= 0) cfg.train.patience = patience;
      if (avg_top_k >= 0) cfg.train.avg_top_k = avg_top_k;
      cfg.model.block.ablation.disable_pre_ln |= no_pre_ln;
      cfg.model.block.ablation.disable_ffn |= no_ffn;
      cfg.model.block.ablation.disable_bidirectional |= no_bidirectional;
      cfg.model.block.ablation.disable_pooling |= no_pooling;
      return cmd_train(g, cfg, train_mf_path, dev_mf_path);
    }
    if (*eval_cmd) {
      return cmd_eval(g, ckpt_path, eval_mf_path);
    }
    if (*bench_cmd) {
      FullConfig cfg = load_config(g, preset);
      if (runs < 1 || warmup < 0) throw std::invalid_argument("--runs >= 1, --warmup >= 0");
      return cmd_bench(g, cfg, variants_csv, runs, warmup);
    }
    if (*gc_cmd) {
      FullConfig cfg = load_config(g, preset);
      cfg.model.block.variant = variant_from_string(gc_variant);
      return cmd_gradcheck(g, cfg, tolerance);
    }
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}

#include "fmkit/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <stdexcept>

namespace fmkit {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

KvMap parse_kv_text(const std::string& text) {
  KvMap out;
  size_t pos = 0;
  int lineno = 0;
  while (pos <= text.size()) {
    size_t nl = text.find('\n', pos);
    std::string line = text.substr(pos, nl == std::string::npos ? std::string::npos : nl - pos);
    pos = nl == std::string::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": missing '='");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    out[key] = val;
  }
  return out;
}

std::string kv_text(const KvList& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += " = ";
    out += v;
    out += "\n";
  }
  return out;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument(key + ": expected bool, got '" + v + "'");
}

int parse_int(const std::string& key, const std::string& v) {
  char* end = nullptr;
  long x = std::strtol(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size())
    throw std::invalid_argument(key + ": expected int, got '" + v + "'");
  return static_cast<int>(x);
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
  char* end = nullptr;
  unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  // strtoull silently wraps negative input, so reject it up front
  if (v.empty() || v[0] == '-' || end != v.c_str() + v.size())
    throw std::invalid_argument(key + ": expected unsigned int, got '" + v + "'");
  return static_cast<uint64_t>(x);
}

double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size())
    throw std::invalid_argument(key + ": expected number, got '" + v + "'");
  return x;
}

KvList model_config_kv(const ModelConfig& cfg) {
  const BlockConfig& b = cfg.block;
  KvList kv;
  kv.emplace_back("model.c_in", std::to_string(cfg.C_in));
  kv.emplace_back("model.d", std::to_string(cfg.D));
  kv.emplace_back("model.head_hidden", std::to_string(cfg.head_hidden));
  kv.emplace_back("model.seed", std::to_string(cfg.seed));
  kv.emplace_back("model.variant", variant_to_string(b.variant));
  kv.emplace_back("model.blocks", std::to_string(b.n_blocks));
  kv.emplace_back("model.ffn_mult", std::to_string(b.ffn_mult));
  kv.emplace_back("model.expand", std::to_string(b.expand));
  kv.emplace_back("model.n_state", std::to_string(b.n_state));
  kv.emplace_back("model.conv_k", std::to_string(b.conv_k));
  kv.emplace_back("model.conformer_conv_k", std::to_string(b.conformer_conv_k));
  kv.emplace_back("model.mhsa_heads", std::to_string(b.mhsa_heads));
  kv.emplace_back("model.strict_eq16", b.strict_eq16 ? "true" : "false");
  kv.emplace_back("model.ssm_skip", b.ssm_skip ? "true" : "false");
  kv.emplace_back("model.dropout", format_double(b.dropout));
  kv.emplace_back("model.no_pre_ln", b.ablation.disable_pre_ln ? "true" : "false");
  kv.emplace_back("model.no_ffn", b.ablation.disable_ffn ? "true" : "false");
  kv.emplace_back("model.no_bidirectional", b.ablation.disable_bidirectional ? "true" : "false");
  kv.emplace_back("model.no_pooling", b.ablation.disable_pooling ? "true" : "false");
  return kv;
}

bool set_model_key(ModelConfig& cfg, const std::string& key, const std::string& v) {
  BlockConfig& b = cfg.block;
  if (key == "model.c_in") cfg.C_in = parse_int(key, v);
  else if (key == "model.d") cfg.D = parse_int(key, v);
  else if (key == "model.head_hidden") cfg.head_hidden = parse_int(key, v);
  else if (key == "model.seed") cfg.seed = parse_u64(key, v);
  else if (key == "model.variant") b.variant = variant_from_string(v);
  else if (key == "model.blocks") b.n_blocks = parse_int(key, v);
  else if (key == "model.ffn_mult") b.ffn_mult = parse_int(key, v);
  else if (key == "model.expand") b.expand = parse_int(key, v);
  else if (key == "model.n_state") b.n_state = parse_int(key, v);
  else if (key == "model.conv_k") b.conv_k = parse_int(key, v);
  else if (key == "model.conformer_conv_k") b.conformer_conv_k = parse_int(key, v);
  else if (key == "model.mhsa_heads") b.mhsa_heads = parse_int(key, v);
  else if (key == "model.strict_eq16") b.strict_eq16 = parse_bool(key, v);
  else if (key == "model.ssm_skip") b.ssm_skip = parse_bool(key, v);
  else if (key == "model.dropout") b.dropout = parse_double(key, v);
  else if (key == "model.no_pre_ln") b.ablation.disable_pre_ln = parse_bool(key, v);
  else if (key == "model.no_ffn") b.ablation.disable_ffn = parse_bool(key, v);
  else if (key == "model.no_bidirectional") b.ablation.disable_bidirectional = parse_bool(key, v);
  else if (key == "model.no_pooling") b.ablation.disable_pooling = parse_bool(key, v);
  else return false;
  return true;
}

ModelConfig model_config_from_kv(const KvMap& kv) {
  ModelConfig cfg;
  for (const auto& [k, v] : kv) {
    if (!set_model_key(cfg, k, v))
      throw std::invalid_argument("unknown model config key: " + k);
  }
  cfg.block.D = cfg.D;
  return cfg;
}

KvList train_config_kv(const TrainConfig& tc) {
  KvList kv;
  kv.emplace_back("train.lr", format_double(tc.lr));
  kv.emplace_back("train.weight_decay", format_double(tc.weight_decay));
  kv.emplace_back("train.batch", std::to_string(tc.batch_size));
  kv.emplace_back("train.max_epochs", std::to_string(tc.max_epochs));
  kv.emplace_back("train.patience", std::to_string(tc.patience));
  kv.emplace_back("train.w_real", format_double(tc.w_real));
  kv.emplace_back("train.w_fake", format_double(tc.w_fake));
  kv.emplace_back("train.avg_top_k", std::to_string(tc.avg_top_k));
  kv.emplace_back("train.seed", std::to_string(tc.seed));
  return kv;
}

bool set_train_key(TrainConfig& tc, const std::string& key, const std::string& v) {
  if (key == "train.lr") tc.lr = parse_double(key, v);
  else if (key == "train.weight_decay") tc.weight_decay = parse_double(key, v);
  else if (key == "train.batch") tc.batch_size = parse_int(key, v);
  else if (key == "train.max_epochs") tc.max_epochs = parse_int(key, v);
  else if (key == "train.patience") tc.patience = parse_int(key, v);
  else if (key == "train.w_real") tc.w_real = parse_double(key, v);
  else if (key == "train.w_fake") tc.w_fake = parse_double(key, v);
  else if (key == "train.avg_top_k") tc.avg_top_k = parse_int(key, v);
  else if (key == "train.seed") tc.seed = parse_u64(key, v);
  else return false;
  return true;
}

KvList synth_spec_kv(const SynthSpec& sp) {
  KvList kv;
  kv.emplace_back("synth.n_real", std::to_string(sp.n_real));
  kv.emplace_back("synth.n_fake", std::to_string(sp.n_fake));
  kv.emplace_back("synth.c", std::to_string(sp.C));
  kv.emplace_back("synth.frame_rate", std::to_string(sp.frame_rate));
  kv.emplace_back("synth.dur_lo", format_double(sp.dur_lo));
  kv.emplace_back("synth.dur_hi", format_double(sp.dur_hi));
  kv.emplace_back("synth.amp", format_double(sp.artifact_amp));
  kv.emplace_back("synth.window_frac", format_double(sp.artifact_window_frac));
  kv.emplace_back("synth.chan_frac", format_double(sp.artifact_chan_frac));
  kv.emplace_back("synth.paired", sp.paired ? "true" : "false");
  kv.emplace_back("synth.seed", std::to_string(sp.seed));
  return kv;
}

bool set_synth_key(SynthSpec& sp, const std::string& key, const std::string& v) {
  if (key == "synth.n_real") sp.n_real = parse_int(key, v);
  else if (key == "synth.n_fake") sp.n_fake = parse_int(key, v);
  else if (key == "synth.c") sp.C = parse_int(key, v);
  else if (key == "synth.frame_rate") sp.frame_rate = parse_int(key, v);
  else if (key == "synth.dur_lo") sp.dur_lo = parse_double(key, v);
  else if (key == "synth.dur_hi") sp.dur_hi = parse_double(key, v);
  else if (key == "synth.amp") sp.artifact_amp = parse_double(key, v);
  else if (key == "synth.window_frac") sp.artifact_window_frac = parse_double(key, v);
  else if (key == "synth.chan_frac") sp.artifact_chan_frac = parse_double(key, v);
  else if (key == "synth.paired") sp.paired = parse_bool(key, v);
  else if (key == "synth.seed") sp.seed = parse_u64(key, v);
  else return false;
  return true;
}

KvList full_config_kv(const FullConfig& cfg) {
  KvList kv = model_config_kv(cfg.model);
  KvList t = train_config_kv(cfg.train);
  KvList s = synth_spec_kv(cfg.synth);
  kv.insert(kv.end(), t.begin(), t.end());
  kv.insert(kv.end(), s.begin(), s.end());
  return kv;
}

void set_full_key(FullConfig& cfg, const std::string& key, const std::string& value) {
  if (set_model_key(cfg.model, key, value)) { cfg.model.block.D = cfg.model.D; return; }
  if (set_train_key(cfg.train, key, value)) return;
  if (set_synth_key(cfg.synth, key, value)) return;
  throw std::invalid_argument("unknown config key: " + key);
}

void apply_kv(FullConfig& cfg, const KvMap& kv) {
  for (const auto& [k, v] : kv) set_full_key(cfg, k, v);
}

FullConfig desk_config() {
  FullConfig cfg;
  cfg.model.C_in = 32;
  cfg.model.D = 64;
  cfg.model.block.D = 64;
  cfg.model.block.n_blocks = 4;
  cfg.model.block.n_state = 8;
  cfg.train.lr = 1e-4;
  return cfg;
}

FullConfig paper_config() {
  FullConfig cfg;
  cfg.model.C_in = 1024;
  cfg.model.D = 144;
  cfg.model.block.D = 144;
  cfg.model.block.n_blocks = 7;
  cfg.model.block.n_state = 16;
  cfg.train.lr = 1e-6;
  return cfg;
}

FullConfig preset_config(const std::string& name) {
  if (name == "desk") return desk_config();
  if (name == "paper") return paper_config();
  throw std::invalid_argument("unknown preset: " + name + " (expected desk or paper)");
}

}  // namespace fmkit

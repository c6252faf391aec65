#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "fmkit/data.hpp"
#include "fmkit/model.hpp"
#include "fmkit/train.hpp"

namespace fmkit {

using KvList = std::vector<std::pair<std::string, std::string>>;
using KvMap = std::map<std::string, std::string>;

// Flat "key = value" text; '#' starts a comment, blank lines ignored.
KvMap parse_kv_text(const std::string& text);
std::string kv_text(const KvList& kv);

std::string format_double(double v);  // shortest round-trip decimal
bool parse_bool(const std::string& key, const std::string& v);
int parse_int(const std::string& key, const std::string& v);
uint64_t parse_u64(const std::string& key, const std::string& v);
double parse_double(const std::string& key, const std::string& v);

KvList model_config_kv(const ModelConfig& cfg);
// Returns false when the key does not belong to the model section.
bool set_model_key(ModelConfig& cfg, const std::string& key, const std::string& value);
// Every key must be a model key; throws std::invalid_argument otherwise.
ModelConfig model_config_from_kv(const KvMap& kv);

KvList train_config_kv(const TrainConfig& tc);
bool set_train_key(TrainConfig& tc, const std::string& key, const std::string& value);

KvList synth_spec_kv(const SynthSpec& sp);
bool set_synth_key(SynthSpec& sp, const std::string& key, const std::string& value);

// Everything one run needs; sections share the flat dotted-key namespace.
struct FullConfig {
  ModelConfig model;
  TrainConfig train;
  SynthSpec synth;
};

KvList full_config_kv(const FullConfig& cfg);
// Throws std::invalid_argument on keys outside every section.
void set_full_key(FullConfig& cfg, const std::string& key, const std::string& value);
void apply_kv(FullConfig& cfg, const KvMap& kv);

// Presets. "desk" is sized for CPU-scale synthetic runs; "paper" mirrors the
// published recipe (XLSR-width inputs, 7 blocks, lr 1e-6).
FullConfig desk_config();
FullConfig paper_config();
FullConfig preset_config(const std::string& name);

}  // namespace fmkit

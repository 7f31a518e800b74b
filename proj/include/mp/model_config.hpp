#pragma once

#include <map>
#include <stdexcept>
#include <string>

namespace mp {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DecoderAttention { causal, bidirectional };
enum class ModelKind { ar, cmlm };

const char* to_string(DecoderAttention a);
const char* to_string(ModelKind k);
DecoderAttention decoder_attention_from_string(const std::string& s);
ModelKind model_kind_from_string(const std::string& s);

struct ModelConfig {
  int layers = 2;
  int heads = 4;
  int d_model = 64;
  int d_hidden = 256;
  int vocab_size = 0;
  int max_len = 32;
  float dropout = 0.3f;
  DecoderAttention decoder_attention = DecoderAttention::bidirectional;
  bool tie_embeddings = true;       // input embedding doubles as output projection
  float length_loss_weight = 1.0f;  // cmlm only

  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Named desk-scale presets; "small" and "base" mirror the usual
// 512/512 and 512/2048 transformer rows.
ModelConfig preset_config(const std::string& name);

// Flat key=value (one per line) serialization, used by checkpoints and by
// run-config files.
std::string config_to_text(const ModelConfig& c, ModelKind kind);
std::pair<ModelConfig, ModelKind> config_from_text(const std::string& text);

// Generic helpers for the flat key=value format.
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::string format_float(float v);  // round-trip exact

}  // namespace mp

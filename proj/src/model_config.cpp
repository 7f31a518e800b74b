#include "mp/model_config.hpp"

#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace mp {

const char* to_string(DecoderAttention a) {
  return a == DecoderAttention::causal ? "causal" : "bidirectional";
}

const char* to_string(ModelKind k) { return k == ModelKind::ar ? "ar" : "cmlm"; }

DecoderAttention decoder_attention_from_string(const std::string& s) {
  if (s == "causal") return DecoderAttention::causal;
  if (s == "bidirectional") return DecoderAttention::bidirectional;
  throw ConfigError("unknown decoder_attention: " + s);
}

ModelKind model_kind_from_string(const std::string& s) {
  if (s == "ar") return ModelKind::ar;
  if (s == "cmlm") return ModelKind::cmlm;
  throw ConfigError("unknown model kind: " + s);
}

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (heads < 1) throw ConfigError("heads must be >= 1");
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (d_hidden < 1) throw ConfigError("d_hidden must be >= 1");
  if (vocab_size < 1) throw ConfigError("vocab_size must be set");
  if (max_len < 2) throw ConfigError("max_len must be >= 2");
  if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("dropout must be in [0,1)");
}

ModelConfig preset_config(const std::string& name) {
  ModelConfig c;
  if (name == "tiny") {
    c.layers = 2;
    c.heads = 4;
    c.d_model = 64;
    c.d_hidden = 256;
  } else if (name == "small") {
    c.layers = 6;
    c.heads = 8;
    c.d_model = 512;
    c.d_hidden = 512;
  } else if (name == "base") {
    c.layers = 6;
    c.heads = 8;
    c.d_model = 512;
    c.d_hidden = 2048;
  } else {
    throw ConfigError("unknown model preset: " + name + " (expected tiny|small|base)");
  }
  return c;
}

std::string format_float(float v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

std::string config_to_text(const ModelConfig& c, ModelKind kind) {
  std::ostringstream os;
  os << "format_version=1\n";
  os << "model_kind=" << to_string(kind) << "\n";
  os << "layers=" << c.layers << "\n";
  os << "heads=" << c.heads << "\n";
  os << "d_model=" << c.d_model << "\n";
  os << "d_hidden=" << c.d_hidden << "\n";
  os << "vocab_size=" << c.vocab_size << "\n";
  os << "max_len=" << c.max_len << "\n";
  os << "dropout=" << format_float(c.dropout) << "\n";
  os << "decoder_attention=" << to_string(c.decoder_attention) << "\n";
  os << "tie_embeddings=" << (c.tie_embeddings ? 1 : 0) << "\n";
  os << "length_loss_weight=" << format_float(c.length_loss_weight) << "\n";
  return os.str();
}

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed key=value line: " + line);
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::pair<ModelConfig, ModelKind> config_from_text(const std::string& text) {
  const auto kv = parse_kv_text(text);
  auto get = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError("missing config key: " + key);
    return it->second;
  };
  if (get("format_version") != "1") throw ConfigError("unsupported checkpoint format version");
  ModelConfig c;
  c.layers = std::stoi(get("layers"));
  c.heads = std::stoi(get("heads"));
  c.d_model = std::stoi(get("d_model"));
  c.d_hidden = std::stoi(get("d_hidden"));
  c.vocab_size = std::stoi(get("vocab_size"));
  c.max_len = std::stoi(get("max_len"));
  c.dropout = std::strtof(get("dropout").c_str(), nullptr);
  c.decoder_attention = decoder_attention_from_string(get("decoder_attention"));
  c.tie_embeddings = get("tie_embeddings") != "0";
  c.length_loss_weight = std::strtof(get("length_loss_weight").c_str(), nullptr);
  const ModelKind kind = model_kind_from_string(get("model_kind"));
  c.validate();
  return {c, kind};
}

}  // namespace mp

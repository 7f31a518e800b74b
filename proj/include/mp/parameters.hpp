#pragma once

#include <map>
#include <string>
#include <vector>

#include "mp/model_config.hpp"
#include "mp/tensor.hpp"

namespace mp {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Named parameter tensors; the name set is a pure function of
// (ModelConfig, ModelKind). Ordered map so iteration is sorted-name order.
struct Parameters {
  std::map<std::string, Tensor> by_name;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return by_name.count(name) != 0; }
  void zero_grads();
  std::size_t count() const { return by_name.size(); }
};

struct Model {
  ModelKind kind = ModelKind::cmlm;
  ModelConfig config;
  Parameters params;
};

// Checkpoint file: key=value text header terminated by a blank line, then
// each tensor in sorted name order as
//   u32 name_len | name bytes | u32 rank | u32 dims[rank] | f32 payload
// with all scalars little-endian. Round-trips bit-exactly.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

// Element-wise mean over checkpoints with identical config and name sets.
Model average_checkpoints(const std::vector<std::string>& paths);

}  // namespace mp

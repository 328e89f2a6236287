#pragma once

#include <map>
#include <string>

#include "neuroalign/array_io.hpp"
#include "neuroalign/model.hpp"

namespace neuroalign {

struct AdamWConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;  // applied to ".weight" tensors only
};

// Adam with decoupled weight decay. Frozen parameters are skipped entirely,
// so their values stay bit-identical.
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(AdamWConfig config) : config_(config) {}

  const AdamWConfig& config() const { return config_; }
  AdamWConfig& config() { return config_; }
  long long steps() const { return step_; }

  // Applies p.grad to every non-frozen parameter, then zeroes all grads.
  void step(const NamedParameters& params);

  void save_state(ArrayFile& file) const;
  void load_state(const ArrayFile& file);

 private:
  struct Moments {
    Mat m;
    Mat v;
  };
  AdamWConfig config_;
  std::map<std::string, Moments> state_;
  long long step_ = 0;
};

}  // namespace neuroalign

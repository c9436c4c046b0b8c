#pragma once

#include <vector>

#include "impinj/data.h"

namespace impinj {

// Class-structured random import vectors for tests and smoke runs. Each class
// owns a block of signature features set with high probability; every other
// feature is background noise. Rows always satisfy the minimum-import rule.
struct SyntheticSpec {
  std::vector<int> class_sizes{10, 10, 10, 10, 10, 10};
  int features = 64;
  int signature_width = 6;
  double signature_rate = 0.8;
  double background_rate = 0.08;
  std::uint64_t seed = 0;
};

LabeledDataset make_synthetic_dataset(const SyntheticSpec& spec);

}  // namespace impinj

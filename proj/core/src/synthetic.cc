#include "impinj/synthetic.h"

#include <cstdio>

namespace impinj {

LabeledDataset make_synthetic_dataset(const SyntheticSpec& spec) {
  const int classes = static_cast<int>(spec.class_sizes.size());
  if (classes < 1 || spec.features < kMinImports) throw ConfigError("synthetic: need a class and enough features");
  if (classes * spec.signature_width > spec.features) throw ConfigError("synthetic: signature blocks do not fit");
  std::vector<std::string> names;
  for (int j = 0; j < spec.features; ++j) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "api_%04d", j);
    names.emplace_back(buf);
  }
  LabeledDataset ds;
  ds.vocabulary = ApiVocabulary(std::move(names));
  int total = 0;
  for (int s : spec.class_sizes) total += s;
  ds.features = Matrix::Zero(total, spec.features);
  Rng rng(spec.seed);
  std::bernoulli_distribution signature(spec.signature_rate);
  std::bernoulli_distribution background(spec.background_rate);
  std::uniform_int_distribution<int> any_feature(0, spec.features - 1);
  int row = 0;
  for (int c = 0; c < classes; ++c) {
    const int block = c * spec.signature_width;
    for (int i = 0; i < spec.class_sizes[static_cast<std::size_t>(c)]; ++i, ++row) {
      for (int j = 0; j < spec.features; ++j) {
        const bool own = j >= block && j < block + spec.signature_width;
        if (own ? signature(rng) : background(rng)) ds.features(row, j) = 1.0;
      }
      while (ds.features.row(row).sum() < kMinImports) ds.features(row, any_feature(rng)) = 1.0;
      ds.labels.push_back(c + 1);
    }
  }
  ds.class_count = classes;
  return ds;
}

}  // namespace impinj

#pragma once

// Desk-scale presets: toy pipeline + training schedule over the synthetic
// dataset, and the ablation inputs derived from it.

#include "skylink/bridge3d.hpp"
#include "skylink/evaluator.hpp"
#include "skylink/grem.hpp"
#include "skylink/model.hpp"
#include "skylink/synthetic.hpp"
#include "skylink/trainer.hpp"

#include <memory>

namespace skylink {

// Reference schedule (5e-4 -> 1e-4, 10% warmup, momentum 0.9) over 5 epochs.
// Colour jitter is left out: the synthetic views share colour identity, which
// that stage perturbs directly.
inline TrainConfig toy_train_config() {
  TrainConfig c;
  c.epochs = 5;
  c.batch_size = 8;
  c.seed = 1;
  c.augment.stages = parse_augmentations("jpeg:0.5,blur_sharpen:0.3,dropout:0.3");
  c.loss.lambda = 3.0;
  c.loss.temperature = 0.07;
  return c;
}

// Original streets plus the GREM selection from the synthetic auxiliary pool.
inline std::vector<ImageRecord> with_grem(const SyntheticDataset& ds, GremAudit* audit = nullptr) {
  std::vector<ImageRecord> anchors;
  for (const auto& r : ds.train)
    if (r.view == View::street) anchors.push_back(r);
  GremResult g = run_grem(anchors, ds.grem_pool, MeanPoolExtractor(4), *ds.images);
  if (audit) *audit = g.audit;
  std::vector<ImageRecord> out = ds.train;
  out.insert(out.end(), g.augmented.begin(), g.augmented.end());
  return out;
}

inline AblationData toy_ablation_data(const SyntheticDataset& ds) {
  AblationData d;
  d.locations = group_locations(ds.train);
  d.grem_locations = group_locations(with_grem(ds));
  d.queries = ds.queries;
  d.gallery = ds.gallery;
  d.images = ds.images;
  d.backend = std::make_shared<StubReconstructionBackend>(1);
  return d;
}

}  // namespace skylink

// Minimal end-to-end run: synthesize a small phantom cohort, train the
// dual-encoder variant for one epoch on one fold, and print the held-out
// Dice together with the velocity peaks of the first validation slice.

#include <cstdio>

#include "mvmseg/pipeline.hpp"

using namespace mvmseg;

int main() {
  tune_allocator();

  RunConfig run;
  run.phantom.size = 32;
  run.phantom.frames = 20;
  run.phantom.subjects = 4;
  run.phantom.slices_min = run.phantom.slices_max = 1;
  run.phantom.epi_a_min = 9.0;
  run.phantom.epi_a_max = 11.0;
  run.phantom.epi_flatten_max = 0.1;
  run.phantom.wall_min = 4.0;
  run.phantom.wall_max = 4.5;
  run.phantom.center_jitter = 1.5;
  run.phantom.seed = 7;
  run.model.levels = 2;
  run.model.base_channels = 8;
  run.training.batch_size = 8;
  run.training.epochs = 3;
  run.folds = 2;
  run.seed = 11;

  Dataset data = build_dataset(run.phantom);
  FoldSplit split = kfold_split(data.subject_ids(), run.folds, run.seed);

  TrainResult tr = train_fold(run, Variant::d, data, split, 0);
  for (const auto& log : tr.log)
    std::printf("epoch %d: loss %.4f, held-out dice %.4f\n", log.epoch, log.mean_loss, log.val_dice);

  FoldEval ev = evaluate_fold(tr.model, data, split.val[0], run.training.batch_size);
  std::printf("fold mean per-frame dice: %.4f\n", ev.mean_frame_dice);
  if (!ev.slices.empty() && ev.slices[0].velocity_ok) {
    const auto& s = ev.slices[0];
    std::printf("slice (subject %d): PS %.2f / %.2f, PD %.2f / %.2f, PAS %.2f / %.2f (predicted / truth, cm/s)\n",
                s.subject, s.pred_peaks.ps.value, s.gt_peaks.ps.value, s.pred_peaks.pd.value, s.gt_peaks.pd.value,
                s.pred_peaks.pas.value, s.gt_peaks.pas.value);
  }
  return 0;
}

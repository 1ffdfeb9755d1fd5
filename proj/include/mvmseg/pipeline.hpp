#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mvmseg/adam.hpp"
#include "mvmseg/phantom.hpp"
#include "mvmseg/postproc.hpp"
#include "mvmseg/stats.hpp"
#include "mvmseg/tensorfile.hpp"
#include "mvmseg/unet.hpp"
#include "mvmseg/velocity.hpp"

namespace mvmseg {

using json = nlohmann::ordered_json;

struct TrainingConfig {
  int batch_size = 8;
  int epochs = 5;
  AdamOptions adam;
  bool augment = true;
};

/// Everything one experiment needs: phantom data model, network shape,
/// optimization settings, fold count, master seed, output directory.
struct RunConfig {
  PhantomConfig phantom;
  ModelConfig model;
  TrainingConfig training;
  int folds = 5;
  std::uint64_t seed = 1234;
  std::string output_dir = "out";

  void validate() const {
    phantom.validate();
    model.validate();
    if (training.batch_size < 1) throw std::invalid_argument("RunConfig: batch_size < 1");
    if (training.epochs < 0) throw std::invalid_argument("RunConfig: negative epochs");
    if (folds < 2) throw std::invalid_argument("RunConfig: folds < 2");
    if (folds > phantom.subjects) throw std::invalid_argument("RunConfig: folds exceed subject count");
  }
};

namespace config_json {

inline json to_json(const PhantomConfig& c) {
  return json{{"size", c.size},
              {"frames", c.frames},
              {"subjects", c.subjects},
              {"slices_min", c.slices_min},
              {"slices_max", c.slices_max},
              {"epi_a_min", c.epi_a_min},
              {"epi_a_max", c.epi_a_max},
              {"epi_flatten_max", c.epi_flatten_max},
              {"wall_min", c.wall_min},
              {"wall_max", c.wall_max},
              {"center_jitter", c.center_jitter},
              {"contraction_amp", c.contraction_amp},
              {"systolic", {c.systolic.amp, c.systolic.mu, c.systolic.sigma}},
              {"diastolic", {c.diastolic.amp, c.diastolic.mu, c.diastolic.sigma}},
              {"atrial", {c.atrial.amp, c.atrial.mu, c.atrial.sigma}},
              {"velocity_amp_jitter", c.velocity_amp_jitter},
              {"velocity_time_jitter", c.velocity_time_jitter},
              {"venc", c.venc},
              {"mag_noise_sigma", c.mag_noise_sigma},
              {"phase_noise_sigma", c.phase_noise_sigma},
              {"annulus_value", c.annulus_value},
              {"pool_value", c.pool_value},
              {"background_value", c.background_value},
              {"phase_modulation_amp", c.phase_modulation_amp},
              {"inplane_amp", c.inplane_amp},
              {"seed", c.seed}};
}

inline PhantomConfig phantom_from_json(const json& j) {
  PhantomConfig c;
  c.size = j.value("size", c.size);
  c.frames = j.value("frames", c.frames);
  c.subjects = j.value("subjects", c.subjects);
  c.slices_min = j.value("slices_min", c.slices_min);
  c.slices_max = j.value("slices_max", c.slices_max);
  c.epi_a_min = j.value("epi_a_min", c.epi_a_min);
  c.epi_a_max = j.value("epi_a_max", c.epi_a_max);
  c.epi_flatten_max = j.value("epi_flatten_max", c.epi_flatten_max);
  c.wall_min = j.value("wall_min", c.wall_min);
  c.wall_max = j.value("wall_max", c.wall_max);
  c.center_jitter = j.value("center_jitter", c.center_jitter);
  c.contraction_amp = j.value("contraction_amp", c.contraction_amp);
  auto lobe = [&](const char* key, VelocityLobe base) {
    if (!j.contains(key)) return base;
    const auto& a = j.at(key);
    return VelocityLobe{a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()};
  };
  c.systolic = lobe("systolic", c.systolic);
  c.diastolic = lobe("diastolic", c.diastolic);
  c.atrial = lobe("atrial", c.atrial);
  c.velocity_amp_jitter = j.value("velocity_amp_jitter", c.velocity_amp_jitter);
  c.velocity_time_jitter = j.value("velocity_time_jitter", c.velocity_time_jitter);
  c.venc = j.value("venc", c.venc);
  c.mag_noise_sigma = j.value("mag_noise_sigma", c.mag_noise_sigma);
  c.phase_noise_sigma = j.value("phase_noise_sigma", c.phase_noise_sigma);
  c.annulus_value = j.value("annulus_value", c.annulus_value);
  c.pool_value = j.value("pool_value", c.pool_value);
  c.background_value = j.value("background_value", c.background_value);
  c.phase_modulation_amp = j.value("phase_modulation_amp", c.phase_modulation_amp);
  c.inplane_amp = j.value("inplane_amp", c.inplane_amp);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json to_json(const ModelConfig& c) {
  return json{{"variant", to_string(c.variant)}, {"levels", c.levels},           {"base_channels", c.base_channels},
              {"mag_channels", c.mag_channels},  {"phase_channels", c.phase_channels}, {"num_classes", c.num_classes},
              {"seed", c.seed}};
}

inline ModelConfig model_from_json(const json& j) {
  ModelConfig c;
  if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
  c.levels = j.value("levels", c.levels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.mag_channels = j.value("mag_channels", c.mag_channels);
  c.phase_channels = j.value("phase_channels", c.phase_channels);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline json to_json(const RunConfig& c) {
  return json{{"phantom", to_json(c.phantom)},
              {"model", to_json(c.model)},
              {"training",
               {{"batch_size", c.training.batch_size},
                {"epochs", c.training.epochs},
                {"lr", c.training.adam.lr},
                {"beta1", c.training.adam.beta1},
                {"beta2", c.training.adam.beta2},
                {"eps", c.training.adam.eps},
                {"augment", c.training.augment}}},
              {"folds", c.folds},
              {"seed", c.seed},
              {"output_dir", c.output_dir}};
}

inline RunConfig run_from_json(const json& j) {
  RunConfig c;
  if (j.contains("phantom")) c.phantom = phantom_from_json(j.at("phantom"));
  if (j.contains("model")) c.model = model_from_json(j.at("model"));
  if (j.contains("training")) {
    const auto& t = j.at("training");
    c.training.batch_size = t.value("batch_size", c.training.batch_size);
    c.training.epochs = t.value("epochs", c.training.epochs);
    c.training.adam.lr = t.value("lr", c.training.adam.lr);
    c.training.adam.beta1 = t.value("beta1", c.training.adam.beta1);
    c.training.adam.beta2 = t.value("beta2", c.training.adam.beta2);
    c.training.adam.eps = t.value("eps", c.training.adam.eps);
    c.training.augment = t.value("augment", c.training.augment);
  }
  c.folds = j.value("folds", c.folds);
  c.seed = j.value("seed", c.seed);
  c.output_dir = j.value("output_dir", c.output_dir);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  json j = json::parse(is);
  return run_from_json(j);
}

}  // namespace config_json

/// Subject-level cross-validation split.
struct FoldSplit {
  std::vector<std::vector<int>> train, val;  // subject ids per fold
  int folds() const { return int(val.size()); }
};

/// Seeded shuffle plus round-robin assignment; validation fold sizes differ
/// by at most one and folds partition the subjects.
inline FoldSplit kfold_split(const std::vector<int>& subject_ids, int k, std::uint64_t seed) {
  if (k < 1 || k > int(subject_ids.size()))
    throw std::invalid_argument("kfold_split: k = " + std::to_string(k) + " with " + std::to_string(subject_ids.size()) +
                                " subjects");
  std::vector<int> order = subject_ids;
  Rng rng(Rng::splitmix(seed ^ 0xf01d5));
  for (int i = int(order.size()) - 1; i > 0; --i) std::swap(order[std::size_t(i)], order[std::size_t(rng.uniform_int(i + 1))]);

  FoldSplit out;
  out.train.resize(std::size_t(k));
  out.val.resize(std::size_t(k));
  for (std::size_t j = 0; j < order.size(); ++j) out.val[j % std::size_t(k)].push_back(order[j]);
  for (int f = 0; f < k; ++f) {
    std::set<int> vf(out.val[std::size_t(f)].begin(), out.val[std::size_t(f)].end());
    for (int s : subject_ids)
      if (!vf.count(s)) out.train[std::size_t(f)].push_back(s);
  }
  return out;
}

/// All studies of one phantom configuration, with frame-level indexing.
struct Dataset {
  PhantomConfig phantom;
  std::vector<CineStudy> studies;

  struct FrameRef {
    int study = 0, frame = 0;
  };

  std::vector<int> subject_ids() const {
    std::set<int> ids;
    for (const auto& st : studies) ids.insert(st.subject_id);
    return {ids.begin(), ids.end()};
  }

  std::vector<FrameRef> frames_of(const std::vector<int>& subjects) const {
    std::set<int> want(subjects.begin(), subjects.end());
    std::vector<FrameRef> out;
    for (int si = 0; si < int(studies.size()); ++si)
      if (want.count(studies[std::size_t(si)].subject_id))
        for (int t = 0; t < studies[std::size_t(si)].frames; ++t) out.push_back({si, t});
    return out;
  }

  std::vector<int> studies_of(int subject) const {
    std::vector<int> out;
    for (int si = 0; si < int(studies.size()); ++si)
      if (studies[std::size_t(si)].subject_id == subject) out.push_back(si);
    return out;
  }
};

inline Dataset build_dataset(const PhantomConfig& cfg) {
  cfg.validate();
  Dataset d;
  d.phantom = cfg;
  for (int s = 0; s < cfg.subjects; ++s) {
    const int slices = slices_for_subject(cfg, s);
    for (int z = 0; z < slices; ++z) d.studies.push_back(generate_study(cfg, s, z));
  }
  return d;
}

/// Named-parameter archive plus a JSON sidecar holding the ModelConfig.
inline void save_checkpoint(const std::string& path, UNetModel<float>& model) {
  NamedRecords recs;
  for (auto& [name, t] : model.named_params()) recs.push_back({name, to_record(t)});
  write_archive(path, recs);
  std::ofstream side(path + ".json");
  side << config_json::to_json(model.config).dump(2) << "\n";
}

inline UNetModel<float> load_checkpoint(const std::string& path) {
  std::ifstream side(path + ".json");
  if (!side) throw std::runtime_error("load_checkpoint: missing sidecar " + path + ".json");
  const ModelConfig cfg = config_json::model_from_json(json::parse(side));
  UNetModel<float> model = build_model<float>(cfg);
  auto recs = read_archive(path);
  auto params = model.named_params();
  if (recs.size() != params.size()) throw std::runtime_error("load_checkpoint: parameter count mismatch in " + path);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (recs[i].first != params[i].first) throw std::runtime_error("load_checkpoint: unexpected parameter " + recs[i].first);
    if (recs[i].second.shape != params[i].second.shape())
      throw std::runtime_error("load_checkpoint: shape mismatch for " + recs[i].first);
    std::copy(recs[i].second.f32.begin(), recs[i].second.f32.end(), params[i].second.vec().begin());
  }
  return model;
}

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0;
  double val_dice = 0;
};

struct TrainResult {
  UNetModel<float> model;
  std::vector<EpochLog> log;
};

namespace pipeline_detail {

// Batched inference; returns predicted masks for the given frames.
inline std::vector<Mask> predict_frames(UNetModel<float>& model, const Dataset& data,
                                        const std::vector<Dataset::FrameRef>& frames, int batch_size) {
  std::vector<Mask> out;
  out.reserve(frames.size());
  const int H = data.phantom.size, W = data.phantom.size;
  for (std::size_t start = 0; start < frames.size(); start += std::size_t(batch_size)) {
    const int bsz = int(std::min(frames.size() - start, std::size_t(batch_size)));
    Tensor<float> mag({bsz, 1, H, W}), ph({bsz, 3, H, W});
    for (int b = 0; b < bsz; ++b) {
      const auto& fr = frames[start + std::size_t(b)];
      const CineStudy& st = data.studies[std::size_t(fr.study)];
      std::copy(st.magnitude.data() + std::size_t(fr.frame) * H * W, st.magnitude.data() + std::size_t(fr.frame + 1) * H * W,
                mag.data() + std::size_t(b) * H * W);
      std::copy(st.phase.data() + std::size_t(fr.frame) * 3 * H * W, st.phase.data() + std::size_t(fr.frame + 1) * 3 * H * W,
                ph.data() + std::size_t(b) * 3 * H * W);
    }
    auto masks = predict_mask(forward(model, mag, ph));
    for (auto& m : masks) out.push_back(std::move(m));
  }
  return out;
}

inline double mean_val_dice(UNetModel<float>& model, const Dataset& data, const std::vector<Dataset::FrameRef>& frames,
                            int batch_size) {
  auto preds = predict_frames(model, data, frames, batch_size);
  double acc = 0;
  for (std::size_t i = 0; i < frames.size(); ++i)
    acc += dice(preds[i], data.studies[std::size_t(frames[i].study)].gt_mask[std::size_t(frames[i].frame)]);
  return frames.empty() ? 0.0 : acc / double(frames.size());
}

}  // namespace pipeline_detail

/// Trains one variant on one fold: frames of the training subjects are
/// shuffled per epoch, batched, augmented, and stepped with Adam; the log
/// records per-epoch mean loss and validation per-frame Dice. Guards
/// against subject leakage at assembly time and aborts on NaN loss naming
/// the offending batch.
inline TrainResult train_fold(const RunConfig& run, Variant variant, const Dataset& data, const FoldSplit& split,
                              int fold, const std::string& checkpoint_dir = "") {
  run.validate();
  if (fold < 0 || fold >= split.folds()) throw std::invalid_argument("train_fold: fold index out of range");

  const std::vector<int>& train_subjects = split.train[std::size_t(fold)];
  const std::vector<int>& val_subjects = split.val[std::size_t(fold)];
  {
    std::set<int> tset(train_subjects.begin(), train_subjects.end());
    for (int s : val_subjects)
      if (tset.count(s)) throw std::logic_error("train_fold: subject " + std::to_string(s) + " leaks between folds");
  }

  ModelConfig mc = run.model;
  mc.variant = variant;
  mc.seed = Rng::splitmix(run.seed ^ (0xabcd0000ull + std::uint64_t(fold) * 8 + std::uint64_t(variant)));
  TrainResult result{build_model<float>(mc), {}};
  UNetModel<float>& model = result.model;
  model.set_requires_grad(true);
  auto params = model.params();
  AdamState<float> adam;

  auto train_frames = data.frames_of(train_subjects);
  const auto val_frames = data.frames_of(val_subjects);
  {
    // leakage assertion at the frame level
    std::set<int> vset(val_subjects.begin(), val_subjects.end());
    for (const auto& fr : train_frames)
      if (vset.count(data.studies[std::size_t(fr.study)].subject_id))
        throw std::logic_error("train_fold: validation frames present in the training set");
  }

  Rng shuffle_rng(Rng::splitmix(mc.seed ^ 0x5f0ull));
  Rng aug_rng(Rng::splitmix(mc.seed ^ 0xa06ull));
  const int H = data.phantom.size, W = data.phantom.size;
  const int bs = run.training.batch_size;
  Tape<float> tape;

  for (int epoch = 0; epoch < run.training.epochs; ++epoch) {
    for (int i = int(train_frames.size()) - 1; i > 0; --i)
      std::swap(train_frames[std::size_t(i)], train_frames[std::size_t(shuffle_rng.uniform_int(i + 1))]);

    double loss_sum = 0;
    int batches = 0;
    for (std::size_t start = 0; start < train_frames.size(); start += std::size_t(bs)) {
      const int bsz = int(std::min(train_frames.size() - start, std::size_t(bs)));
      Tensor<float> mag({bsz, 1, H, W}), ph({bsz, 3, H, W});
      std::vector<Mask> labels;
      labels.reserve(std::size_t(bsz));
      for (int b = 0; b < bsz; ++b) {
        const auto& fr = train_frames[start + std::size_t(b)];
        const CineStudy& st = data.studies[std::size_t(fr.study)];
        auto [fmag, fph] = study_frame(st, fr.frame);
        Mask label = st.gt_mask[std::size_t(fr.frame)];
        if (run.training.augment) augment(fmag, fph, label, aug_rng);
        std::copy(fmag.data(), fmag.data() + fmag.size(), mag.data() + std::size_t(b) * H * W);
        std::copy(fph.data(), fph.data() + fph.size(), ph.data() + std::size_t(b) * 3 * H * W);
        labels.push_back(std::move(label));
      }

      auto logits = forward(model, mag, ph, &tape);
      auto loss = softmax_ce(logits, labels, &tape);
      const double loss_value = double(loss.item());
      if (std::isnan(loss_value))
        throw std::runtime_error("train_fold: NaN loss at epoch " + std::to_string(epoch) + " batch " +
                                 std::to_string(batches));
      tape.backward(loss);
      adam_step(params, adam, run.training.adam);
      model.zero_grad();
      tape.reset();
      loss_sum += loss_value;
      ++batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.mean_loss = batches ? loss_sum / batches : 0.0;
    log.val_dice = pipeline_detail::mean_val_dice(model, data, val_frames, bs);
    result.log.push_back(log);
    if (!checkpoint_dir.empty()) {
      std::filesystem::create_directories(checkpoint_dir);
      save_checkpoint(checkpoint_dir + "/checkpoint_epoch" + std::to_string(epoch) + ".mvmt", model);
    }
  }
  return result;
}

/// Raw-prediction Dice rows at all three levels, post-processed contours,
/// velocity peaks from predicted and ground-truth masks, and per-slice
/// wall-clock timing.
struct FrameEval {
  int subject = 0, slice = 0, frame = 0;
  double dice_raw = 0;
  bool unrecoverable = false, fell_back = false;
};

struct SliceEval {
  int subject = 0, slice = 0;
  double dice_pooled_slice = 0, dice_mean_slice = 0;
  bool velocity_ok = true;  // false when unrecoverable frames emptied the curve
  PeakSet pred_peaks, gt_peaks;
  VelocityCurve pred_curve, gt_curve;
  std::vector<ContourResult> contours;  // per frame; empty entries for unrecoverable frames
  std::vector<std::uint8_t> frame_unrecoverable;
  double seconds = 0;
};

struct SubjectEval {
  int subject = 0;
  double dice_pooled_subject = 0, dice_mean_subject = 0;
};

struct FoldEval {
  int fold = 0;
  std::vector<FrameEval> frames;
  std::vector<SliceEval> slices;
  std::vector<SubjectEval> subjects;
  double mean_frame_dice = 0;
};

/// Maps a list of frame references to predicted masks; the seam between
/// evaluation bookkeeping and the network (tests may substitute oracles).
using FramePredictor = std::function<std::vector<Mask>(const std::vector<Dataset::FrameRef>&)>;

inline FoldEval evaluate_fold_with(const FramePredictor& predictor, const Dataset& data,
                                   const std::vector<int>& val_subjects) {
  FoldEval out;
  const int H = data.phantom.size, W = data.phantom.size;
  double dice_acc = 0;
  std::size_t dice_n = 0;

  for (int subject : val_subjects) {
    std::vector<Mask> subj_pred, subj_gt;
    for (int si : data.studies_of(subject)) {
      const CineStudy& st = data.studies[std::size_t(si)];
      const auto t0 = std::chrono::steady_clock::now();

      std::vector<Dataset::FrameRef> frames;
      for (int t = 0; t < st.frames; ++t) frames.push_back({si, t});
      auto preds = predictor(frames);

      SliceEval sl;
      sl.subject = subject;
      sl.slice = st.slice_id;
      sl.contours.resize(std::size_t(st.frames));
      sl.frame_unrecoverable.assign(std::size_t(st.frames), 0);

      // velocity maps integrate over the region between the fitted
      // contours, not the ring-augmented final segmentation
      std::vector<Mask> velocity_masks(std::size_t(st.frames));
      const ContourResult* prev = nullptr;
      for (int t = 0; t < st.frames; ++t) {
        FrameEval fe;
        fe.subject = subject;
        fe.slice = st.slice_id;
        fe.frame = t;
        fe.dice_raw = dice(preds[std::size_t(t)], st.gt_mask[std::size_t(t)]);
        dice_acc += fe.dice_raw;
        ++dice_n;
        try {
          sl.contours[std::size_t(t)] = finalize(preds[std::size_t(t)], prev);
          prev = &sl.contours[std::size_t(t)];
          velocity_masks[std::size_t(t)] = contour_region(sl.contours[std::size_t(t)].epi, sl.contours[std::size_t(t)].endo, H, W);
          fe.fell_back = sl.contours[std::size_t(t)].fell_back;
        } catch (const Unrecoverable&) {
          fe.unrecoverable = true;
          sl.frame_unrecoverable[std::size_t(t)] = 1;
          velocity_masks[std::size_t(t)] = Mask(H, W);
        }
        out.frames.push_back(fe);
      }

      // slice-level Dice pools the raw (pre-post-processing) predictions
      sl.dice_pooled_slice = dice_pooled(preds, st.gt_mask);
      sl.dice_mean_slice = dice_mean_of_frames(preds, st.gt_mask);

      // velocity over the post-processed masks; ground truth over gt masks
      Tensor<float> phase_z({st.frames, H, W});
      for (int t = 0; t < st.frames; ++t)
        std::copy(st.phase.data() + (std::size_t(t) * 3 + 2) * H * W, st.phase.data() + (std::size_t(t) * 3 + 3) * H * W,
                  phase_z.data() + std::size_t(t) * H * W);
      sl.gt_curve = global_curve(phase_z, st.gt_mask);
      sl.gt_peaks = extract_peaks(sl.gt_curve);
      try {
        sl.pred_curve = global_curve(phase_z, velocity_masks);
        sl.pred_peaks = extract_peaks(sl.pred_curve);
      } catch (const EmptyMask&) {
        sl.velocity_ok = false;
      }

      sl.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.slices.push_back(std::move(sl));

      for (int t = 0; t < st.frames; ++t) {
        subj_pred.push_back(preds[std::size_t(t)]);
        subj_gt.push_back(st.gt_mask[std::size_t(t)]);
      }
    }
    SubjectEval se;
    se.subject = subject;
    se.dice_pooled_subject = dice_pooled(subj_pred, subj_gt);
    se.dice_mean_subject = dice_mean_of_frames(subj_pred, subj_gt);
    out.subjects.push_back(se);
  }
  out.mean_frame_dice = dice_n ? dice_acc / double(dice_n) : 0.0;
  return out;
}

inline FoldEval evaluate_fold(UNetModel<float>& model, const Dataset& data, const std::vector<int>& val_subjects,
                              int batch_size = 8) {
  return evaluate_fold_with(
      [&](const std::vector<Dataset::FrameRef>& frames) {
        return pipeline_detail::predict_frames(model, data, frames, batch_size);
      },
      data, val_subjects);
}

}  // namespace mvmseg

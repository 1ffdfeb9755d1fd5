// Command-line driver: phantom synthesis, cross-validated training,
// inference, shape post-processing, velocimetry, and report assembly.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mvmseg/report.hpp"

namespace fs = std::filesystem;
using namespace mvmseg;

namespace {

struct Manifest {
  std::vector<std::pair<int, int>> studies;  // (subject, slice)
};

void save_manifest(const std::string& dir, const Dataset& data, const PhantomConfig& cfg) {
  json j;
  j["config"] = config_json::to_json(cfg);
  j["studies"] = json::array();
  for (const auto& st : data.studies) j["studies"].push_back({st.subject_id, st.slice_id});
  std::ofstream os(dir + "/manifest.json", std::ios::binary);
  os << j.dump(2) << "\n";
}

Manifest load_manifest(const std::string& dir) {
  std::ifstream is(dir + "/manifest.json");
  if (!is) throw std::runtime_error("missing " + dir + "/manifest.json (run the phantom subcommand first)");
  json j = json::parse(is);
  Manifest m;
  for (const auto& e : j.at("studies")) m.studies.push_back({e.at(0).get<int>(), e.at(1).get<int>()});
  return m;
}

Dataset dataset_from(const RunConfig& run, const std::string& data_dir) {
  if (data_dir.empty()) return build_dataset(run.phantom);
  Dataset d;
  d.phantom = run.phantom;
  for (const auto& [s, z] : load_manifest(data_dir).studies) d.studies.push_back(load_study(data_dir, s, z));
  return d;
}

std::string study_tag(int subject, int slice) {
  return "subject" + std::to_string(subject) + "_slice" + std::to_string(slice);
}

Tensor<float> phase_z_of(const CineStudy& st) {
  const int H = st.size, W = st.size;
  Tensor<float> z({st.frames, H, W});
  for (int t = 0; t < st.frames; ++t)
    std::copy(st.phase.data() + (std::size_t(t) * 3 + 2) * H * W, st.phase.data() + (std::size_t(t) * 3 + 3) * H * W,
              z.data() + std::size_t(t) * H * W);
  return z;
}

json peaks_json(const PeakSet& p) {
  auto one = [](const Peak& pk, bool flag) { return json{{"value", pk.value}, {"frame", pk.frame}, {"sign_violation", flag}}; };
  return json{{"PS", one(p.ps, p.ps_sign_violation)}, {"PD", one(p.pd, p.pd_sign_violation)}, {"PAS", one(p.pas, p.pas_sign_violation)}};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Multi-channel myocardium segmentation and velocimetry workbench"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, checkpoint, pred_dir, masks_dir, runs_dir;
  std::string variant_str = "a", variants_str = "a,b,c,d", source = "pred";
  int fold = 0;
  std::uint64_t seed_override = 0;

  auto add_config = [&](CLI::App* cmd) { cmd->add_option("--config", config_path, "JSON run configuration")->required(); };

  auto* cmd_phantom = app.add_subcommand("phantom", "Synthesize the cine dataset with ground truth");
  add_config(cmd_phantom);
  cmd_phantom->add_option("--out", out_dir, "Output directory")->required();

  auto* cmd_train = app.add_subcommand("train", "Train one variant on one cross-validation fold");
  add_config(cmd_train);
  cmd_train->add_option("--variant", variant_str, "a|b|c|d")->required();
  cmd_train->add_option("--fold", fold, "Fold index")->required();
  cmd_train->add_option("--data", data_dir, "Dataset directory (regenerated from config when omitted)");
  cmd_train->add_option("--out", out_dir, "Run output directory")->required();
  auto* seed_opt = cmd_train->add_option("--seed", seed_override, "Master seed override");

  auto* cmd_predict = app.add_subcommand("predict", "Run inference over a fold's validation subjects");
  add_config(cmd_predict);
  cmd_predict->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  cmd_predict->add_option("--fold", fold, "Fold index")->required();
  cmd_predict->add_option("--data", data_dir, "Dataset directory");
  cmd_predict->add_option("--out", out_dir, "Prediction output directory")->required();

  auto* cmd_post = app.add_subcommand("postprocess", "Repair predicted masks and export contours");
  add_config(cmd_post);
  cmd_post->add_option("--pred", pred_dir, "Directory of predicted mask archives")->required();
  cmd_post->add_option("--out", out_dir, "Output directory")->required();

  auto* cmd_velocity = app.add_subcommand("velocity", "Global velocity curves and peaks");
  add_config(cmd_velocity);
  cmd_velocity->add_option("--data", data_dir, "Dataset directory");
  cmd_velocity->add_option("--masks", masks_dir, "Directory of myocardium region masks (from postprocess)");
  cmd_velocity->add_option("--source", source, "pred (default) or gt");
  cmd_velocity->add_option("--out", out_dir, "Output directory")->required();

  auto* cmd_report = app.add_subcommand("report", "Aggregate fold artifacts into the comparison report");
  cmd_report->add_option("--runs", runs_dir, "Directory holding <variant>/fold<k>/ artifacts")->required();
  cmd_report->add_option("--out", out_dir, "Report directory")->required();

  auto* cmd_exp = app.add_subcommand("experiment", "Full pipeline: train, evaluate and report variants");
  add_config(cmd_exp);
  cmd_exp->add_option("--variants", variants_str, "Comma-separated subset of a,b,c,d");
  cmd_exp->add_option("--out", out_dir, "Output directory (overrides config)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (cmd_phantom->parsed()) {
      RunConfig run = config_json::load_run_config(config_path);
      run.phantom.validate();
      fs::create_directories(out_dir);
      Dataset data = build_dataset(run.phantom);
      for (const auto& st : data.studies) save_study(out_dir, st, run.phantom);
      save_manifest(out_dir, data, run.phantom);
      std::cout << "wrote " << data.studies.size() << " studies to " << out_dir << "\n";
    }

    if (cmd_train->parsed()) {
      RunConfig run = config_json::load_run_config(config_path);
      if (seed_opt->count()) run.seed = seed_override;
      Dataset data = dataset_from(run, data_dir);
      FoldSplit split = kfold_split(data.subject_ids(), run.folds, run.seed);
      const Variant v = variant_from_string(variant_str);
      TrainResult tr = train_fold(run, v, data, split, fold, out_dir);
      {
        std::ofstream os(out_dir + "/train_log.csv", std::ios::binary);
        os << "epoch,mean_loss,val_dice\n";
        for (const auto& l : tr.log)
          os << l.epoch << "," << report_detail::fmt(l.mean_loss) << "," << report_detail::fmt(l.val_dice) << "\n";
      }
      save_checkpoint(out_dir + "/model.mvmt", tr.model);
      std::cout << "trained variant " << variant_str << " fold " << fold;
      if (!tr.log.empty()) std::cout << ": loss " << tr.log.back().mean_loss << ", val dice " << tr.log.back().val_dice;
      std::cout << "\n";
    }

    if (cmd_predict->parsed()) {
      RunConfig run = config_json::load_run_config(config_path);
      Dataset data = dataset_from(run, data_dir);
      FoldSplit split = kfold_split(data.subject_ids(), run.folds, run.seed);
      if (fold < 0 || fold >= split.folds()) throw std::runtime_error("fold index out of range");
      UNetModel<float> model = load_checkpoint(checkpoint);
      fs::create_directories(out_dir);
      for (int subject : split.val[std::size_t(fold)])
        for (int si : data.studies_of(subject)) {
          const CineStudy& st = data.studies[std::size_t(si)];
          std::vector<Dataset::FrameRef> frames;
          for (int t = 0; t < st.frames; ++t) frames.push_back({si, t});
          auto preds = pipeline_detail::predict_frames(model, data, frames, run.training.batch_size);
          NamedRecords recs{{"pred_mask", to_record(preds)}};
          write_archive(out_dir + "/" + study_tag(subject, st.slice_id) + ".mvmt", recs);
        }
      std::cout << "predictions for fold " << fold << " written to " << out_dir << "\n";
    }

    if (cmd_post->parsed()) {
      fs::create_directories(out_dir);
      int slices = 0;
      for (const auto& entry : fs::directory_iterator(pred_dir)) {
        if (entry.path().extension() != ".mvmt") continue;
        auto recs = read_archive(entry.path().string());
        std::vector<Mask> preds;
        for (const auto& [name, rec] : recs)
          if (name == "pred_mask") preds = record_to_masks(rec);
        if (preds.empty()) continue;
        const std::string tag = entry.path().stem().string();

        std::vector<Mask> final_masks, region_masks;
        json ellipses = json::array();
        std::ofstream contour_csv(out_dir + "/" + tag + "_contours.csv", std::ios::binary);
        contour_csv << "frame,contour,point_index,x,y\n";
        ContourResult prev;
        bool have_prev = false;
        for (int t = 0; t < int(preds.size()); ++t) {
          try {
            ContourResult r = finalize(preds[std::size_t(t)], have_prev ? &prev : nullptr);
            for (std::size_t k = 0; k < r.epi_points.size(); ++k)
              contour_csv << t << ",epi," << k << "," << report_detail::fmt(r.epi_points[k].x) << ","
                          << report_detail::fmt(r.epi_points[k].y) << "\n";
            for (std::size_t k = 0; k < r.endo_points.size(); ++k)
              contour_csv << t << ",endo," << k << "," << report_detail::fmt(r.endo_points[k].x) << ","
                          << report_detail::fmt(r.endo_points[k].y) << "\n";
            auto ej = [](const Ellipse& e) { return json{{"cx", e.cx}, {"cy", e.cy}, {"a", e.a}, {"b", e.b}, {"theta", e.theta}}; };
            ellipses.push_back(json{{"frame", t}, {"epi", ej(r.epi)}, {"endo", ej(r.endo)}, {"fell_back", r.fell_back}});
            final_masks.push_back(r.final_mask);
            region_masks.push_back(contour_region(r.epi, r.endo, preds[std::size_t(t)].h, preds[std::size_t(t)].w));
            prev = std::move(r);
            have_prev = true;
          } catch (const Unrecoverable& e) {
            ellipses.push_back(json{{"frame", t}, {"unrecoverable", true}, {"reason", e.what()}});
            final_masks.push_back(Mask(preds[std::size_t(t)].h, preds[std::size_t(t)].w));
            region_masks.push_back(Mask(preds[std::size_t(t)].h, preds[std::size_t(t)].w));
          }
        }
        std::ofstream ejson(out_dir + "/" + tag + "_ellipses.json", std::ios::binary);
        ejson << ellipses.dump(2) << "\n";
        NamedRecords recs_out{{"final_mask", to_record(final_masks)}, {"region_mask", to_record(region_masks)}};
        write_archive(out_dir + "/" + tag + ".mvmt", recs_out);
        ++slices;
      }
      std::cout << "post-processed " << slices << " slices into " << out_dir << "\n";
    }

    if (cmd_velocity->parsed()) {
      RunConfig run = config_json::load_run_config(config_path);
      Dataset data = dataset_from(run, data_dir);
      fs::create_directories(out_dir);
      int done = 0;
      for (const auto& st : data.studies) {
        const std::string tag = study_tag(st.subject_id, st.slice_id);
        std::vector<Mask> masks;
        if (source == "gt") {
          masks = st.gt_mask;
        } else {
          const std::string path = masks_dir + "/" + tag + ".mvmt";
          if (!fs::exists(path)) continue;
          for (const auto& [name, rec] : read_archive(path))
            if (name == "region_mask") masks = record_to_masks(rec);
          if (masks.empty()) continue;
        }
        VelocityCurve curve;
        try {
          curve = global_curve(phase_z_of(st), masks);
        } catch (const EmptyMask& e) {
          std::cerr << tag << ": " << e.what() << "; skipped\n";
          continue;
        }
        std::ofstream csv(out_dir + "/" + tag + "_curve.csv", std::ios::binary);
        csv << "frame,t_frac,velocity\n";
        for (int t = 0; t < curve.frames(); ++t)
          csv << t << "," << report_detail::fmt(curve.t_frac(t)) << "," << report_detail::fmt(curve.v[std::size_t(t)]) << "\n";
        std::ofstream pk(out_dir + "/" + tag + "_peaks.json", std::ios::binary);
        pk << peaks_json(extract_peaks(curve)).dump(2) << "\n";
        ++done;
      }
      std::cout << "velocimetry for " << done << " slices written to " << out_dir << "\n";
    }

    if (cmd_report->parsed()) {
      std::map<std::string, std::vector<LoadedFold>> by_variant;
      for (const std::string v : {"a", "b", "c", "d"}) {
        const fs::path vdir = fs::path(runs_dir) / v;
        if (!fs::exists(vdir)) continue;
        std::vector<fs::path> folds;
        for (const auto& entry : fs::directory_iterator(vdir))
          if (entry.is_directory() && entry.path().filename().string().rfind("fold", 0) == 0) folds.push_back(entry.path());
        std::sort(folds.begin(), folds.end());
        for (const auto& f : folds) by_variant[v].push_back(load_fold_artifacts(f.string()));
      }
      if (by_variant.empty()) throw std::runtime_error("no <variant>/fold<k> artifacts under " + runs_dir);
      write_report(out_dir, by_variant);
      std::cout << "report written to " << out_dir << "\n";
    }

    if (cmd_exp->parsed()) {
      RunConfig run = config_json::load_run_config(config_path);
      if (!out_dir.empty()) run.output_dir = out_dir;
      std::vector<Variant> variants;
      std::stringstream ss(variants_str);
      std::string item;
      while (std::getline(ss, item, ',')) variants.push_back(variant_from_string(item));
      auto result = run_experiment(run, variants);
      for (const auto& [v, folds] : result.evals) {
        double acc = 0;
        for (const auto& f : folds) acc += f.mean_frame_dice;
        std::cout << "variant " << v << ": mean per-frame dice " << acc / double(folds.size()) << " over "
                  << folds.size() << " folds\n";
      }
      std::cout << "artifacts under " << run.output_dir << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
